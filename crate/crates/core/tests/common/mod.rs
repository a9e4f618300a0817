//! Shared checks for the core integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scancad::autodiff::gradcheck::{check_inputs, check_params, GradReport};
use scancad::autodiff::{Graph, Tensor, Var};
use scancad::benchmark::{
    aggregate, category_accuracy, ranking_quality, retrieval_accuracy, AnnotationRecord, RetrievalTask,
};
use scancad::datagen::{generate_dataset, Category, DatasetSpec};
use scancad::embedspace::{confusion_score, Domain, EmbeddingIndex, EmbeddingVector};
use scancad::nets::{ArchitectureConfig, HourglassModel, Stages};
use scancad::trainer::{lr_at, sample_loss, LossSettings, LossWeights, SampleTensors, TrainConfig, TripletSample};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;
/// The composite loss sums ReLUs over every voxel; a smaller step keeps the
/// difference quotient from straddling kinks.
pub const END_TO_END_STEP: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[0.1, 1], away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Weighted sum against a fixed random tensor turns any output into a scalar
/// whose gradient reaches every element.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> scancad::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    let zero = g.constant(Tensor::zeros(g.shape(m).to_vec()));
    g.distance(m, zero)
}

/// Central-difference check of every differentiable op on random inputs.
pub fn op_gradient_reports() -> Vec<(&'static str, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let floor = 1e-4;
    let mut run = |name, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> scancad::Result<Var>| {
        out.push((name, check_inputs(&inputs, STEP, floor, f).unwrap()));
    };

    for (name, k, s, p, d) in [("conv3d k3 s1 p1", 3, 1, 1, 4), ("conv3d k4 s2 p1", 4, 2, 1, 4), ("conv3d k2 s2", 2, 2, 0, 4)] {
        let inputs = vec![
            random(&mut rng, &[1, 2, d, d, d], -1.0, 1.0),
            random(&mut rng, &[3, 2, k, k, k], -1.0, 1.0),
            random(&mut rng, &[3], -1.0, 1.0),
        ];
        run(name, inputs, &move |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], s, p)?;
            project(g, y, 1)
        });
    }
    for (name, k, s, p, d) in [
        ("conv3d_transposed k3 s1 p1", 3, 1, 1, 3),
        ("conv3d_transposed k4 s2 p1", 4, 2, 1, 2),
        ("conv3d_transposed k2 s2", 2, 2, 0, 2),
    ] {
        let inputs = vec![
            random(&mut rng, &[1, 3, d, d, d], -1.0, 1.0),
            random(&mut rng, &[3, 2, k, k, k], -1.0, 1.0),
            random(&mut rng, &[2], -1.0, 1.0),
        ];
        run(name, inputs, &move |g, v| {
            let y = g.conv3d_transposed(v[0], v[1], v[2], s, p)?;
            project(g, y, 2)
        });
    }
    let shape = [1, 3, 2, 2, 2];
    run("relu", vec![off_kink(&mut rng, &shape)], &|g, v| {
        let y = g.relu(v[0]);
        project(g, y, 3)
    });
    run("sigmoid", vec![random(&mut rng, &shape, -3.0, 3.0)], &|g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 4)
    });
    run("add", vec![random(&mut rng, &shape, -1.0, 1.0), random(&mut rng, &shape, -1.0, 1.0)], &|g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 5)
    });
    run("mul", vec![random(&mut rng, &shape, -1.0, 1.0), random(&mut rng, &shape, -1.0, 1.0)], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 6)
    });
    run("scale", vec![random(&mut rng, &shape, -1.0, 1.0)], &|g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y, 7)
    });
    run("slice_channels", vec![random(&mut rng, &shape, -1.0, 1.0)], &|g, v| {
        let y = g.slice_channels(v[0], 1, 2)?;
        project(g, y, 8)
    });
    run("bce", vec![random(&mut rng, &shape, 0.1, 0.9), random(&mut rng, &shape, 0.0, 1.0)], &|g, v| {
        g.bce(v[0], v[1])
    });
    run(
        "triplet_loss",
        vec![random(&mut rng, &[8], -1.0, 1.0), random(&mut rng, &[8], -1.0, 1.0), random(&mut rng, &[8], -1.0, 1.0)],
        &|g, v| g.triplet_loss(v[0], v[1], v[2], 5.0),
    );
    run("distance", vec![random(&mut rng, &[8], -1.0, 1.0), random(&mut rng, &[8], -1.0, 1.0)], &|g, v| {
        g.distance(v[0], v[1])
    });
    out
}

/// Finite-difference check of the full composite loss of a tiny 64-bit model
/// at `samples` parameter entries spread over every parameter tensor.
pub fn end_to_end_gradient_report(samples: usize) -> GradReport {
    let mut ds = DatasetSpec::new(2, 5);
    ds.categories = vec![Category::Chair, Category::Table];
    let pairs = generate_dataset(&ds).unwrap();
    let triplet = TripletSample::new(pairs[0].clone(), &pairs[1]).unwrap();
    let x = SampleTensors::<f64>::from_triplet(&triplet, 0).unwrap();
    let model = HourglassModel::<f64>::init(ArchitectureConfig::tiny(), Stages::default(), 9).unwrap();
    let settings = LossSettings {
        // A wide margin keeps the hinge active.
        margin: 10.0,
        weights: LossWeights::default(),
        triplet: true,
    };

    let names: Vec<(String, usize)> = model.params.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let at: Vec<(usize, usize)> = (0..samples)
        .map(|j| {
            let p = j % names.len();
            (p, rng.random_range(0..names[p].1))
        })
        .collect();
    let mut params = model.params.clone();
    let report = check_params(&mut params, &at, END_TO_END_STEP, 1e-5, |ps, grads| {
        let model = HourglassModel::from_params(ps.clone())?;
        let (l, g) = sample_loss(&model, &x, &settings, grads)?;
        Ok((l.total, g))
    });
    report.unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Named pass/fail results for the loss and schedule fixtures.
pub fn loss_unit_values() -> Vec<(String, bool)> {
    let triplet = |a: &[f64], p: &[f64], n: &[f64], m: f64| {
        let mut g = Graph::<f64>::new();
        let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        let (a, p, n) = (g.constant(t(a)), g.constant(t(p)), g.constant(t(n)));
        let l = g.triplet_loss(a, p, n, m).unwrap();
        g.value(l).data()[0]
    };
    let mut bce_g = Graph::<f64>::new();
    let half = bce_g.constant(Tensor::filled(vec![1, 1, 8, 8, 8], 0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = bce_g.constant(Tensor::new(vec![1, 1, 8, 8, 8], (0..512).map(|_| rng.random_range(0..2) as f64).collect()).unwrap());
    let bce = bce_g.bce(half, target).unwrap();
    let bce = bce_g.value(bce).data()[0];
    let cfg = TrainConfig::paper();
    vec![
        ("triplet inactive hinge".into(), close(triplet(&[0.0], &[0.3], &[0.9], 0.2), 0.0, 1e-6)),
        ("triplet coincident embeddings".into(), close(triplet(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], 0.2), 0.2, 1e-6)),
        ("triplet violated".into(), close(triplet(&[0.0, 0.0], &[0.6, 0.8], &[0.0, -0.5], 0.2), 0.7, 1e-6)),
        ("bce at one half".into(), close(bce, std::f64::consts::LN_2, 1e-6)),
        (
            "learning rate steps".into(),
            [(0, 1e-3), (20_000, 1e-4), (40_000, 1e-5)].iter().all(|&(i, lr)| close(lr_at(&cfg, i), lr, 1e-15)),
        ),
    ]
}

fn sqdist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s
}

/// A distinct object with all of its rotation copies.
struct Object {
    id: String,
    domain: Domain,
    category: String,
    copies: Vec<Vec<f32>>,
}

impl Object {
    fn dist(&self, q: &[f32]) -> f64 {
        let mut best = f64::INFINITY;
        for c in &self.copies {
            best = best.min(sqdist(q, c));
        }
        best.sqrt()
    }

    fn key(&self, q: &[f32]) -> (f64, String, u8) {
        (self.dist(q), self.id.clone(), self.domain.code())
    }
}

/// Small random world on an integer lattice, so distance ties are common.
fn random_world(rng: &mut ChaCha8Rng, scans: usize, cads: usize) -> (EmbeddingIndex, Vec<Object>) {
    let cats = ["bed", "chair", "sofa"];
    let mut objects = Vec::new();
    for (domain, n, prefix) in [(Domain::Scan, scans, "s"), (Domain::Cad, cads, "c")] {
        for i in 0..n {
            let copies = (0..rng.random_range(1..=3))
                .map(|_| (0..3).map(|_| rng.random_range(0..5) as f32).collect())
                .collect();
            objects.push(Object {
                id: format!("{prefix}{i:02}"),
                domain,
                category: cats[rng.random_range(0..cats.len())].to_string(),
                copies,
            });
        }
    }
    let mut index = EmbeddingIndex::new(3);
    for o in &objects {
        for (r, c) in o.copies.iter().enumerate() {
            index
                .push(EmbeddingVector::new(o.id.clone(), o.domain, o.category.clone(), c.clone()).with_rotation(r as u8))
                .unwrap();
        }
    }
    (index, objects)
}

/// Indices of `objects` accepted by `keep`, ordered by selection: each round
/// takes the smallest remaining (distance, id, domain).
fn select_order(objects: &[Object], q: &[f32], keep: impl Fn(&Object) -> bool) -> Vec<usize> {
    let mut left: Vec<usize> = (0..objects.len()).filter(|&i| keep(&objects[i])).collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (a, b) = (objects[left[j]].key(q), objects[left[best]].key(q));
            if a.0 < b.0 || (a.0 == b.0 && (a.1.clone(), a.2) < (b.1.clone(), b.2)) {
                best = j;
            }
        }
        order.push(left.remove(best));
    }
    order
}

fn random_task(rng: &mut ChaCha8Rng, objects: &[Object], scan: &Object) -> RetrievalTask {
    let mut cads: Vec<&Object> = objects.iter().filter(|o| o.domain == Domain::Cad).collect();
    for i in (1..cads.len()).rev() {
        cads.swap(i, rng.random_range(0..=i));
    }
    let proposed: Vec<String> = cads[..6].iter().map(|o| o.id.clone()).collect();
    let n = rng.random_range(1..=3);
    let mut sel = proposed.clone();
    for i in (1..sel.len()).rev() {
        sel.swap(i, rng.random_range(0..=i));
    }
    sel.truncate(n);
    RetrievalTask {
        record: AnnotationRecord {
            scan_id: scan.id.clone(),
            proposed,
            ranked_selection: sel,
            annotator: "oracle".into(),
            category: scan.category.clone(),
            timestamp: "2024-01-01T00:00:00Z".into(),
        },
        distractors: cads[6..].iter().map(|o| o.id.clone()).collect(),
    }
}

/// Compares every metric against a brute-force recomputation over `trials`
/// random worlds. Returns one entry per metric with the number of mismatches.
pub fn metric_oracle_trials(trials: usize, seed: u64) -> Vec<(&'static str, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = [0usize; 6];
    for _ in 0..trials {
        let (scans, cads) = (rng.random_range(3..8), rng.random_range(8..14));
        let (index, objects) = random_world(&mut rng, scans, cads);
        let q = &objects[rng.random_range(0..objects.len())];
        let qv = EmbeddingVector::new(q.id.clone(), q.domain, q.category.clone(), q.copies[0].clone());

        // knn
        let k = rng.random_range(1..=4);
        let exclude = rng.random_bool(0.5);
        let domain = [None, Some(Domain::Scan), Some(Domain::Cad)][rng.random_range(0..3)];
        let order = select_order(&objects, &q.copies[0], |o| {
            domain.is_none_or(|d| o.domain == d) && !(exclude && o.id == q.id && o.domain == q.domain)
        });
        match index.knn_in(&qv, k, exclude, domain) {
            Ok(nn) => {
                let same = order.len() >= k
                    && nn.iter().zip(&order).all(|(n, &i)| {
                        n.id == objects[i].id
                            && n.domain == objects[i].domain
                            && n.category == objects[i].category
                            && (n.distance - objects[i].dist(&q.copies[0])).abs() < 1e-12
                    });
                bad[0] += usize::from(!same);
            }
            Err(_) => bad[0] += usize::from(order.len() >= k),
        }

        // confusion, on first copies only
        let kc = rng.random_range(1..=5);
        let mut sums = [0.0, 0.0];
        let mut counts = [0.0, 0.0];
        let firsts: Vec<Object> = objects
            .iter()
            .map(|o| Object {
                id: o.id.clone(),
                domain: o.domain,
                category: o.category.clone(),
                copies: vec![o.copies[0].clone()],
            })
            .collect();
        for o in &firsts {
            let order = select_order(&firsts, &o.copies[0], |p| !(p.id == o.id && p.domain == o.domain));
            let cross = order[..kc].iter().filter(|&&i| firsts[i].domain != o.domain).count();
            sums[o.domain.code() as usize] += cross as f64 / kc as f64;
            counts[o.domain.code() as usize] += 1.0;
        }
        let expect = 0.5 * (sums[0] / counts[0] + sums[1] / counts[1]);
        bad[1] += usize::from(!close(confusion_score(&index, kc).unwrap(), expect, 1e-12));

        // per-task scores
        let scans: Vec<&Object> = objects.iter().filter(|o| o.domain == Domain::Scan).collect();
        let mut tasks = Vec::new();
        for s in &scans {
            let task = random_task(&mut rng, &objects, s);
            let cand: Vec<&String> = task.candidates().collect();
            let order = select_order(&objects, &s.copies[0], |o| o.domain == Domain::Cad && cand.contains(&&o.id));
            let top = &objects[order[0]].id;
            let r = f64::from(u8::from(task.record.ranked_selection.contains(top)));
            bad[2] += usize::from(!close(retrieval_accuracy(&task, &index, &s.copies[0]).unwrap(), r, 0.0));
            let sel = &task.record.ranked_selection;
            let mut hits = 0;
            for i in 0..sel.len() {
                if objects[order[i]].id == sel[i] {
                    hits += 1;
                }
            }
            let rq = hits as f64 / sel.len() as f64;
            bad[3] += usize::from(!close(ranking_quality(&task, &index, &s.copies[0]).unwrap(), rq, 1e-15));
            tasks.push((task, order));
        }
        let kk = rng.random_range(1..=5);
        let mut sum = 0.0;
        for (t, order) in &tasks {
            let same = order[..kk].iter().filter(|&&i| objects[i].category == t.record.category).count();
            sum += same as f64 / kk as f64;
        }
        let only: Vec<RetrievalTask> = tasks.iter().map(|(t, _)| t.clone()).collect();
        let got = category_accuracy(&only, &index, &index, kk).unwrap();
        bad[4] += usize::from(!close(got, sum / tasks.len() as f64, 1e-12));

        // aggregate
        let scores: Vec<(String, f64)> = (0..rng.random_range(1..20))
            .map(|_| (["a", "b", "c", "d"][rng.random_range(0..4)].to_string(), rng.random_range(0.0..1.0)))
            .collect();
        let agg = aggregate(&scores).unwrap();
        let mut classes: Vec<&String> = scores.iter().map(|(c, _)| c).collect();
        classes.sort();
        classes.dedup();
        let mut class_sum = 0.0;
        let mut ok = agg.per_class.len() == classes.len();
        for c in &classes {
            let mine: Vec<f64> = scores.iter().filter(|(x, _)| x == *c).map(|(_, s)| *s).collect();
            let mean = mine.iter().sum::<f64>() / mine.len() as f64;
            class_sum += mean;
            ok &= agg.per_class.get(*c).is_some_and(|s| s.count == mine.len() && close(s.mean, mean, 1e-12));
        }
        ok &= close(agg.class_avg, class_sum / classes.len() as f64, 1e-12);
        ok &= close(agg.inst_avg, scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64, 1e-12);
        bad[5] += usize::from(!ok);
    }
    ["knn", "confusion", "retrieval_accuracy", "ranking_quality", "category_accuracy", "aggregate"]
        .into_iter()
        .zip(bad)
        .collect()
}

/// Scans near the origin, CAD models far away.
pub fn segregated_fixture() -> EmbeddingIndex {
    let mut index = EmbeddingIndex::new(2);
    for i in 0..6 {
        let x = i as f32 * 0.1;
        index.push(EmbeddingVector::new(format!("s{i}"), Domain::Scan, "x", vec![x, 0.0])).unwrap();
        index.push(EmbeddingVector::new(format!("c{i}"), Domain::Cad, "x", vec![100.0 + x, 0.0])).unwrap();
    }
    index
}

/// Eight points on a circle labelled S S C C S S C C; every point's two
/// nearest are one of each domain.
pub fn balanced_fixture() -> EmbeddingIndex {
    let mut index = EmbeddingIndex::new(2);
    for i in 0..8 {
        let a = i as f64 * std::f64::consts::TAU / 8.0;
        let domain = if i % 4 < 2 { Domain::Scan } else { Domain::Cad };
        let v = vec![a.cos() as f32, a.sin() as f32];
        index.push(EmbeddingVector::new(format!("p{i}"), domain, "x", v)).unwrap();
    }
    index
}
