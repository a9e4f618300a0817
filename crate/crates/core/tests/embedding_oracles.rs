use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scancad::embedspace::{confusion_score, propose_candidates, Domain, EmbeddingIndex, EmbeddingVector};

fn random_index(rng: &mut ChaCha8Rng, per_domain: usize, dim: usize) -> EmbeddingIndex {
    let mut index = EmbeddingIndex::new(dim);
    for domain in [Domain::Scan, Domain::Cad] {
        for i in 0..per_domain {
            let v = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            index.push(EmbeddingVector::new(format!("{domain}{i:03}"), domain, "x", v)).unwrap();
        }
    }
    index
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn knn_matches_a_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let index = random_index(&mut rng, 100, 8);
    for q in index.vectors().iter().step_by(17) {
        let mut all: Vec<(f64, &str, Domain)> = index
            .vectors()
            .iter()
            .filter(|v| !(v.id == q.id && v.domain == q.domain))
            .map(|v| (dist(&q.values, &v.values), v.id.as_str(), v.domain))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let nn = index.knn(q, 10, true).unwrap();
        let got: Vec<(&str, Domain)> = nn.iter().map(|n| (n.id.as_str(), n.domain)).collect();
        let want: Vec<(&str, Domain)> = all[..10].iter().map(|a| (a.1, a.2)).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn confusion_matches_direct_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let index = random_index(&mut rng, 40, 4);
    let k = 5;
    let v = index.vectors();
    let mut per_domain = [(0.0, 0.0); 2];
    for a in v {
        let mut d: Vec<(f64, usize)> = v
            .iter()
            .enumerate()
            .filter(|(_, b)| b.id != a.id)
            .map(|(j, b)| (dist(&a.values, &b.values), j))
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let cross = d[..k].iter().filter(|(_, j)| v[*j].domain != a.domain).count();
        let slot = &mut per_domain[usize::from(a.domain == Domain::Cad)];
        slot.0 += cross as f64;
        slot.1 += k as f64;
    }
    let want = 0.5 * (per_domain[0].0 / per_domain[0].1 + per_domain[1].0 / per_domain[1].1);
    assert!((confusion_score(&index, k).unwrap() - want).abs() < 1e-9);
}

#[test]
fn anti_segregated_arrangement_scores_one() {
    // Alternating domains along a line with unit spacing.
    let mut index = EmbeddingIndex::new(1);
    for i in 0..10 {
        let domain = if i % 2 == 0 { Domain::Scan } else { Domain::Cad };
        index.push(EmbeddingVector::new(format!("p{i}"), domain, "x", vec![i as f32 * 10.0])).unwrap();
    }
    assert_eq!(confusion_score(&index, 1).unwrap(), 1.0);
}

#[test]
fn proposals_sample_the_pool_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut index = EmbeddingIndex::new(3);
    for i in 0..60 {
        let v = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        index.push(EmbeddingVector::new(format!("c{i:02}"), Domain::Cad, "x", v)).unwrap();
    }
    let anchor = index.get("c07", Domain::Cad).unwrap().clone();
    let pool: Vec<String> = index.knn(&anchor, 30, false).unwrap().into_iter().map(|n| n.id).collect();
    assert_eq!(pool[0], "c07");
    let mut counts = std::collections::HashMap::new();
    for seed in 0..1000 {
        let p = propose_candidates(&index, "c07", seed).unwrap();
        assert_eq!(p, propose_candidates(&index, "c07", seed).unwrap());
        for id in p {
            assert!(pool.contains(&id));
            *counts.entry(id).or_insert(0usize) += 1;
        }
    }
    let mut chi2 = 0.0;
    let mut worst = 0.0f64;
    for id in &pool {
        let c = counts.get(id).copied().unwrap_or(0) as f64;
        chi2 += (c - 200.0).powi(2) / 200.0;
        worst = worst.max((c / 1000.0 - 0.2).abs());
    }
    // 29 degrees of freedom: the 0.999 quantile is 58.3. Four standard
    // deviations of a single frequency are 0.051.
    assert!(chi2 < 58.3, "chi2 {chi2}");
    assert!(worst < 0.051, "worst deviation {worst}");
}

#[test]
fn proposals_need_thirty_models() {
    let mut index = EmbeddingIndex::new(1);
    for i in 0..29 {
        index.push(EmbeddingVector::new(format!("c{i}"), Domain::Cad, "x", vec![i as f32])).unwrap();
    }
    assert!(propose_candidates(&index, "c0", 0).is_err());
}

/// Integer lattice points keep every isometry below exact in f32.
fn lattice() -> impl Strategy<Value = Vec<(bool, [i32; 3])>> {
    proptest::collection::vec((any::<bool>(), [-20i32..20, -20i32..20, -20i32..20]), 6..24)
}

fn build(points: &[(bool, [i32; 3])], map: impl Fn([i32; 3]) -> [i32; 3]) -> EmbeddingIndex {
    let mut index = EmbeddingIndex::new(3);
    for (i, (scan, p)) in points.iter().enumerate() {
        let domain = if *scan { Domain::Scan } else { Domain::Cad };
        let q = map(*p);
        index
            .push(EmbeddingVector::new(format!("o{i:02}"), domain, "x", q.iter().map(|&c| c as f32).collect()))
            .unwrap();
    }
    index
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn confusion_is_invariant_under_isometries(
        points in lattice(),
        shift in [-50i32..50, -50i32..50, -50i32..50],
        perm in 0usize..6,
        flip in 0u8..8,
        k in 1usize..4,
    ) {
        let both = points.iter().any(|p| p.0) && points.iter().any(|p| !p.0);
        prop_assume!(both);
        let order = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
        let iso = |p: [i32; 3]| {
            let mut q = [0; 3];
            for a in 0..3 {
                let s = if flip >> a & 1 == 1 { -1 } else { 1 };
                q[a] = s * p[order[a]] + shift[a];
            }
            q
        };
        let a = confusion_score(&build(&points, |p| p), k).unwrap();
        let b = confusion_score(&build(&points, iso), k).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn far_additions_leave_knn_unchanged(points in lattice(), k in 1usize..5, extra in 1usize..6) {
        prop_assume!(points.len() > k);
        let index = build(&points, |p| p);
        let q = index.vectors()[0].clone();
        let before = index.knn(&q, k, true).unwrap();
        let reach = before.last().unwrap().distance;
        let mut grown = index.clone();
        for i in 0..extra {
            let x = q.values[0] + reach as f32 + 1.0 + i as f32;
            let v = vec![x, q.values[1], q.values[2]];
            grown.push(EmbeddingVector::new(format!("far{i}"), Domain::Cad, "x", v)).unwrap();
        }
        prop_assert_eq!(grown.knn(&q, k, true).unwrap(), before);
    }
}
