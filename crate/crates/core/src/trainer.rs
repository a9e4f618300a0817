//! End-to-end training of the stacked hourglass and of the proposal
//! autoencoder.
//!
//! Each sample of a batch gets its own graph; per-sample gradients are summed
//! in batch order and averaged before a single Adam update, so a run is
//! bit-reproducible from its seed regardless of the worker count.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, write_checkpoint_file, AdamState, Checkpoint, Graph, Real, Tensor};
use crate::datagen::PairedSample;
use crate::nets::{grid_tensor, HourglassModel, ProposalAutoencoder};
use crate::voxel::{rotate_up_axis, OccupancyGrid, ROTATION_STEPS};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.scck";

// Stream tags keeping the random draws of different purposes apart.
const NEGATIVE_STREAM: u64 = 1 << 40;
const ORDER_STREAM: u64 = 2 << 40;
const ROTATION_STREAM: u64 = 3 << 40;

fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag | index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub cmp: f64,
    pub trip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            cmp: 1.0,
            trip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Tiny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub max_iterations: u64,
    pub margin: f64,
    pub rotation_augment: bool,
    pub seed: u64,
    pub weights: LossWeights,
    /// When false the embedding is trained on positive pairs only: the loss
    /// is the distance between scan and positive CAD embeddings.
    pub triplet: bool,
    pub checkpoint_every: Option<u64>,
}

impl TrainConfig {
    /// Batch 128, lr 0.001 decayed by 10 every 20k iterations, 100k
    /// iterations, margin 0.2.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            lr0: 1e-3,
            decay_factor: 10.0,
            decay_every: 20_000,
            max_iterations: 100_000,
            margin: 0.2,
            rotation_augment: false,
            seed: 0,
            weights: LossWeights::default(),
            triplet: true,
            checkpoint_every: None,
        }
    }

    /// The full-size schedule at fixture scale: batch 8, 2000 iterations.
    pub fn tiny() -> Self {
        TrainConfig {
            batch_size: 8,
            max_iterations: 2_000,
            ..Self::paper()
        }
    }

    /// Preset with optional rotation augmentation, which lowers the margin to
    /// 0.1 and lengthens training (160k iterations, or 3000 at tiny scale).
    pub fn preset(preset: Preset, rotations: bool) -> Self {
        let mut cfg = match preset {
            Preset::Paper => Self::paper(),
            Preset::Tiny => Self::tiny(),
        };
        if rotations {
            cfg.rotation_augment = true;
            cfg.margin = 0.1;
            cfg.max_iterations = match preset {
                Preset::Paper => 160_000,
                Preset::Tiny => 3_000,
            };
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be positive");
        }
        if !(self.decay_factor > 0.0) || self.decay_every == 0 {
            return bad("decay_factor and decay_every must be positive");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint interval must be positive");
        }
        Ok(())
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            margin: self.margin,
            weights: self.weights,
            triplet: self.triplet,
        }
    }
}

/// `lr0 / decay_factor^⌊iteration / decay_every⌋`
pub fn lr_at(cfg: &TrainConfig, iteration: u64) -> f64 {
    let k = iteration / cfg.decay_every;
    cfg.lr0 / cfg.decay_factor.powf(k as f64)
}

/// For every pair, the index of another pair of a different category whose
/// CAD model serves as the negative. Deterministic in `(seed, epoch)`.
pub fn resample_negatives(dataset: &[PairedSample], seed: u64, epoch: u64) -> Result<Vec<usize>> {
    let mut rng = stream_rng(seed, NEGATIVE_STREAM, epoch);
    dataset
        .iter()
        .map(|p| {
            let pool: Vec<usize> = dataset
                .iter()
                .enumerate()
                .filter(|(_, q)| q.category != p.category)
                .map(|(j, _)| j)
                .collect();
            if pool.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no negative for `{}`: the dataset has a single category",
                    p.id
                )));
            }
            Ok(pool[rng.random_range(0..pool.len())])
        })
        .collect()
}

/// A training unit: a scan pair plus a CAD model of another category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSample {
    pub pair: PairedSample,
    pub negative_cad: OccupancyGrid,
    pub negative_category: String,
}

impl TripletSample {
    pub fn new(pair: PairedSample, negative: &PairedSample) -> Result<Self> {
        if negative.category == pair.category {
            return Err(Error::sample(
                &pair.id,
                format!("negative `{}` shares category `{}`", negative.id, pair.category),
            ));
        }
        Ok(TripletSample {
            pair,
            negative_cad: negative.cad.clone(),
            negative_category: negative.category.clone(),
        })
    }
}

/// Network inputs and targets of one triplet.
#[derive(Debug, Clone)]
pub struct SampleTensors<T> {
    pub scan: Tensor<T>,
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
    pub positive: Tensor<T>,
    pub negative: Tensor<T>,
}

impl<T: Real> SampleTensors<T> {
    /// Tensors of `t`, all rotated by the same `rotation` step.
    pub fn from_triplet(t: &TripletSample, rotation: u8) -> Result<Self> {
        let r = |g: &OccupancyGrid| -> Result<Tensor<T>> { Ok(grid_tensor(&rotate_up_axis(g, rotation)?)) };
        Ok(SampleTensors {
            scan: r(&t.pair.scan)?,
            fg: r(&t.pair.gt_fg)?,
            bg: r(&t.pair.gt_bg)?,
            positive: r(&t.pair.cad)?,
            negative: r(&t.negative_cad)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub margin: f64,
    pub weights: LossWeights,
    pub triplet: bool,
}

/// Loss components of one sample or the mean over a batch. A bypassed stage
/// contributes zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_seg: f64,
    pub l_cmp: f64,
    pub l_trip: f64,
    pub total: f64,
}

impl StepLosses {
    fn check(&self, iteration: u64) -> Result<()> {
        for (component, v) in [
            ("segmentation", self.l_seg),
            ("completion", self.l_cmp),
            ("triplet", self.l_trip),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { component, iteration });
            }
        }
        Ok(())
    }
}

/// Composite loss `w_seg·L_seg + w_cmp·L_cmp + w_trip·L_trip` of one sample
/// and, on request, its gradient for every parameter in table order.
pub fn sample_loss<T: Real>(
    model: &HourglassModel<T>,
    x: &SampleTensors<T>,
    settings: &LossSettings,
    with_grads: bool,
) -> Result<(StepLosses, Option<Vec<Vec<T>>>)> {
    let mut g = Graph::new();
    let p = if with_grads {
        model.params.bind(&mut g)
    } else {
        model.params.bind_frozen(&mut g)
    };
    let scan = g.constant(x.scan.clone());
    let pass = model.scan_pass(&mut g, &p, scan)?;
    let pos = g.constant(x.positive.clone());
    let gp = model.cad_pass(&mut g, &p, pos)?;

    let mut terms = Vec::new();
    let mut losses = StepLosses::default();
    if let (Some(fg), Some(bg)) = (pass.fg, pass.bg) {
        let tf = g.constant(x.fg.clone());
        let tb = g.constant(x.bg.clone());
        let a = g.bce(fg, tf)?;
        let b = g.bce(bg, tb)?;
        let l = g.add(a, b)?;
        losses.l_seg = g.value(l).data()[0].as_f64();
        terms.push(g.scale(l, T::of(settings.weights.seg)));
    }
    if let Some(cmp) = pass.cmp {
        let t = g.constant(x.positive.clone());
        let l = g.bce(cmp, t)?;
        losses.l_cmp = g.value(l).data()[0].as_f64();
        terms.push(g.scale(l, T::of(settings.weights.cmp)));
    }
    let l = if settings.triplet {
        let neg = g.constant(x.negative.clone());
        let gn = model.cad_pass(&mut g, &p, neg)?;
        g.triplet_loss(pass.embedding, gp, gn, T::of(settings.margin))?
    } else {
        g.distance(pass.embedding, gp)?
    };
    losses.l_trip = g.value(l).data()[0].as_f64();
    terms.push(g.scale(l, T::of(settings.weights.trip)));

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    losses.total = g.value(total).data()[0].as_f64();
    let grads = if with_grads {
        let gr = g.backward(total)?;
        Some(p.grads(&gr))
    } else {
        None
    };
    Ok((losses, grads))
}

/// Rotation step for sample `slot` of the batch at `iteration`.
fn rotation_for(cfg: &TrainConfig, iteration: u64, slot: usize) -> u8 {
    if !cfg.rotation_augment {
        return 0;
    }
    let mut rng = stream_rng(cfg.seed, ROTATION_STREAM, iteration);
    let mut step = 0;
    for _ in 0..=slot {
        step = rng.random_range(0..ROTATION_STEPS);
    }
    step
}

/// Mean over per-sample results, summed in order.
fn reduce<T: Real>(results: Vec<(StepLosses, Vec<Vec<T>>)>) -> (StepLosses, Vec<Vec<T>>) {
    let n = results.len() as f64;
    let mut iter = results.into_iter();
    let (mut acc, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        acc.l_seg += l.l_seg;
        acc.l_cmp += l.l_cmp;
        acc.l_trip += l.l_trip;
        acc.total += l.total;
        for (a, b) in grads.iter_mut().zip(&g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
    let inv = T::of(1.0 / n);
    for g in &mut grads {
        for v in g.iter_mut() {
            *v = *v * inv;
        }
    }
    let mean = StepLosses {
        l_seg: acc.l_seg / n,
        l_cmp: acc.l_cmp / n,
        l_trip: acc.l_trip / n,
        total: acc.total / n,
    };
    (mean, grads)
}

/// One optimization step on `batch`: forward and backward per sample, batch
/// mean, Adam update at `lr_at(cfg, iteration)`. Returns the mean losses
/// before the update.
pub fn train_step(
    model: &mut HourglassModel<f32>,
    adam: &mut AdamState<f32>,
    batch: &[TripletSample],
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let settings = cfg.loss_settings();
    let shared: &HourglassModel<f32> = model;
    let results = batch
        .par_iter()
        .enumerate()
        .map(|(slot, t)| {
            let x = SampleTensors::from_triplet(t, rotation_for(cfg, iteration, slot))?;
            let (l, g) = sample_loss(shared, &x, &settings, true)?;
            l.check(iteration)?;
            Ok((l, g.expect("gradients requested")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (losses, grads) = reduce(results);
    losses.check(iteration)?;
    adam_step(&mut model.params, &grads, adam, lr_at(cfg, iteration))?;
    Ok(losses)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub lr: f64,
    pub l_seg: f64,
    pub l_cmp: f64,
    pub l_trip: f64,
    pub total: f64,
}

/// Resumable training state over a fixed dataset.
pub struct Trainer {
    pub model: HourglassModel<f32>,
    pub adam: AdamState<f32>,
    /// Completed steps.
    pub iteration: u64,
    cfg: TrainConfig,
    dataset: Vec<PairedSample>,
    epoch_cache: Option<(u64, Vec<usize>, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: HourglassModel<f32>, dataset: Vec<PairedSample>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        for p in &dataset {
            p.validate()?;
        }
        // Fails early on single-category data.
        resample_negatives(&dataset, cfg.seed, 0)?;
        let adam = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            adam,
            iteration: 0,
            cfg,
            dataset,
            epoch_cache: None,
        })
    }

    /// Continues from a checkpoint's parameters, optimizer state and
    /// iteration counter.
    pub fn resume(ckpt: Checkpoint, dataset: Vec<PairedSample>, cfg: TrainConfig) -> Result<Self> {
        let iteration = ckpt.iteration;
        let model = HourglassModel::from_params(ckpt.params)?;
        let mut t = Trainer::new(model, dataset, cfg)?;
        t.adam = ckpt.adam;
        t.iteration = iteration;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset.len().div_ceil(self.cfg.batch_size) as u64
    }

    fn epoch_plan(&mut self, epoch: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if let Some((e, order, neg)) = &self.epoch_cache {
            if *e == epoch {
                return Ok((order.clone(), neg.clone()));
            }
        }
        let negatives = resample_negatives(&self.dataset, self.cfg.seed, epoch)?;
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, ORDER_STREAM, epoch));
        self.epoch_cache = Some((epoch, order.clone(), negatives.clone()));
        Ok((order, negatives))
    }

    /// Triplets of the batch at `iteration`: a per-epoch shuffle of the pairs,
    /// the last short batch padded by wrapping around.
    pub fn batch_at(&mut self, iteration: u64) -> Result<Vec<TripletSample>> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (iteration / spe, (iteration % spe) as usize);
        let (order, negatives) = self.epoch_plan(epoch)?;
        let n = self.dataset.len();
        let b = self.cfg.batch_size;
        (0..b)
            .map(|j| {
                let i = order[(pos * b + j) % n];
                TripletSample::new(self.dataset[i].clone(), &self.dataset[negatives[i]])
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<MetricsRecord> {
        let it = self.iteration;
        let batch = self.batch_at(it)?;
        let lr = lr_at(&self.cfg, it);
        let l = train_step(&mut self.model, &mut self.adam, &batch, &self.cfg, it)?;
        self.iteration += 1;
        Ok(MetricsRecord {
            iteration: it,
            lr,
            l_seg: l.l_seg,
            l_cmp: l.l_cmp,
            l_trip: l.l_trip,
            total: l.total,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Steps until `max_iterations`, handing each record to `sink` and
    /// writing periodic checkpoints to `out_dir` when given.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.cfg.max_iterations {
            let rec = self.step()?;
            sink(&rec)?;
            if let (Some(dir), Some(every)) = (out_dir, self.cfg.checkpoint_every) {
                if self.iteration % every == 0 && self.iteration < self.cfg.max_iterations {
                    write_checkpoint_file(checkpoint_path(dir, self.iteration), &self.checkpoint())?;
                }
            }
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.scck"))
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains `model` on `dataset`. With `out_dir`, appends one JSON object per
/// step to `metrics.jsonl`, writes `ckpt_{iteration}.scck` at the configured
/// interval, and the final state to `checkpoint.scck`.
pub fn train(
    model: HourglassModel<f32>,
    dataset: Vec<PairedSample>,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model, dataset, cfg)?;
    run_to_end(&mut trainer, out_dir)
}

pub fn run_to_end(trainer: &mut Trainer, out_dir: Option<&Path>) -> Result<TrainReport> {
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    trainer.run(out_dir, |rec| {
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        metrics.push(*rec);
        Ok(())
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        write_checkpoint_file(dir.join(FINAL_CHECKPOINT), &checkpoint)?;
    }
    Ok(TrainReport { checkpoint, metrics })
}

/// Reconstruction loss of the proposal autoencoder on one grid.
pub fn autoencoder_loss<T: Real>(
    ae: &ProposalAutoencoder<T>,
    cad: &Tensor<T>,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Vec<T>>>)> {
    let mut g = Graph::new();
    let p = if with_grads {
        ae.params.bind(&mut g)
    } else {
        ae.params.bind_frozen(&mut g)
    };
    let x = g.constant(cad.clone());
    let (_, recon) = ae.pass(&mut g, &p, x)?;
    let l = g.bce(recon, x)?;
    let value = g.value(l).data()[0].as_f64();
    let grads = if with_grads {
        Some(p.grads(&g.backward(l)?))
    } else {
        None
    };
    Ok((value, grads))
}

/// Trains the proposal autoencoder with the same schedule, batching and
/// optional rotation augmentation as the main model. Returns per-step mean
/// reconstruction losses.
pub fn train_autoencoder(
    ae: &mut ProposalAutoencoder<f32>,
    cads: &[OccupancyGrid],
    cfg: &TrainConfig,
) -> Result<(AdamState<f32>, Vec<f64>)> {
    cfg.validate()?;
    if cads.is_empty() {
        return Err(Error::InvalidArgument("no CAD grids to train on".into()));
    }
    let mut adam = AdamState::new(&ae.params);
    let spe = cads.len().div_ceil(cfg.batch_size) as u64;
    let mut losses = Vec::with_capacity(cfg.max_iterations as usize);
    let mut order: Vec<usize> = Vec::new();
    for it in 0..cfg.max_iterations {
        let (epoch, pos) = (it / spe, (it % spe) as usize);
        if pos == 0 || order.is_empty() {
            order = (0..cads.len()).collect();
            order.shuffle(&mut stream_rng(cfg.seed, ORDER_STREAM, epoch));
        }
        let shared: &ProposalAutoencoder<f32> = ae;
        let results = (0..cfg.batch_size)
            .into_par_iter()
            .map(|j| {
                let grid = &cads[order[(pos * cfg.batch_size + j) % cads.len()]];
                let x = grid_tensor(&rotate_up_axis(grid, rotation_for(cfg, it, j))?);
                let (l, g) = autoencoder_loss(shared, &x, true)?;
                let l = StepLosses {
                    total: l,
                    ..Default::default()
                };
                l.check(it)?;
                Ok((l, g.expect("gradients requested")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, grads) = reduce(results);
        adam_step(&mut ae.params, &grads, &mut adam, lr_at(cfg, it))?;
        losses.push(mean.total);
    }
    Ok((adam, losses))
}
