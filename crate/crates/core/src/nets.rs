//! The stacked hourglass: segmentation hourglass, completion hourglass, the
//! final scan encoder, the CAD encoder, and the proposal autoencoder.
//!
//! Every encoder has the same layout: an initial 3³ convolution to `w`
//! channels, four residual blocks that halve the spatial extent and double
//! the channels, and a final convolution collapsing the 2³ volume to a
//! `latent × 1³` feature. Decoders mirror their encoder layer for layer with
//! transposed convolutions, so a decoder's weight shapes are exactly those of
//! the encoder it mirrors, and end in a single-channel sigmoid.
//!
//! Parameter names are dotted and stable, e.g.
//! `seg.encoder.block2.conv1.weight` or `cmp.decoder.out.bias`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BoundParams, Graph, ParamSet, Real, Tensor, Var};
use crate::voxel::OccupancyGrid;
use crate::{Error, Result};

pub const SEG_ENCODER: &str = "seg.encoder";
pub const FG_DECODER: &str = "seg.fg_decoder";
pub const BG_DECODER: &str = "seg.bg_decoder";
pub const CMP_ENCODER: &str = "cmp.encoder";
pub const CMP_DECODER: &str = "cmp.decoder";
pub const SCAN_ENCODER: &str = "scan_encoder";
pub const CAD_ENCODER: &str = "cad_encoder";
pub const AE_ENCODER: &str = "ae.encoder";
pub const AE_DECODER: &str = "ae.decoder";

/// Kernel, stride and padding of each layer kind.
/// Floor on [`ArchitectureConfig::half_width`].
pub const MIN_HALF_WIDTH: usize = 2;

const INIT_CONV: (usize, usize, usize) = (3, 1, 1);
const DOWN_CONV: (usize, usize, usize) = (4, 2, 1);
const SAME_CONV: (usize, usize, usize) = (3, 1, 1);
const PROJ_CONV: (usize, usize, usize) = (2, 2, 0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub base_channels: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub residual_blocks: usize,
    pub grid_dim: usize,
}

impl ArchitectureConfig {
    /// Full scale: 8 base channels, 512-d segmentation latent, 256-d embedding.
    pub const fn full() -> Self {
        ArchitectureConfig {
            base_channels: 8,
            latent_dim: 512,
            embed_dim: 256,
            residual_blocks: 4,
            grid_dim: 32,
        }
    }

    /// Test scale with the same topology.
    pub const fn tiny() -> Self {
        ArchitectureConfig {
            base_channels: 2,
            latent_dim: 64,
            embed_dim: 32,
            residual_blocks: 4,
            grid_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return bad(format!("base_channels {} must be even and ≥ 2", self.base_channels));
        }
        if self.latent_dim < 2 || self.latent_dim % 2 != 0 {
            return bad(format!("latent_dim {} must be even", self.latent_dim));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        let scale = 1usize << self.residual_blocks;
        if self.grid_dim % scale != 0 || self.grid_dim / scale == 0 {
            return bad(format!(
                "grid_dim {} not divisible by 2^{}",
                self.grid_dim, self.residual_blocks
            ));
        }
        Ok(())
    }

    /// Spatial extent after the residual blocks, which the final convolution
    /// collapses to 1³.
    pub fn bottleneck_extent(&self) -> usize {
        self.grid_dim >> self.residual_blocks
    }

    /// Width of the decoders, the completion hourglass and both embedding
    /// encoders: half the segmentation encoder's, but never a single channel.
    pub fn half_width(&self) -> usize {
        (self.base_channels / 2).max(MIN_HALF_WIDTH)
    }

    /// Smallest base width whose half width is `half`.
    fn base_for_half(half: usize) -> usize {
        if half <= MIN_HALF_WIDTH {
            2
        } else {
            half * 2
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![1, 1, self.grid_dim, self.grid_dim, self.grid_dim]
    }
}

/// Which proxy stages sit between the scan and the final encoder. Disabling
/// one bypasses it: its input feeds the next stage directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub segmentation: bool,
    pub completion: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            segmentation: true,
            completion: true,
        }
    }
}

fn param_init<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    weight_shape: [usize; 5],
    fan_in: f64,
    bias_len: usize,
) -> Result<()> {
    let bound = (6.0 / fan_in).sqrt();
    let n: usize = weight_shape.iter().product();
    let w: Vec<T> = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    params.insert(format!("{name}.weight"), Tensor::new(weight_shape.to_vec(), w)?)?;
    let bb = 1.0 / fan_in.sqrt();
    let b: Vec<T> = (0..bias_len).map(|_| T::of(rng.random_range(-bb..bb))).collect();
    params.insert(format!("{name}.bias"), Tensor::new(vec![bias_len], b)?)?;
    Ok(())
}

fn conv_param<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    (k, _, _): (usize, usize, usize),
) -> Result<()> {
    param_init(params, rng, name, [cout, cin, k, k, k], (cin * k.pow(3)) as f64, cout)
}

fn conv_t_param<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    (k, s, _): (usize, usize, usize),
) -> Result<()> {
    // Each output cell receives about cin·(k/s)³ contributions.
    let fan_in = (cin * k.pow(3)) as f64 / (s.pow(3)) as f64;
    param_init(params, rng, name, [cin, cout, k, k, k], fan_in.max(1.0), cout)
}

/// Channel count after each residual block of an encoder of width `w`.
fn channel_schedule(width: usize, blocks: usize) -> Vec<usize> {
    (0..=blocks).map(|i| width << i).collect()
}

fn add_encoder<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    width: usize,
    latent: usize,
    cfg: &ArchitectureConfig,
) -> Result<()> {
    let ch = channel_schedule(width, cfg.residual_blocks);
    conv_param(params, rng, &format!("{prefix}.init"), 1, ch[0], INIT_CONV)?;
    for i in 1..=cfg.residual_blocks {
        let b = format!("{prefix}.block{i}");
        conv_param(params, rng, &format!("{b}.conv1"), ch[i - 1], ch[i], DOWN_CONV)?;
        conv_param(params, rng, &format!("{b}.conv2"), ch[i], ch[i], SAME_CONV)?;
        conv_param(params, rng, &format!("{b}.proj"), ch[i - 1], ch[i], PROJ_CONV)?;
    }
    let k = cfg.bottleneck_extent();
    conv_param(params, rng, &format!("{prefix}.final"), ch[cfg.residual_blocks], latent, (k, 1, 0))
}

fn add_decoder<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    width: usize,
    latent: usize,
    cfg: &ArchitectureConfig,
) -> Result<()> {
    let ch = channel_schedule(width, cfg.residual_blocks);
    let n = cfg.residual_blocks;
    let k = cfg.bottleneck_extent();
    conv_t_param(params, rng, &format!("{prefix}.init"), latent, ch[n], (k, 1, 0))?;
    // Decoder block j mirrors encoder block n + 1 - j.
    for j in 1..=n {
        let i = n + 1 - j;
        let b = format!("{prefix}.block{j}");
        conv_t_param(params, rng, &format!("{b}.conv2"), ch[i], ch[i], SAME_CONV)?;
        conv_t_param(params, rng, &format!("{b}.conv1"), ch[i], ch[i - 1], DOWN_CONV)?;
        conv_t_param(params, rng, &format!("{b}.proj"), ch[i], ch[i - 1], PROJ_CONV)?;
    }
    conv_t_param(params, rng, &format!("{prefix}.out"), ch[0], 1, INIT_CONV)
}

fn conv<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    name: &str,
    x: Var,
    (_, s, pad): (usize, usize, usize),
) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    g.conv3d(x, w, b, s, pad)
}

fn conv_t<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    name: &str,
    x: Var,
    (_, s, pad): (usize, usize, usize),
) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    g.conv3d_transposed(x, w, b, s, pad)
}

/// `relu(conv2(relu(conv1(x))) + proj(x))`, downsampling by two.
fn residual_down<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.conv1"), x, DOWN_CONV)?;
    let h = g.relu(h);
    let h = conv(g, p, &format!("{name}.conv2"), h, SAME_CONV)?;
    let skip = conv(g, p, &format!("{name}.proj"), x, PROJ_CONV)?;
    let sum = g.add(h, skip)?;
    Ok(g.relu(sum))
}

/// Transposed mirror of [`residual_down`], upsampling by two. The layers run
/// in reverse order so each weight has its encoder twin's shape. The last
/// block of a decoder feeds the output convolution unrectified so a narrow
/// full-resolution layer cannot die.
fn residual_up<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, x: Var, last: bool) -> Result<Var> {
    let h = conv_t(g, p, &format!("{name}.conv2"), x, SAME_CONV)?;
    let h = g.relu(h);
    let h = conv_t(g, p, &format!("{name}.conv1"), h, DOWN_CONV)?;
    let skip = conv_t(g, p, &format!("{name}.proj"), x, PROJ_CONV)?;
    let sum = g.add(h, skip)?;
    Ok(if last { sum } else { g.relu(sum) })
}

/// Volume `[1, 1, n, n, n]` to latent `[1, L, 1, 1, 1]` (no output activation).
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    prefix: &str,
    cfg: &ArchitectureConfig,
    x: Var,
) -> Result<Var> {
    let h = conv(g, p, &format!("{prefix}.init"), x, INIT_CONV)?;
    let mut h = g.relu(h);
    for i in 1..=cfg.residual_blocks {
        h = residual_down(g, p, &format!("{prefix}.block{i}"), h)?;
    }
    conv(g, p, &format!("{prefix}.final"), h, (cfg.bottleneck_extent(), 1, 0))
}

/// Latent `[1, L, 1, 1, 1]` to an occupancy probability volume.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    prefix: &str,
    cfg: &ArchitectureConfig,
    z: Var,
) -> Result<Var> {
    let h = conv_t(g, p, &format!("{prefix}.init"), z, (cfg.bottleneck_extent(), 1, 0))?;
    let mut h = g.relu(h);
    for j in 1..=cfg.residual_blocks {
        h = residual_up(g, p, &format!("{prefix}.block{j}"), h, j == cfg.residual_blocks)?;
    }
    let logits = conv_t(g, p, &format!("{prefix}.out"), h, INIT_CONV)?;
    Ok(g.sigmoid(logits))
}

/// Graph nodes of one scan pass through the stacked hourglass.
#[derive(Debug, Clone, Copy)]
pub struct ScanPass {
    pub fg: Option<Var>,
    pub bg: Option<Var>,
    pub seg_latent: Option<Var>,
    pub cmp: Option<Var>,
    pub cmp_latent: Option<Var>,
    pub embedding: Var,
}

#[derive(Debug, Clone)]
pub struct Segmentation<T> {
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
    pub latent: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Completion<T> {
    pub cmp: Tensor<T>,
    pub latent: Tensor<T>,
}

/// Scan embedding plus the intermediate probability volumes that produced it.
#[derive(Debug, Clone)]
pub struct ScanEmbedding<T> {
    pub embedding: Vec<T>,
    pub fg: Option<Tensor<T>>,
    pub bg: Option<Tensor<T>>,
    pub cmp: Option<Tensor<T>>,
}

/// Occupancy grid as a `[1, 1, x, y, z]` tensor.
pub fn grid_tensor<T: Real>(grid: &OccupancyGrid) -> Tensor<T> {
    Tensor::volume(grid.dims().as_array(), grid.to_reals()).expect("grid cells match dims")
}

fn check_input<T: Real>(cfg: &ArchitectureConfig, t: &Tensor<T>, what: &str) -> Result<()> {
    if t.shape() != cfg.input_shape() {
        return Err(Error::Shape(format!(
            "{what}: expected {:?}, got {:?}",
            cfg.input_shape(),
            t.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourglassModel<T = f32> {
    pub config: ArchitectureConfig,
    pub stages: Stages,
    pub params: ParamSet<T>,
}

impl<T: Real> HourglassModel<T> {
    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    pub fn init(config: ArchitectureConfig, stages: Stages, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (w, half) = (config.base_channels, config.half_width());
        let (l, l2, e) = (config.latent_dim, config.latent_dim / 2, config.embed_dim);
        if stages.segmentation {
            add_encoder(&mut params, &mut rng, SEG_ENCODER, w, l, &config)?;
            add_decoder(&mut params, &mut rng, FG_DECODER, half, l2, &config)?;
            add_decoder(&mut params, &mut rng, BG_DECODER, half, l2, &config)?;
        }
        if stages.completion {
            add_encoder(&mut params, &mut rng, CMP_ENCODER, half, l2, &config)?;
            add_decoder(&mut params, &mut rng, CMP_DECODER, half, l2, &config)?;
        }
        add_encoder(&mut params, &mut rng, SCAN_ENCODER, half, e, &config)?;
        add_encoder(&mut params, &mut rng, CAD_ENCODER, half, e, &config)?;
        Ok(HourglassModel {
            config,
            stages,
            params,
        })
    }

    /// Rebuilds a model from named parameters, e.g. a loaded checkpoint.
    /// The architecture and enabled stages are read off the parameter table.
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
        };
        let stages = Stages {
            segmentation: params.contains(&format!("{SEG_ENCODER}.init.weight")),
            completion: params.contains(&format!("{CMP_ENCODER}.init.weight")),
        };
        let cad_init = shape(&format!("{CAD_ENCODER}.init.weight"))?;
        let cad_final = shape(&format!("{CAD_ENCODER}.final.weight"))?;
        let residual_blocks = params
            .names()
            .filter(|n| n.starts_with(&format!("{CAD_ENCODER}.block")) && n.ends_with(".conv1.weight"))
            .count();
        let half = cad_init[0];
        let embed_dim = cad_final[0];
        let latent_dim = if stages.segmentation {
            shape(&format!("{SEG_ENCODER}.final.weight"))?[0]
        } else if stages.completion {
            shape(&format!("{CMP_ENCODER}.final.weight"))?[0] * 2
        } else {
            embed_dim * 2
        };
        let base_channels = if stages.segmentation {
            shape(&format!("{SEG_ENCODER}.init.weight"))?[0]
        } else {
            ArchitectureConfig::base_for_half(half)
        };
        let config = ArchitectureConfig {
            base_channels,
            latent_dim,
            embed_dim,
            residual_blocks,
            grid_dim: cad_final[2] << residual_blocks,
        };
        config.validate()?;
        let model = HourglassModel {
            config,
            stages,
            params,
        };
        let reference = HourglassModel::<T>::init(config, stages, 0)?;
        if reference.params.len() != model.params.len()
            || reference
                .params
                .iter()
                .any(|(n, t)| model.params.get(n).map(|m| m.shape()) != Some(t.shape()))
        {
            return Err(Error::Shape("parameter table does not match any architecture".into()));
        }
        Ok(model)
    }

    /// Stacked forward pass `f^e(f^c(f^s(scan)))` recorded on `g`.
    pub fn scan_pass(&self, g: &mut Graph<T>, p: &BoundParams<'_, T>, scan: Var) -> Result<ScanPass> {
        let cfg = &self.config;
        let (mut fg, mut bg, mut seg_latent, mut cmp, mut cmp_latent) = (None, None, None, None, None);
        let mut h = scan;
        if self.stages.segmentation {
            let latent = encode(g, p, SEG_ENCODER, cfg, scan)?;
            let half = cfg.latent_dim / 2;
            let fg_lat = g.slice_channels(latent, 0, half)?;
            let bg_lat = g.slice_channels(latent, half, half)?;
            let f = decode(g, p, FG_DECODER, cfg, fg_lat)?;
            bg = Some(decode(g, p, BG_DECODER, cfg, bg_lat)?);
            fg = Some(f);
            seg_latent = Some(latent);
            h = f;
        }
        if self.stages.completion {
            let latent = encode(g, p, CMP_ENCODER, cfg, h)?;
            let c = decode(g, p, CMP_DECODER, cfg, latent)?;
            cmp_latent = Some(latent);
            cmp = Some(c);
            h = c;
        }
        let embedding = encode(g, p, SCAN_ENCODER, cfg, h)?;
        Ok(ScanPass {
            fg,
            bg,
            seg_latent,
            cmp,
            cmp_latent,
            embedding,
        })
    }

    /// CAD encoder `g(cad)` recorded on `g`.
    pub fn cad_pass(&self, g: &mut Graph<T>, p: &BoundParams<'_, T>, cad: Var) -> Result<Var> {
        encode(g, p, CAD_ENCODER, &self.config, cad)
    }

    /// Segmentation hourglass: foreground and background probabilities plus
    /// the full latent.
    pub fn segment(&self, scan: &Tensor<T>) -> Result<Segmentation<T>> {
        check_input(&self.config, scan, "segment")?;
        if !self.stages.segmentation {
            return Err(Error::InvalidArgument("model was built without segmentation".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(scan.clone());
        let latent = encode(&mut g, &p, SEG_ENCODER, &self.config, x)?;
        let half = self.config.latent_dim / 2;
        let fg_lat = g.slice_channels(latent, 0, half)?;
        let bg_lat = g.slice_channels(latent, half, half)?;
        let fg = decode(&mut g, &p, FG_DECODER, &self.config, fg_lat)?;
        let bg = decode(&mut g, &p, BG_DECODER, &self.config, bg_lat)?;
        Ok(Segmentation {
            fg: g.value(fg).clone(),
            bg: g.value(bg).clone(),
            latent: g.value(latent).clone(),
        })
    }

    /// Completion hourglass applied to foreground probabilities.
    pub fn complete(&self, fg_prob: &Tensor<T>) -> Result<Completion<T>> {
        check_input(&self.config, fg_prob, "complete")?;
        if !self.stages.completion {
            return Err(Error::InvalidArgument("model was built without completion".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(fg_prob.clone());
        let latent = encode(&mut g, &p, CMP_ENCODER, &self.config, x)?;
        let cmp = decode(&mut g, &p, CMP_DECODER, &self.config, latent)?;
        Ok(Completion {
            cmp: g.value(cmp).clone(),
            latent: g.value(latent).clone(),
        })
    }

    pub fn embed_scan(&self, scan: &Tensor<T>) -> Result<ScanEmbedding<T>> {
        check_input(&self.config, scan, "embed_scan")?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(scan.clone());
        let pass = self.scan_pass(&mut g, &p, x)?;
        let grab = |v: Option<Var>| v.map(|v| g.value(v).clone());
        Ok(ScanEmbedding {
            embedding: g.value(pass.embedding).data().to_vec(),
            fg: grab(pass.fg),
            bg: grab(pass.bg),
            cmp: grab(pass.cmp),
        })
    }

    pub fn embed_cad(&self, cad: &Tensor<T>) -> Result<Vec<T>> {
        check_input(&self.config, cad, "embed_cad")?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(cad.clone());
        let e = self.cad_pass(&mut g, &p, x)?;
        Ok(g.value(e).data().to_vec())
    }
}

/// Autoencoder over CAD grids whose latent space drives annotation proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalAutoencoder<T = f32> {
    pub config: ArchitectureConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> ProposalAutoencoder<T> {
    pub fn init(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (half, e) = (config.half_width(), config.embed_dim);
        add_encoder(&mut params, &mut rng, AE_ENCODER, half, e, &config)?;
        add_decoder(&mut params, &mut rng, AE_DECODER, half, e, &config)?;
        Ok(ProposalAutoencoder { config, params })
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let init = params
            .get(&format!("{AE_ENCODER}.init.weight"))
            .ok_or_else(|| Error::InvalidArgument("not an autoencoder parameter table".into()))?;
        let fin = params
            .get(&format!("{AE_ENCODER}.final.weight"))
            .ok_or_else(|| Error::InvalidArgument("missing ae.encoder.final.weight".into()))?;
        let residual_blocks = params
            .names()
            .filter(|n| n.starts_with(&format!("{AE_ENCODER}.block")) && n.ends_with(".conv1.weight"))
            .count();
        let config = ArchitectureConfig {
            base_channels: ArchitectureConfig::base_for_half(init.shape()[0]),
            latent_dim: fin.shape()[0] * 2,
            embed_dim: fin.shape()[0],
            residual_blocks,
            grid_dim: fin.shape()[2] << residual_blocks,
        };
        let reference = ProposalAutoencoder::<T>::init(config, 0)?;
        if reference.params.len() != params.len()
            || reference.params.iter().any(|(n, t)| params.get(n).map(|m| m.shape()) != Some(t.shape()))
        {
            return Err(Error::Shape("parameter table does not match an autoencoder".into()));
        }
        Ok(ProposalAutoencoder { config, params })
    }

    /// Records encoder and decoder; returns `(latent, reconstruction)`.
    pub fn pass(&self, g: &mut Graph<T>, p: &BoundParams<'_, T>, cad: Var) -> Result<(Var, Var)> {
        let z = encode(g, p, AE_ENCODER, &self.config, cad)?;
        let r = decode(g, p, AE_DECODER, &self.config, z)?;
        Ok((z, r))
    }

    pub fn autoencode(&self, cad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        check_input(&self.config, cad, "autoencode_cad")?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(cad.clone());
        let (z, r) = self.pass(&mut g, &p, x)?;
        Ok((g.value(z).clone(), g.value(r).clone()))
    }
}
