//! Direct 3D convolution kernels.
//!
//! All three kernels describe the same cross-correlation, from a volume of
//! `in_channels × in_dims` to one of `out_channels × out_dims`, with a weight
//! laid out `[out_channels, in_channels, k, k, k]`. A transposed convolution is
//! this relation read backwards, so it reuses the kernels with roles swapped.
//! Every kernel accumulates into its output buffer and processes one batch
//! element.

use super::tensor::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Geometry of a convolution applied to `in_dims`. The output extent
    /// `(n + 2p - k) / s + 1` must come out as a positive integer.
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        in_dims: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let span = in_dims[a] + 2 * padding;
            if span < kernel || (span - kernel) % stride != 0 {
                return Err(Error::Shape(format!(
                    "conv (k={kernel}, s={stride}, p={padding}) does not tile an extent of {}",
                    in_dims[a]
                )));
            }
            out_dims[a] = (span - kernel) / stride + 1;
        }
        Ok(ConvGeometry {
            in_channels,
            out_channels,
            in_dims,
            out_dims,
            kernel,
            stride,
            padding,
        })
    }

    /// Geometry of the convolution whose adjoint is a transposed convolution
    /// taking `x_channels × x_dims` to `y_channels` channels with extent
    /// `(n - 1) s - 2p + k`. The returned geometry maps y-space to x-space.
    pub fn transposed(
        x_channels: usize,
        y_channels: usize,
        x_dims: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        let mut y_dims = [0; 3];
        for a in 0..3 {
            let grown = (x_dims[a] - 1) * stride + kernel;
            if grown <= 2 * padding {
                return Err(Error::Shape(format!(
                    "transposed conv (k={kernel}, s={stride}, p={padding}) collapses an extent of {}",
                    x_dims[a]
                )));
            }
            y_dims[a] = grown - 2 * padding;
        }
        Ok(ConvGeometry {
            in_channels: y_channels,
            out_channels: x_channels,
            in_dims: y_dims,
            out_dims: x_dims,
            kernel,
            stride,
            padding,
        })
    }

    pub fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }
}

/// Flat execution plan for one geometry.
///
/// The zero-padded input is split into `s³` stride phases (cells whose padded
/// coordinates agree modulo `s`). In phase coordinates a strided correlation
/// becomes `k³` unit-stride shifts, and computing every output in the phase
/// volume's row pitch turns each (channel pair, tap) into one contiguous
/// multiply-add over `run` cells. Cells past the output extent in a row are
/// scratch and are dropped (or held at zero when read).
struct Plan {
    s: usize,
    pad: usize,
    phase_dims: [usize; 3],
    phase_volume: usize,
    run: usize,
    /// `(weight index, phase, flat shift)` per kernel tap.
    taps: Vec<(usize, usize, usize)>,
}

impl Plan {
    fn new(g: &ConvGeometry) -> Self {
        let (s, k, pad) = (g.stride, g.kernel, g.padding);
        let phase_dims = g.in_dims.map(|n| (n + 2 * pad).div_ceil(s));
        let [_, ph, pw] = phase_dims;
        let [od, oh, ow] = g.out_dims;
        let mut taps = Vec::with_capacity(k * k * k);
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let phase = ((kd % s) * s + kh % s) * s + kw % s;
                    let shift = ((kd / s) * ph + kh / s) * pw + kw / s;
                    taps.push(((kd * k + kh) * k + kw, phase, shift));
                }
            }
        }
        Plan {
            s,
            pad,
            phase_dims,
            phase_volume: phase_dims.iter().product(),
            run: ((od - 1) * ph + (oh - 1)) * pw + ow,
            taps,
        }
    }

    fn phased_len(&self) -> usize {
        self.s.pow(3) * self.phase_volume
    }

    /// Per-axis offsets whose sum is the position of input cell `(z, y, x)`
    /// inside one channel's phased block.
    fn input_offsets(&self, g: &ConvGeometry) -> [Vec<usize>; 3] {
        let (s, p, pv) = (self.s, self.pad, self.phase_volume);
        let [_, ph, pw] = self.phase_dims;
        let phase_scale = [s * s * pv, s * pv, pv];
        let pitch = [ph * pw, pw, 1];
        std::array::from_fn(|a| {
            (0..g.in_dims[a])
                .map(|c| ((c + p) % s) * phase_scale[a] + ((c + p) / s) * pitch[a])
                .collect()
        })
    }

    fn visit_inputs(&self, g: &ConvGeometry, mut f: impl FnMut(usize, usize)) {
        let [tz, ty, tx] = self.input_offsets(g);
        let mut flat = 0;
        for &oz in &tz {
            for &oy in &ty {
                let base = oz + oy;
                for &ox in &tx {
                    f(flat, base + ox);
                    flat += 1;
                }
            }
        }
    }

    fn split_input<T: Real>(&self, g: &ConvGeometry, input: &[T]) -> Vec<T> {
        let (iv, pl) = (g.in_volume(), self.phased_len());
        let mut out = vec![T::zero(); g.in_channels * pl];
        for c in 0..g.in_channels {
            let (src, dst) = (&input[c * iv..(c + 1) * iv], &mut out[c * pl..(c + 1) * pl]);
            self.visit_inputs(g, |i, j| dst[j] = src[i]);
        }
        out
    }

    fn merge_input_add<T: Real>(&self, g: &ConvGeometry, phased: &[T], din: &mut [T]) {
        let (iv, pl) = (g.in_volume(), self.phased_len());
        for c in 0..g.in_channels {
            let (src, dst) = (&phased[c * pl..(c + 1) * pl], &mut din[c * iv..(c + 1) * iv]);
            self.visit_inputs(g, |i, j| dst[i] += src[j]);
        }
    }

    fn visit_outputs(&self, g: &ConvGeometry, mut f: impl FnMut(usize, usize)) {
        let [d, h, w] = g.out_dims;
        let [_, ph, pw] = self.phase_dims;
        let mut flat = 0;
        for z in 0..d {
            for y in 0..h {
                let row = (z * ph + y) * pw;
                for x in 0..w {
                    f(flat, row + x);
                    flat += 1;
                }
            }
        }
    }

    /// Output gradient spread into run layout, zero on scratch cells.
    fn spread_output<T: Real>(&self, g: &ConvGeometry, dout: &[T]) -> Vec<T> {
        let ov = g.out_volume();
        let mut out = vec![T::zero(); g.out_channels * self.run];
        for c in 0..g.out_channels {
            let (src, dst) = (&dout[c * ov..(c + 1) * ov], &mut out[c * self.run..(c + 1) * self.run]);
            self.visit_outputs(g, |i, j| dst[j] = src[i]);
        }
        out
    }

    fn gather_output_add<T: Real>(&self, g: &ConvGeometry, runs: &[T], out: &mut [T]) {
        let ov = g.out_volume();
        for c in 0..g.out_channels {
            let (src, dst) = (&runs[c * self.run..(c + 1) * self.run], &mut out[c * ov..(c + 1) * ov]);
            self.visit_outputs(g, |i, j| dst[i] += src[j]);
        }
    }
}

/// `acc[i] += Σ_t w[t] · xs[t][i]` over four taps at once, which keeps the
/// accumulator traffic at a quarter of one pass per tap.
#[inline(always)]
fn mac4<T: Real>(acc: &mut [T], w: [T; 4], xs: [&[T]; 4]) {
    let n = acc.len();
    let (x0, x1, x2, x3) = (&xs[0][..n], &xs[1][..n], &xs[2][..n], &xs[3][..n]);
    for i in 0..n {
        acc[i] += (w[0] * x0[i] + w[1] * x1[i]) + (w[2] * x2[i] + w[3] * x3[i]);
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes;
/// the summation order is fixed, hence deterministic.
#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b[..a.len()].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Taps grouped four at a time; a short last group repeats its first tap
/// with zero weight.
fn tap_groups<'a, T: Real>(
    taps: &'a [(usize, usize, usize)],
    w: &'a [T],
) -> impl Iterator<Item = ([T; 4], [(usize, usize); 4], usize)> + 'a {
    taps.chunks(4).map(move |c| {
        let n = c.len();
        let wv = std::array::from_fn(|t| if t < n { w[c[t].0] } else { T::zero() });
        let at = std::array::from_fn(|t| {
            let (_, phase, shift) = c[t.min(n - 1)];
            (phase, shift)
        });
        (wv, at, n)
    })
}

/// `out[oc] += Σ_ic w[oc, ic] ⋆ input[ic]`
pub(crate) fn forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], out: &mut [T]) {
    let plan = Plan::new(g);
    let (k3, pl, run, pv) = (g.kernel.pow(3), plan.phased_len(), plan.run, plan.phase_volume);
    let phased = plan.split_input(g, input);
    let mut runs = vec![T::zero(); g.out_channels * run];
    for (oc, acc) in runs.chunks_exact_mut(run).enumerate() {
        for ic in 0..g.in_channels {
            let x = &phased[ic * pl..(ic + 1) * pl];
            let w = &weight[(oc * g.in_channels + ic) * k3..][..k3];
            for (wv, at, _) in tap_groups(&plan.taps, w) {
                mac4(acc, wv, at.map(|(phase, shift)| &x[phase * pv + shift..]));
            }
        }
    }
    plan.gather_output_add(g, &runs, out);
}

/// `din[ic] += Σ_oc w[oc, ic] ⋆ᵀ dout[oc]`, evaluated as a gather over a
/// zero-extended copy of `dout` so each phase accumulates like the forward.
pub(crate) fn backward_input<T: Real>(g: &ConvGeometry, dout: &[T], weight: &[T], din: &mut [T]) {
    let plan = Plan::new(g);
    let (k3, pl, run, pv) = (g.kernel.pow(3), plan.phased_len(), plan.run, plan.phase_volume);
    let lead = plan.taps.iter().map(|t| t.2).max().unwrap_or(0);
    let span = lead + pv;
    let spread = plan.spread_output(g, dout);
    let mut padded = vec![T::zero(); g.out_channels * span];
    for (dst, src) in padded.chunks_exact_mut(span).zip(spread.chunks_exact(run)) {
        dst[lead..lead + run].copy_from_slice(src);
    }
    let phases = plan.s.pow(3);
    let mut by_phase: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); phases];
    for &t in &plan.taps {
        by_phase[t.1].push(t);
    }
    let mut phased = vec![T::zero(); g.in_channels * pl];
    for (ic, acc_c) in phased.chunks_exact_mut(pl).enumerate() {
        for oc in 0..g.out_channels {
            let y = &padded[oc * span..(oc + 1) * span];
            let w = &weight[(oc * g.in_channels + ic) * k3..][..k3];
            for (phase, taps) in by_phase.iter().enumerate() {
                if taps.is_empty() {
                    continue;
                }
                let acc = &mut acc_c[phase * pv..(phase + 1) * pv];
                for (wv, at, _) in tap_groups(taps, w) {
                    mac4(acc, wv, at.map(|(_, shift)| &y[lead - shift..]));
                }
            }
        }
    }
    plan.merge_input_add(g, &phased, din);
}

/// `dw[oc, ic] += dout[oc] ⋆ input[ic]` (correlation over output positions).
pub(crate) fn backward_weight<T: Real>(g: &ConvGeometry, input: &[T], dout: &[T], dw: &mut [T]) {
    let plan = Plan::new(g);
    let (k3, pl, run, pv) = (g.kernel.pow(3), plan.phased_len(), plan.run, plan.phase_volume);
    let phased = plan.split_input(g, input);
    let spread = plan.spread_output(g, dout);
    for oc in 0..g.out_channels {
        let y = &spread[oc * run..(oc + 1) * run];
        for ic in 0..g.in_channels {
            let x = &phased[ic * pl..(ic + 1) * pl];
            let w = &mut dw[(oc * g.in_channels + ic) * k3..][..k3];
            for &(widx, phase, shift) in &plan.taps {
                w[widx] += dot(y, &x[phase * pv + shift..]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference correlation with explicit bounds checks.
    fn naive(g: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let k = g.kernel as isize;
        let [id, ih, iw] = g.in_dims.map(|v| v as isize);
        let [od, oh, ow] = g.out_dims;
        let mut out = vec![0.0; g.out_channels * g.out_volume()];
        for oc in 0..g.out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..g.in_channels {
                            for a in 0..k {
                                for b in 0..k {
                                    for c in 0..k {
                                        let zi = (z * g.stride) as isize + a - g.padding as isize;
                                        let yi = (y * g.stride) as isize + b - g.padding as isize;
                                        let xi = (x * g.stride) as isize + c - g.padding as isize;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= id || yi >= ih || xi >= iw {
                                            continue;
                                        }
                                        let ii = ic * g.in_volume()
                                            + ((zi * ih + yi) * iw + xi) as usize;
                                        let wi = (((oc * g.in_channels + ic) as isize * k + a) * k + b)
                                            * k
                                            + c;
                                        acc += input[ii] * weight[wi as usize];
                                    }
                                }
                            }
                        }
                        out[oc * g.out_volume() + (z * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn geometry_requires_exact_tiling() {
        assert_eq!(ConvGeometry::conv(1, 1, [32; 3], 4, 2, 1).unwrap().out_dims, [16; 3]);
        assert_eq!(ConvGeometry::conv(1, 1, [2; 3], 2, 1, 0).unwrap().out_dims, [1; 3]);
        assert!(ConvGeometry::conv(1, 1, [32; 3], 3, 2, 1).is_err());
        assert!(ConvGeometry::conv(1, 1, [2; 3], 3, 1, 0).is_err());
        let t = ConvGeometry::transposed(1, 1, [16; 3], 4, 2, 1).unwrap();
        assert_eq!(t.in_dims, [32; 3]);
        assert_eq!(ConvGeometry::transposed(1, 1, [1; 3], 2, 1, 0).unwrap().in_dims, [2; 3]);
    }

    #[test]
    fn forward_matches_naive_for_several_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, n, k, s, p) in &[
            (1, 1, 4, 3, 1, 0),
            (2, 3, 6, 3, 1, 1),
            (2, 2, 8, 4, 2, 1),
            (3, 2, 4, 2, 2, 0),
            (2, 4, 2, 2, 1, 0),
        ] {
            let g = ConvGeometry::conv(cin, cout, [n; 3], k, s, p).unwrap();
            let x = random(cin * g.in_volume(), &mut rng);
            let w = random(g.weight_len(), &mut rng);
            let mut out = vec![0.0; cout * g.out_volume()];
            forward(&g, &x, &w, &mut out);
            let expected = naive(&g, &x, &w);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for {g:?}");
            }
        }
    }

    /// Adjointness: <conv(x), y> == <x, convᵀ(y)> and the weight gradient is
    /// the derivative of <conv(x; w), y> with respect to w.
    #[test]
    fn backward_kernels_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(cin, cout, n, k, s, p) in &[(2, 3, 6, 3, 1, 1), (2, 2, 8, 4, 2, 1), (3, 2, 4, 2, 2, 0)] {
            let g = ConvGeometry::conv(cin, cout, [n; 3], k, s, p).unwrap();
            let x = random(cin * g.in_volume(), &mut rng);
            let w = random(g.weight_len(), &mut rng);
            let y = random(cout * g.out_volume(), &mut rng);

            let mut fx = vec![0.0; y.len()];
            forward(&g, &x, &w, &mut fx);
            let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut aty = vec![0.0; x.len()];
            backward_input(&g, &y, &w, &mut aty);
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);

            let mut dw = vec![0.0; w.len()];
            backward_weight(&g, &x, &y, &mut dw);
            let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_w).abs() < 1e-9);
        }
    }
}
