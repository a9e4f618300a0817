use super::conv::{self, ConvGeometry};
use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the
/// binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeometry },
    ConvTranspose { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SliceChannels { x: Var, start: usize },
    Bce { pred: Var, target: Var },
    Triplet { anchor: Var, positive: Var, negative: Var, margin: T },
    Distance(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    numel: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Vec<T> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.numel.get(var.0).copied().unwrap_or(0)],
        }
    }
}

fn five_axis(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape)
        .map_err(|_| Error::Shape(format!("{what}: expected a 5-axis tensor, got {shape:?}")))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn conv_shapes(&self, x: Var, w: Var, b: Var, what: &str) -> Result<([usize; 5], [usize; 5])> {
        let xs = five_axis(self.shape(x), what)?;
        let ws = five_axis(self.shape(w), what)?;
        if ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::Shape(format!("{what}: non-cubic kernel {ws:?}")));
        }
        Ok((xs, ws))
            .and_then(|r| {
                let bias_len = if what == "conv3d" { ws[0] } else { ws[1] };
                if self.shape(b) != [bias_len] {
                    return Err(Error::Shape(format!(
                        "{what}: bias {:?} for {bias_len} output channels",
                        self.shape(b)
                    )));
                }
                Ok(r)
            })
    }

    /// 3D cross-correlation of `x [N, Cin, D, H, W]` with `w [Cout, Cin, k, k, k]`
    /// plus bias `b [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = self.conv_shapes(x, w, b, "conv3d")?;
        if ws[1] != xs[1] {
            return Err(Error::Shape(format!(
                "conv3d: weight expects {} input channels, input has {}",
                ws[1], xs[1]
            )));
        }
        let geom = ConvGeometry::conv(ws[1], ws[0], [xs[2], xs[3], xs[4]], ws[2], stride, padding)?;
        let (iv, ov) = (geom.in_volume() * geom.in_channels, geom.out_volume() * geom.out_channels);
        let mut out = vec![T::zero(); xs[0] * ov];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for n in 0..xs[0] {
                let o = &mut out[n * ov..(n + 1) * ov];
                for (oc, chunk) in o.chunks_mut(geom.out_volume()).enumerate() {
                    chunk.fill(bv[oc]);
                }
                conv::forward(&geom, &xv[n * iv..(n + 1) * iv], wv, o);
            }
        }
        let [od, oh, ow] = geom.out_dims;
        let value = Tensor::new(vec![xs[0], ws[0], od, oh, ow], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed 3D convolution of `x [N, Cin, D, H, W]` with
    /// `w [Cin, Cout, k, k, k]` plus bias `b [Cout]`; output extent
    /// `(D - 1) s - 2p + k`.
    pub fn conv3d_transposed(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = self.conv_shapes(x, w, b, "conv3d_transposed")?;
        if ws[0] != xs[1] {
            return Err(Error::Shape(format!(
                "conv3d_transposed: weight expects {} input channels, input has {}",
                ws[0], xs[1]
            )));
        }
        let geom =
            ConvGeometry::transposed(ws[0], ws[1], [xs[2], xs[3], xs[4]], ws[2], stride, padding)?;
        // geom maps y-space (our output) to x-space (our input).
        let (xv_len, yv_len) = (geom.out_volume() * geom.out_channels, geom.in_volume() * geom.in_channels);
        let mut out = vec![T::zero(); xs[0] * yv_len];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for n in 0..xs[0] {
                let o = &mut out[n * yv_len..(n + 1) * yv_len];
                for (c, chunk) in o.chunks_mut(geom.in_volume()).enumerate() {
                    chunk.fill(bv[c]);
                }
                conv::backward_input(&geom, &xv[n * xv_len..(n + 1) * xv_len], wv, o);
            }
        }
        let [yd, yh, yw] = geom.in_dims;
        let value = Tensor::new(vec![xs[0], ws[1], yd, yh, yw], out)?;
        Ok(self.push(value, Op::ConvTranspose { x, w, b, geom }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Channels `[start, start + len)` of a `[N, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(Error::Shape(format!(
                "slice_channels [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(shape[0] * len * inner);
        let src = self.value(x).data();
        for n in 0..shape[0] {
            let base = (n * shape[1] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    /// Mean binary cross-entropy between probabilities and targets.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "bce")?;
        let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let total: f64 = p
            .iter()
            .zip(t)
            .map(|(&p, &t)| {
                let p = p.as_f64().clamp(lo, hi);
                let t = t.as_f64();
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let value = Tensor::scalar(T::of(total / p.len() as f64));
        Ok(self.push(value, Op::Bce { pred, target }, &[pred, target]))
    }

    fn check_vectors(&self, vars: &[Var], what: &str) -> Result<()> {
        let n = self.value(vars[0]).numel();
        if vars.iter().any(|v| self.value(*v).numel() != n) {
            let lens: Vec<usize> = vars.iter().map(|v| self.value(*v).numel()).collect();
            return Err(Error::Shape(format!("{what}: vector lengths {lens:?}")));
        }
        Ok(())
    }

    /// `max(‖a − p‖ − ‖a − n‖ + margin, 0)` over flattened tensors.
    pub fn triplet_loss(&mut self, anchor: Var, positive: Var, negative: Var, margin: T) -> Result<Var> {
        self.check_vectors(&[anchor, positive, negative], "triplet_loss")?;
        let a = self.value(anchor).data();
        let d_pos = euclidean(a, self.value(positive).data());
        let d_neg = euclidean(a, self.value(negative).data());
        let value = Tensor::scalar((d_pos - d_neg + margin).max(T::zero()));
        Ok(self.push(
            value,
            Op::Triplet {
                anchor,
                positive,
                negative,
                margin,
            },
            &[anchor, positive, negative],
        ))
    }

    /// Euclidean distance between two flattened tensors.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_vectors(&[a, b], "distance")?;
        let value = Tensor::scalar(euclidean(self.value(a).data(), self.value(b).data()));
        Ok(self.push(value, Op::Distance(a, b), &[a, b]))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let numel: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
        }
        Ok(Gradients { grads, numel })
    }

    fn propagate(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:expr) => {
                if let Some($g) = grad_slot(&self.nodes, grads, $v) {
                    $body
                }
            };
        }

        match node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xs = self.value(x);
                let batch = xs.shape()[0];
                let (iv, ov) = (geom.in_volume() * geom.in_channels, geom.out_volume() * geom.out_channels);
                let wv = self.value(w).data();
                with_grad!(x, |gx| for n in 0..batch {
                    conv::backward_input(&geom, &gout[n * ov..(n + 1) * ov], wv, &mut gx[n * iv..(n + 1) * iv]);
                });
                with_grad!(w, |gw| for n in 0..batch {
                    conv::backward_weight(&geom, &xs.data()[n * iv..(n + 1) * iv], &gout[n * ov..(n + 1) * ov], gw);
                });
                with_grad!(b, |gb| for n in 0..batch {
                    let g = &gout[n * ov..(n + 1) * ov];
                    for (oc, chunk) in g.chunks(geom.out_volume()).enumerate() {
                        gb[oc] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::ConvTranspose { x, w, b, geom } => {
                // geom runs from our output (y) to our input (x).
                let xs = self.value(x);
                let batch = xs.shape()[0];
                let (xv, yv) = (geom.out_volume() * geom.out_channels, geom.in_volume() * geom.in_channels);
                let wv = self.value(w).data();
                with_grad!(x, |gx| for n in 0..batch {
                    conv::forward(&geom, &gout[n * yv..(n + 1) * yv], wv, &mut gx[n * xv..(n + 1) * xv]);
                });
                with_grad!(w, |gw| for n in 0..batch {
                    conv::backward_weight(&geom, &gout[n * yv..(n + 1) * yv], &xs.data()[n * xv..(n + 1) * xv], gw);
                });
                with_grad!(b, |gb| for n in 0..batch {
                    let g = &gout[n * yv..(n + 1) * yv];
                    for (c, chunk) in g.chunks(geom.in_volume()).enumerate() {
                        gb[c] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Relu(x) => {
                let out = node.value.data();
                with_grad!(x, |gx| for ((g, &y), &d) in gx.iter_mut().zip(out).zip(gout) {
                    if y > T::zero() {
                        *g += d;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                with_grad!(x, |gx| for ((g, &y), &d) in gx.iter_mut().zip(out).zip(gout) {
                    *g += d * y * (T::one() - y);
                });
            }
            Op::Add(a, b) => {
                with_grad!(a, |ga| for (g, &d) in ga.iter_mut().zip(gout) {
                    *g += d;
                });
                with_grad!(b, |gb| for (g, &d) in gb.iter_mut().zip(gout) {
                    *g += d;
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                with_grad!(a, |ga| for ((g, &d), &q) in ga.iter_mut().zip(gout).zip(bv) {
                    *g += d * q;
                });
                with_grad!(b, |gb| for ((g, &d), &p) in gb.iter_mut().zip(gout).zip(av) {
                    *g += d * p;
                });
            }
            Op::Scale(x, factor) => {
                with_grad!(x, |gx| for (g, &d) in gx.iter_mut().zip(gout) {
                    *g += d * factor;
                });
            }
            Op::SliceChannels { x, start } => {
                let shape = self.shape(x);
                let len = node.value.shape()[1];
                let inner: usize = shape[2..].iter().product();
                with_grad!(x, |gx| for n in 0..shape[0] {
                    let dst = (n * shape[1] + start) * inner;
                    let src = n * len * inner;
                    for (g, &d) in gx[dst..dst + len * inner].iter_mut().zip(&gout[src..src + len * inner]) {
                        *g += d;
                    }
                });
            }
            Op::Bce { pred, target } => {
                let (p, t) = (self.value(pred).data(), self.value(target).data());
                let scale = gout[0] / T::of(p.len() as f64);
                let lo = T::of(BCE_CLAMP);
                let hi = T::one() - lo;
                with_grad!(pred, |gp| for ((g, &p), &t) in gp.iter_mut().zip(p).zip(t) {
                    if p > lo && p < hi {
                        *g += scale * ((T::one() - t) / (T::one() - p) - t / p);
                    }
                });
                with_grad!(target, |gt| for (g, &p) in gt.iter_mut().zip(p) {
                    let p = p.max(lo).min(hi);
                    *g += scale * ((T::one() - p).ln() - p.ln());
                });
            }
            Op::Triplet {
                anchor,
                positive,
                negative,
                margin,
            } => {
                let a = self.value(anchor).data();
                let p = self.value(positive).data();
                let n = self.value(negative).data();
                let d_pos = euclidean(a, p);
                let d_neg = euclidean(a, n);
                if d_pos - d_neg + margin <= T::zero() {
                    return;
                }
                let d = gout[0];
                // Unit directions; zero at coincident points (subgradient).
                let cp = if d_pos > T::zero() { d / d_pos } else { T::zero() };
                let cn = if d_neg > T::zero() { d / d_neg } else { T::zero() };
                with_grad!(anchor, |ga| for i in 0..a.len() {
                    ga[i] += cp * (a[i] - p[i]) - cn * (a[i] - n[i]);
                });
                with_grad!(positive, |gp| for i in 0..a.len() {
                    gp[i] -= cp * (a[i] - p[i]);
                });
                with_grad!(negative, |gn| for i in 0..a.len() {
                    gn[i] += cn * (a[i] - n[i]);
                });
            }
            Op::Distance(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let dist = node.value.data()[0];
                if dist <= T::zero() {
                    return;
                }
                let c = gout[0] / dist;
                with_grad!(a, |ga| for i in 0..av.len() {
                    ga[i] += c * (av[i] - bv[i]);
                });
                with_grad!(b, |gb| for i in 0..av.len() {
                    gb[i] -= c * (av[i] - bv[i]);
                });
            }
        }
    }
}

/// Gradient buffer of an input, allocated on first use; `None` if the input
/// needs no gradient.
fn grad_slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn euclidean<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}
