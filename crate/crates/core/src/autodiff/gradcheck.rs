//! Central finite-difference checks of reverse-mode gradients in 64-bit.

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::Result;

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Outcome of one check; `worst` names the entry with the largest error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = what();
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }
}

/// Differentiates the scalar `f(inputs)` with respect to every element of
/// every input and compares against central differences with step `h`.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    h: f64,
    floor: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradReport::new();
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for i in 0..xs[k].numel() {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + h;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = x0 - h;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            report.record(rel_err(analytic[i], numeric, floor), || {
                format!("input {k}[{i}]: analytic {} numeric {numeric}", analytic[i])
            });
        }
    }
    Ok(report)
}

/// Compares `loss`'s analytic parameter gradients at the `(parameter index,
/// element)` pairs in `at` against central differences. `loss(params, true)`
/// returns the value and per-parameter gradients in parameter order.
#[allow(clippy::type_complexity)]
pub fn check_params(
    params: &mut ParamSet<f64>,
    at: &[(usize, usize)],
    h: f64,
    floor: f64,
    loss: impl Fn(&ParamSet<f64>, bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>,
) -> Result<GradReport> {
    let (_, grads) = loss(params, true)?;
    let grads = grads.expect("gradients requested");
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradReport::new();
    for &(p, i) in at {
        let x0 = params.get(&names[p]).expect("known parameter").data()[i];
        let set = |params: &mut ParamSet<f64>, x: f64| {
            params.get_mut(&names[p]).expect("known parameter").data_mut()[i] = x;
        };
        set(params, x0 + h);
        let up = loss(params, false)?.0;
        set(params, x0 - h);
        let down = loss(params, false)?.0;
        set(params, x0);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[p][i];
        report.record(rel_err(analytic, numeric, floor), || {
            format!("{}[{i}]: analytic {analytic} numeric {numeric}", names[p])
        });
    }
    Ok(report)
}
