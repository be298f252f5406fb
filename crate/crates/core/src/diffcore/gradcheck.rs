//! Central finite-difference checks against [`Graph::backward`].
//!
//! Only forward evaluations are used to build the numerical estimate.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Description of the worst element, e.g. `"lstm.w_input[17]"`.
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = label();
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self::new()
    }
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn scalar_loss(g: &Graph, loss: NodeId) -> Result<f64> {
    g.value(loss).item()
}

/// Check every element of every trainable parameter in `store`.
///
/// `build` constructs the forward graph from the current parameter values
/// and returns the scalar loss node.
pub fn check_params<F>(store: &mut ParamStore, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::new();
    let ids: Vec<_> = store.ids().filter(|&id| store.requires_grad(id)).collect();
    for id in ids {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        for k in 0..analytic.numel() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store)?;
            let plus = scalar_loss(&gp, lp)?;
            store.get_mut(id).data_mut()[k] = orig - step;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store)?;
            let minus = scalar_loss(&gm, lm)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(analytic.data()[k], numeric, || format!("{}[{k}]", store.name(id)));
        }
    }
    Ok(report)
}

/// Check the gradient of a scalar function with respect to a free input
/// tensor. `build` receives the graph and the node holding `input`.
pub fn check_input<F>(input: &Tensor, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.variable(input.clone())?;
    let loss = build(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .variable(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
    let mut report = GradCheckReport::new();
    let mut probe = input.clone();
    for k in 0..input.numel() {
        let orig = input.data()[k];
        let mut eval = |v: f64| -> Result<f64> {
            probe.data_mut()[k] = v;
            let mut gg = Graph::new();
            let xx = gg.input(probe.clone())?;
            let l = build(&mut gg, xx)?;
            scalar_loss(&gg, l)
        };
        let plus = eval(orig + step)?;
        let minus = eval(orig - step)?;
        probe.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        report.record(analytic.data()[k], numeric, || format!("input[{k}]"));
    }
    if report.checked == 0 {
        return Err(Error::contract("gradient check on an empty input"));
    }
    Ok(report)
}
