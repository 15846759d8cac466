//! Central finite-difference gradient checking for [`Graph`] computations.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Agreement between analytic and numeric gradients for one input tensor.
#[derive(Debug, Clone)]
pub struct GradComparison {
    pub input: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`
    pub rel_err: f64,
}

/// Builds the scalar function with `build` over fresh leaves holding
/// `inputs`, backpropagates, then compares every input's gradient against
/// central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(g.value(out).shape().to_vec()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let mut work = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let an = analytic.norm();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        report.push(GradComparison {
            input: k,
            analytic_norm: an,
            numeric_norm: nn,
            rel_err: diff / an.max(nn).max(1e-12),
        });
    }
    Ok(report)
}

pub fn max_rel_err(report: &[GradComparison]) -> f64 {
    report.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}
