//! Central finite-difference checks for tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative error used throughout: `|analytic − numeric| / max(1, |numeric|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((input, elem));
        }
    }
}

/// Compares tape gradients of `f` against central differences with `step`.
///
/// `f` must build a scalar from the leaves it is handed; every input element
/// is perturbed.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (ii, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[ii].shape()));
        for e in 0..inputs[ii].numel() {
            let orig = probe[ii].data()[e];
            probe[ii].data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe[ii].data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(ii, e, analytic.data()[e], numeric);
        }
    }
    Ok(report)
}
