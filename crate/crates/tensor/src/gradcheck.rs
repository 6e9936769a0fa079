//! Central finite-difference oracle for tape gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Magnitude below which errors are measured absolutely rather than relatively.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(tensor, index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences, perturbing each checked coordinate of each parameter.
pub fn check_gradients<F>(params: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| g.param(&p.clone().with_grad()))
            .collect();
        let root = f(&g, &vars)?;
        let grads = g.backward(root)?;
        vars.iter()
            .map(|v| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; v.shape().iter().product()])
            })
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p)).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let stride = match opts.max_coords_per_tensor {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad[idx], numeric, opts.floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, idx, grad[idx], numeric));
            }
        }
    }
    Ok(report)
}
