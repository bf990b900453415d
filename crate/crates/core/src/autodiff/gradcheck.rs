use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{Precision, Tensor};
use crate::error::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst component found by [`gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat component index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub components: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences. Non-scalar outputs are reduced to a scalar through a fixed
/// pseudo-random projection so that every output component contributes.
pub fn gradcheck<F>(point: &[Tensor], step: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let scalar = |inputs: &[Tensor]| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let out = if g.value(out).len() == 1 {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
            let proj = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5)));
            let weighted = g.mul(out, proj)?;
            let axes: Vec<usize> = (0..shape.len()).collect();
            g.sum_axes(weighted, &axes)?
        };
        Ok((g, out, vars))
    };

    let (graph, out, vars) = scalar(point)?;
    let mut grads = graph.backward(out, None)?;
    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        components: 0,
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .take(v)
            .unwrap_or_else(|| Tensor::zeros(point[i].shape()));
        for j in 0..point[i].len() {
            let x0 = point[i].data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let (gp, op, _) = scalar(&probe)?;
            let plus = gp.value(op).data()[0];
            probe[i].data_mut()[j] = x0 - step;
            let (gm, om, _) = scalar(&probe)?;
            let minus = gm.value(om).data()[0];
            probe[i].data_mut()[j] = x0;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.components += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
