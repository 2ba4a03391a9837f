//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor};
use crate::Result;

/// A shaped f64 buffer fed to the function under test.
pub type CheckInput = (Vec<usize>, Vec<f64>);

/// Compares the analytic gradient of `f` (a scalar-valued graph builder)
/// against central differences at every coordinate of every input. Returns
/// the maximum relative error `|a - n| / max(1e-8, |a| + |n|)`.
///
/// Central differences carry a truncation error of order `eps^2 * f'''` and
/// summation jitter of order `ulp(loss) / (2 * eps)`; for O(1) losses at
/// eps = 1e-5 that is an absolute floor near 1e-9. Coordinates where both
/// the analytic and numeric derivative sit below [`MEASURABLE_FLOOR`] are
/// therefore treated as agreeing (the usual absolute-tolerance rule); the
/// relative form applies everywhere else. A wrong formula still fails
/// loudly: it perturbs gradients at the scale of the gradient itself.
///
/// Runs in f64; central differences are too noisy in f32.
pub fn grad_check<F>(f: F, inputs: &[CheckInput], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    grad_check_subset(f, inputs, eps, None)
}

/// Coordinates where both derivative estimates are below this magnitude are
/// below what central differences can certify at 1e-4 relative precision.
const MEASURABLE_FLOOR: f64 = 1e-5;

/// Like [`grad_check`] but restricted to the given `(input, coordinate)`
/// pairs, for functions with too many parameters to probe exhaustively.
pub fn grad_check_subset<F>(
    f: F,
    inputs: &[CheckInput],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    let evaluate = |bufs: &[CheckInput]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let handles: Vec<Tensor> = bufs
            .iter()
            .map(|(shape, data)| g.param(shape, data.clone()))
            .collect::<Result<_>>()?;
        let loss = f(&mut g, &handles)?;
        g.backward(loss)?;
        let grads = handles.iter().map(|&h| g.grad(h).to_vec()).collect();
        Ok((g.scalar_value(loss), grads))
    };

    let (_, analytic) = evaluate(inputs)?;

    let all_coords: Vec<(usize, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, (_, data))| (0..data.len()).map(move |j| (i, j)))
            .collect(),
    };

    let mut work: Vec<CheckInput> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for (i, j) in all_coords {
        let orig = work[i].1[j];
        work[i].1[j] = orig + eps;
        let (lp, _) = evaluate(&work)?;
        work[i].1[j] = orig - eps;
        let (lm, _) = evaluate(&work)?;
        work[i].1[j] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[i][j];
        let err = if a.abs() <= MEASURABLE_FLOOR && numeric.abs() <= MEASURABLE_FLOOR {
            0.0
        } else {
            (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs())
        };
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
