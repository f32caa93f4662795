//! Central finite-difference check of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of [`fd_check`].
#[derive(Clone, Debug)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences `(f(θ + eps·e) - f(θ - eps·e)) / 2eps`.
///
/// `f` receives the parameters as tape variables in the order given. When the
/// parameters hold at most `coords` scalars every coordinate is checked;
/// otherwise `coords` coordinates are sampled round-robin across parameters.
pub fn fd_check<F>(f: F, params: &[(&str, Tensor<f64>)], eps: f64, coords: usize, seed: u64) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    assert!(eps > 0.0, "fd_check needs a positive step");
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|(n, t)| tape.param(*n, t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.gradients(&loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::inference();
        let vs: Vec<_> = params.iter().zip(values).map(|((n, _), v)| t.param(*n, v.clone())).collect();
        Ok(f(&t, &vs)?.value().item())
    };

    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let mut picks = Vec::new();
    if total <= coords {
        for (pi, (_, t)) in params.iter().enumerate() {
            picks.extend((0..t.numel()).map(|i| (pi, i)));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..coords {
            let pi = k % params.len();
            picks.push((pi, rng.random_range(0..params[pi].1.numel())));
        }
    }

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = FdReport { max_rel_error: 0.0, coords_checked: picks.len(), worst: None };
    for (pi, idx) in picks {
        let name = params[pi].0;
        let analytic = grads.get(name)?.data()[idx];
        let orig = values[pi].data()[idx];
        values[pi].data_mut()[idx] = orig + eps;
        let up = eval(&values)?;
        values[pi].data_mut()[idx] = orig - eps;
        let down = eval(&values)?;
        values[pi].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.to_string(), idx));
        }
    }
    Ok(report)
}
