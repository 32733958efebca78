use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
const REL_ERROR_FLOOR: f64 = 1e-6;

/// Which coordinates of each parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `per_param` coordinates per parameter, drawn from `seed`.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x+eps) - f(x-eps)) / 2eps` for a scalar function.
pub fn central_difference(f: impl Fn(f64) -> Result<f64>, x: f64, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let hi = finite(f(x + eps)?)?;
    let lo = finite(f(x - eps)?)?;
    Ok((hi - lo) / (2.0 * eps))
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {v}")))
    }
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` builds a scalar loss on the supplied tape from the current values in
/// `params`. Parameter values are restored before returning; gradient
/// buffers are left holding the analytic gradient.
pub fn finite_diff_check<F>(f: F, params: &mut ParamSet, eps: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    finite(tape.value(loss).item())?;
    tape.backward(loss)?.accumulate_into(params, 1.0);

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        finite(tape.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = params.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect();
    for id in ids {
        let n = params.get(id).value().numel();
        let indices: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_param, seed } => {
                if per_param >= n {
                    (0..n).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9));
                    (0..per_param).map(|_| rng.gen_range(0..n)).collect()
                }
            }
        };
        for idx in indices {
            let original = params.get(id).value().data()[idx];
            params.get_mut(id).value_mut().data_mut()[idx] = original + eps;
            let hi = eval(params);
            params.get_mut(id).value_mut().data_mut()[idx] = original - eps;
            let lo = eval(params);
            params.get_mut(id).value_mut().data_mut()[idx] = original;
            let numeric = (hi? - lo?) / (2.0 * eps);
            let analytic = params.get(id).grad().data()[idx];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), idx));
            }
        }
    }
    Ok(report)
}
