//! Central finite-difference checks against tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale, so that
/// round-off in near-zero entries does not register as relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub per_leaf: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::contract("grad_check needs a scalar-valued function"));
    }
    Ok(v.item())
}

/// Compare tape gradients of scalar `f` with `(f(x+h) − f(x−h)) / 2h`.
///
/// With `max_entries = Some(k)`, only `k` evenly spaced entries of each input
/// are perturbed; the tape gradient is still computed in full.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut probe = inputs.to_vec();
    let mut per_leaf = Vec::with_capacity(inputs.len());
    for (li, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v, &tape);
        let n = inputs[li].numel();
        let picks: Vec<usize> = match max_entries {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for idx in picks {
            let orig = inputs[li].data()[idx];
            probe[li].data_mut()[idx] = orig + h;
            let fp = eval_scalar(&f, &probe)?;
            probe[li].data_mut()[idx] = orig - h;
            let fm = eval_scalar(&f, &probe)?;
            probe[li].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[idx], numeric));
        }
        per_leaf.push(worst);
    }
    let max_rel_err = per_leaf.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_leaf,
        max_rel_err,
        tol,
        passed: max_rel_err < tol,
    })
}
