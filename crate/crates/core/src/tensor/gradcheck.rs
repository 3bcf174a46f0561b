use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-4;

/// Largest elementwise relative error between reverse-mode gradients and
/// central differences of the scalar `f` at `points`.
///
/// Relative error is `|a - b| / max(1e-8, |a| + |b|)`. `f` is evaluated twice
/// at the unperturbed point first and must agree bit for bit.
pub fn finite_diff_check<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out)?;
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let first = eval(points)?;
    let second = eval(points)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var)?;
        for e in 0..points[pi].numel() {
            let orig = points[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
