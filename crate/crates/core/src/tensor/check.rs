//! Value-level cosine similarity and the central finite-difference oracle
//! used to verify autodiff gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Cosine similarity `u.v / (|u||v|)`, clamped to `[-1, 1]`.
///
/// Bitwise-identical inputs short-circuit to exactly 1.0 so that
/// self-similarity is exact. Zero-norm inputs are an error, never a silent 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            op: "cosine",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate(
            "cosine of a zero-norm vector is undefined".into(),
        ));
    }
    if u == v {
        return Ok(1.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Compares the autodiff gradient of `f` at `x0` against central finite
/// differences with step `eps`, returning the maximum relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(f: F, shape: &[usize], x0: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }

    let eval = |x: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.leaf(shape, x.to_vec(), false)?;
        f(&tape, &leaf)?.scalar()
    };

    let tape = Tape::new();
    let leaf = tape.leaf(shape, x0.to_vec(), true)?;
    let loss = f(&tape, &leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x0.len()]);

    let mut worst = 0.0_f64;
    let mut probe = x0.to_vec();
    for i in 0..x0.len() {
        let saved = probe[i];
        probe[i] = saved + eps;
        let plus = eval(&probe)?;
        probe[i] = saved - eps;
        let minus = eval(&probe)?;
        probe[i] = saved;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
