//! Central finite differences for checking analytic gradients.

use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Central-difference estimate of `∂f/∂x[i]` for each probe index.
pub fn central_differences(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    probes: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(probes.len());
    let mut work = x.clone();
    for &i in probes {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + step;
        let up = f(&work)?;
        work.data_mut()[i] = orig - step;
        let down = f(&work)?;
        work.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `|a − n| ≤ rel · max(|a|, |n|) + abs`.
pub fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + abs
}

/// First mismatching probe, if any, as `(probe, analytic, numeric)`.
pub fn first_mismatch(
    analytic: &[f64],
    numeric: &[f64],
    probes: &[usize],
    rel: f64,
    abs: f64,
) -> Option<(usize, f64, f64)> {
    probes
        .iter()
        .zip(analytic.iter().zip(numeric))
        .find(|(_, (a, n))| !close(**a, **n, rel, abs))
        .map(|(&p, (&a, &n))| (p, a, n))
}
