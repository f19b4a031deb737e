use crate::error::{Error, Result};

/// Central-difference gradient check over the given coordinate set.
///
/// `f` evaluates the scalar objective at a parameter vector; `analytic` is the
/// gradient under test, aligned with `params`. Returns the worst relative
/// error max(|analytic - numeric|) / max(1, |analytic|, |numeric|) over the
/// checked coordinates.
pub fn grad_check_at(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
    indices: &[usize],
) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradient entries", params.len()),
            format!("{}", analytic.len()),
        ));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::param("epsilon", format!("{epsilon} must be positive and finite")));
    }
    let mut scratch = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        if i >= params.len() {
            return Err(Error::param("indices", format!("coordinate {i} out of range")));
        }
        let base = params[i];
        scratch[i] = base + epsilon;
        let fp = f(&scratch)?;
        scratch[i] = base - epsilon;
        let fm = f(&scratch)?;
        scratch[i] = base;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric("grad_check", format!("non-finite objective near coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Gradient check over every coordinate.
pub fn grad_check(
    f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<f64> {
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_at(f, params, analytic, epsilon, &all)
}
