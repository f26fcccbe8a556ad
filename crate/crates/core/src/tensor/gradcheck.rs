//! Finite-difference verification of backward rules.

use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
    /// Set when the check could not be carried out (non-finite values,
    /// non-scalar output, evaluation error).
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst_index: None,
            passed: false,
            failure: Some(msg),
        }
    }
}

/// Compares the reverse-mode gradient of scalar `f` at `x` against central
/// differences with step `h`.
pub fn grad_check<T, F>(f: F, x: &[T], shape: &[usize], h: f64, tol: f64) -> GradCheckReport
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let eval = |v: Vec<T>| -> std::result::Result<f64, String> {
        let t = Tensor::new(v, shape).map_err(|e| e.to_string())?;
        let y = f(&t).map_err(|e| e.to_string())?;
        if y.numel() != 1 {
            return Err(format!("function output has shape {:?}", y.shape()));
        }
        Ok(y.item().f64())
    };

    let xp = match Tensor::param(x.to_vec(), shape) {
        Ok(t) => t,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };
    let analytic = match f(&xp).and_then(|y| {
        y.backward()?;
        Ok(y)
    }) {
        Ok(y) if !y.item().f64().is_finite() => return GradCheckReport::failed("non-finite function value".into()),
        Ok(_) => xp.grad().unwrap_or_else(|| vec![T::zero(); x.len()]),
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };

    let mut worst = 0.0f64;
    let mut worst_index = None;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += T::of(h);
        let mut minus = x.to_vec();
        minus[i] -= T::of(h);
        let (fp, fm) = match (eval(plus), eval(minus)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(e),
        };
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i].f64();
        if !numeric.is_finite() || !a.is_finite() {
            return GradCheckReport::failed(format!("non-finite gradient at index {i}"));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > worst || worst_index.is_none() {
            worst = rel;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_error: worst,
        worst_index,
        passed: worst <= tol,
        failure: None,
    }
}
