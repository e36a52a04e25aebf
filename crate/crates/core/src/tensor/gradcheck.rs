use super::{Result, Tensor, TensorError};

/// Outcome of comparing the tape gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / (|analytic| + |numeric| + 1e-12)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// ‖analytic − numeric‖₂ / (‖analytic‖₂ + ‖numeric‖₂ + 1e-12)
    pub norm_rel_error: f64,
    pub diff_norm: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Checks the reverse-mode gradient of a scalar function `f` at `x`
/// against central differences with step `eps`.
///
/// `f` is evaluated twice at `x` without a tape first; differing results
/// are reported as [`TensorError::NonDeterministic`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Argument(format!("eps must be positive, got {eps}")));
    }
    let shape = x.shape().to_vec();
    let base = x.data().to_vec();
    let eval = |values: Vec<f64>| -> Result<f64> {
        let out = f(&Tensor::new(&shape, values)?)?;
        if out.numel() != 1 {
            return Err(TensorError::Rank(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    let first = eval(base.clone())?;
    let second = eval(base.clone())?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic(first, second));
    }

    let leaf = Tensor::param(&shape, base.clone())?;
    let out = f(&leaf)?;
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: base.len(),
        norm_rel_error: 0.0,
        diff_norm: 0.0,
        analytic_norm: 0.0,
        numeric_norm: 0.0,
    };
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: rel.max(report.max_rel_error),
                worst_index: i,
                analytic: a,
                numeric,
                coordinates: base.len(),
                ..report
            };
        }
    }
    report.diff_norm = diff2.sqrt();
    report.analytic_norm = a2.sqrt();
    report.numeric_norm = n2.sqrt();
    report.norm_rel_error = report.diff_norm / (report.analytic_norm + report.numeric_norm + 1e-12);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[3], vec![0.2, -1.0, 4.0]).unwrap();
        let r = finite_difference_check(|x| Ok(x.sum_all()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn exp_sum() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let r = finite_difference_check(|x| Ok(x.exp().sum_all()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0u32);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = finite_difference_check(
            |x| {
                calls.set(calls.get() + 1);
                Ok(x.scale(calls.get() as f64).sum_all())
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic(..)));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(finite_difference_check(|x| Ok(x.sum_all()), &x, 0.0).is_err());
    }
}
