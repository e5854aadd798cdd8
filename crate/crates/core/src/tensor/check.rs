use std::fmt;

use super::{Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates, evenly strided over the point.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-5,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub element_count: usize,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<34} {:>6} {:>12.3e}  {}",
            self.op_name,
            self.element_count,
            self.max_relative_error,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        if let Some(d) = &self.diagnostic {
            write!(f, "  ({d})")?;
        }
        Ok(())
    }
}

fn selected_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m > 0 && m < n => {
            let stride = n.div_ceil(m);
            (0..n).step_by(stride).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The relative error per coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn finite_diff_gradcheck<F>(name: &str, f: F, point: &Tensor<f64>, opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let fail = |msg: String, count: usize| GradCheckReport {
        op_name: name.to_string(),
        max_relative_error: f64::INFINITY,
        element_count: count,
        passed: false,
        diagnostic: Some(msg),
    };

    let shape = point.shape().to_vec();
    let base = point.to_vec();
    let x = Tensor::param(&shape, base.clone()).expect("point shape is valid");
    let analytic = match f(&x).and_then(|loss| {
        if loss.numel() != 1 {
            return Err(super::TensorError::NonScalar(loss.shape().to_vec()));
        }
        loss.backward()?;
        Ok(())
    }) {
        Ok(()) => x.grad().unwrap_or_else(|| vec![0.0; base.len()]),
        Err(e) => return fail(format!("forward failed: {e}"), 0),
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::constant(&shape, data)?;
        Ok(f(&t)?.item())
    };

    let indices = selected_indices(base.len(), opts.max_elements);
    let mut max_err: f64 = 0.0;
    for &i in &indices {
        let mut plus = base.clone();
        plus[i] += opts.step;
        let mut minus = base.clone();
        minus[i] -= opts.step;
        let numeric = match (eval(plus), eval(minus)) {
            (Ok(a), Ok(b)) => (a - b) / (2.0 * opts.step),
            (Err(e), _) | (_, Err(e)) => return fail(format!("perturbed forward failed: {e}"), indices.len()),
        };
        if !numeric.is_finite() {
            return fail(format!("non-finite numeric gradient at element {i}"), indices.len());
        }
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err.is_nan() {
            return fail(format!("non-finite analytic gradient at element {i}"), indices.len());
        }
        max_err = max_err.max(err);
    }

    GradCheckReport {
        op_name: name.to_string(),
        max_relative_error: max_err,
        element_count: indices.len(),
        passed: max_err <= opts.tolerance,
        diagnostic: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let p = Tensor::constant(&[3], vec![0.4, -2.0, 7.0]).unwrap();
        let r = finite_diff_gradcheck("sum", |x| Ok(x.sum_all()), &p, GradCheckOptions::default());
        assert!(r.passed);
        assert!(r.max_relative_error < 1e-10);
        assert_eq!(r.element_count, 3);
    }

    #[test]
    fn squares() {
        let p = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        let r = finite_diff_gradcheck("sq", |x| Ok(x.square().sum_all()), &p, GradCheckOptions::default());
        assert!(r.passed, "{r}");
    }

    #[test]
    fn non_finite_numeric_fails() {
        let p = Tensor::constant(&[1], vec![0.0]).unwrap();
        // ln(x) at 0 from the left is -inf.
        let r = finite_diff_gradcheck(
            "ln",
            |x| Ok(x.log_clamped(0.0).sum_all()),
            &p,
            GradCheckOptions::default(),
        );
        assert!(!r.passed);
        assert!(r.diagnostic.unwrap().contains("non-finite"));
    }

    #[test]
    fn subsampling() {
        assert_eq!(selected_indices(10, Some(3)), vec![0, 4, 8]);
        assert_eq!(selected_indices(3, Some(5)), vec![0, 1, 2]);
    }
}
