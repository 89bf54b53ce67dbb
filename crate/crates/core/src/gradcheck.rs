//! Central finite differences for checking analytic gradients.

use crate::exec::{self, ExecPolicy};

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every `i` in `coords`.
pub fn central_difference<F>(f: F, x: &[f64], coords: &[usize], h: f64, policy: ExecPolicy) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    exec::map_indexed(policy, coords.len(), |j| {
        let i = coords[j];
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub within: usize,
    pub max_relative_error: f64,
}

impl GradCheck {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within as f64 / self.checked as f64
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Counts coordinates whose relative error is at most `tol`.
pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64, floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let errs: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n, floor))
        .collect();
    GradCheck {
        checked: errs.len(),
        within: errs.iter().filter(|e| **e <= tol).count(),
        max_relative_error: errs.iter().cloned().fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let f = |x: &[f64]| x[0].powi(3) + 2.0 * x[1];
        let x = [1.5, -0.3];
        let fd = central_difference(f, &x, &[0, 1], 1e-5, ExecPolicy::Parallel);
        let c = compare(&[3.0 * 1.5 * 1.5, 2.0], &fd, 1e-6, 1e-12);
        assert_eq!(c.within, 2);
    }

    #[test]
    fn mismatch_is_counted() {
        let c = compare(&[1.0, 1.0], &[1.0, 2.0], 0.05, 1e-12);
        assert_eq!(c.within, 1);
        assert!((c.max_relative_error - 0.5).abs() < 1e-12);
    }
}
