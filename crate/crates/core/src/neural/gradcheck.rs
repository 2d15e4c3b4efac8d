/// Worst coordinate found by a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let worst = if other.max_rel_error > self.max_rel_error { other } else { self };
        GradCheckReport {
            checked: self.checked + other.checked,
            ..worst
        }
    }

    pub fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst_coord: 0,
            checked: 0,
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences `(f(x+h) - f(x-h)) / 2h`
/// at every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, analytic, step, &coords)
}

/// [`grad_check`] restricted to the given coordinates.
pub fn grad_check_coords<F>(mut f: F, point: &[f64], analytic: &[f64], step: f64, coords: &[usize]) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    let mut x = point.to_vec();
    let mut report = GradCheckReport::empty();
    for &k in coords {
        let orig = x[k];
        x[k] = orig + step;
        let plus = f(&x);
        x[k] = orig - step;
        let minus = f(&x);
        x[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[k], numeric);
        if report.checked == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = k;
        }
        report.checked += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let report = grad_check(|p| p.iter().map(|v| v * v).sum(), &x, &grad, 1e-5);
        assert_eq!(report.checked, 50);
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let report = grad_check(|p| p[0] * p[1], &x, &[2.0, 2.0], 1e-5);
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst_coord, 1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
