//! Central finite-difference verification of analytic gradients.
//!
//! Used by the unit tests of every differentiable module and by the
//! acceptance suite. Relative error uses `max(|analytic|, |numeric|)` as the
//! denominator with a small floor; coordinates where both sides sit below the
//! finite-difference resolution are auto-passed.

use crate::linalg::Mat;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(param index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Sample up to `max_coords` evenly spaced coordinates of a parameter.
fn coords(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        (0..len).collect()
    } else {
        (0..max_coords).map(|k| k * len / max_coords).collect()
    }
}

/// Compare `analytic` gradients of `f` at `params` against central
/// differences with step `eps`.
pub fn finite_diff_check(
    params: &[Mat],
    analytic: &[Mat],
    f: &mut dyn FnMut(&[Mat]) -> f64,
    eps: f64,
    max_coords: usize,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    // Below this magnitude both sides are dominated by FD truncation noise.
    let resolution = 1e-7;
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    let mut work: Vec<Mat> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        assert_eq!(p.shape(), analytic[pi].shape(), "gradient shape mismatch at param {pi}");
        for ci in coords(p.len(), max_coords) {
            let orig = work[pi].as_slice()[ci];
            work[pi].as_mut_slice()[ci] = orig + eps;
            let fp = f(&work);
            work[pi].as_mut_slice()[ci] = orig - eps;
            let fm = f(&work);
            work[pi].as_mut_slice()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].as_slice()[ci];
            report.checked += 1;
            if a.abs() < resolution && numeric.abs() < resolution {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(resolution);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    report
}
