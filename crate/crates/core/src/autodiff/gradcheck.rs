//! Central finite-difference checker for analytic gradients.
//!
//! Functions under test report, besides their value, a fingerprint of every
//! piecewise branch they took (ReLU signs, clamp regions, loss dead zones).
//! A coordinate whose fingerprint changes within `2 * epsilon` sits next to a
//! kink; it is excluded from the error statistic and counted separately.

use super::tensor::Real;

/// One evaluation of a scalar function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    /// Hash of the branch pattern; equal patterns mean the same smooth piece.
    pub pattern: u64,
}

/// Incremental FNV-1a fingerprint of branch decisions.
#[derive(Clone, Copy, Debug)]
pub struct BranchPattern(u64);

impl Default for BranchPattern {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl BranchPattern {
    #[inline]
    pub fn push(&mut self, branch: u8) {
        self.0 ^= u64::from(branch);
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor as a fraction of the largest analytic gradient
    /// magnitude, so near-zero coordinates are judged on an absolute scale.
    pub floor: f64,
}

impl GradCheckConfig {
    pub fn single() -> Self {
        Self {
            epsilon: 1e-2,
            tolerance: 1e-3,
            floor: 1e-2,
        }
    }

    pub fn double() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-6,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }

    /// Folds another report into this one (worst case wins).
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst_index.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst_index = other.worst_index;
        }
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.tolerance = self.tolerance.min(other.tolerance);
    }
}

/// Compares `analytic[i]` against central differences of `f` around `x` for
/// each index in `coords`.
pub fn grad_check<T, F>(
    x: &[T],
    analytic: &[f64],
    coords: &[usize],
    mut f: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    T: Real,
    F: FnMut(&[T]) -> Probe,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let base = f(x).pattern;
    let scale = coords
        .iter()
        .map(|&i| analytic[i].abs())
        .fold(0.0, f64::max);
    let floor = (cfg.floor * scale).max(f64::MIN_POSITIVE);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: 0,
        tolerance: cfg.tolerance,
    };
    let mut point = x.to_vec();
    let mut eval_at = |i: usize, offset: f64| -> (Probe, T) {
        let shifted = T::from_f64(x[i].as_f64() + offset);
        point[i] = shifted;
        let probe = f(&point);
        point[i] = x[i];
        (probe, shifted)
    };

    for &i in coords {
        let (plus, x_plus) = eval_at(i, cfg.epsilon);
        let (minus, x_minus) = eval_at(i, -cfg.epsilon);
        let (far_plus, _) = eval_at(i, 2.0 * cfg.epsilon);
        let (far_minus, _) = eval_at(i, -2.0 * cfg.epsilon);
        if [plus, minus, far_plus, far_minus]
            .iter()
            .any(|p| p.pattern != base)
        {
            report.excluded += 1;
            continue;
        }
        // Divide by the step actually representable in T.
        let step = x_plus.as_f64() - x_minus.as_f64();
        let numeric = (plus.value - minus.value) / step;
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report
}
