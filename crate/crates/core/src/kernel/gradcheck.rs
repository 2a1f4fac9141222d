//! Central finite-difference gradient checking (64-bit).

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    pub fn merge(self, other: Self) -> Self {
        let (max_rel_err, worst_index) = if other.max_rel_err > self.max_rel_err {
            (other.max_rel_err, other.worst_index)
        } else {
            (self.max_rel_err, self.worst_index)
        };
        Self {
            max_rel_err,
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            worst_index,
            checked: self.checked + other.checked,
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            checked: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many entries, evenly strided through the input.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_entries: usize::MAX,
        }
    }
}

/// Compares `analytic` against central differences of `f` around `x`.
pub fn grad_check(x: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64) -> GradCheckReport {
    grad_check_with(x, analytic, GradCheckOptions::default(), f)
}

pub fn grad_check_with(
    x: &[f64],
    analytic: &[f64],
    opts: GradCheckOptions,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let stride = x.len().div_ceil(opts.max_entries.max(1)).max(1);
    let mut probe = x.to_vec();
    let mut report = GradCheckReport::default();
    for i in (0..x.len()).step_by(stride) {
        let orig = probe[i];
        probe[i] = orig + opts.step;
        let up = f(&probe);
        probe[i] = orig - opts.step;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(opts.floor);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_passes_and_wrong_one_fails() {
        let x = [0.3, -1.2, 2.0];
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1] + v[2].sin();
        let good = [0.6, 3.0, 2.0f64.cos()];
        assert!(grad_check(&x, &good, f).passes(1e-6));
        let bad = [0.6, 3.1, 2.0f64.cos()];
        let r = grad_check(&x, &bad, f);
        assert!(!r.passes(1e-6));
        assert_eq!(r.worst_index, 1);
    }
}
