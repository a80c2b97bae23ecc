//! Central finite-difference comparison against analytic gradients.

use crate::nn::params::ParamStore;

/// Result of comparing an analytic gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error `|a - n| / max(|a|, |n|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Perturbs each value of `store` by `±step` and compares `(f(+) - f(-)) / 2step`
/// with `analytic[i]`. `indices` restricts the check to a subset.
pub fn check_store<F>(store: &mut ParamStore, analytic: &[f64], step: f64, indices: Option<&[usize]>, mut loss: F) -> GradCheck
where
    F: FnMut(&ParamStore) -> f64,
{
    assert_eq!(analytic.len(), store.len(), "analytic gradient length");
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..store.len()).collect();
            &all
        }
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: idx.len(),
    };
    for &i in idx {
        let orig = store.values()[i];
        store.values_mut()[i] = orig + step;
        let up = loss(store);
        store.values_mut()[i] = orig - step;
        let down = loss(store);
        store.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

/// Finite-difference gradient of a function of a plain vector.
pub fn numeric_gradient<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}
