//! Central finite-difference gradient checking.
//!
//! These routines only evaluate the scalar function; they never touch the
//! tape, so they serve as an independent oracle for analytic gradients.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences.
pub fn finite_difference(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - step;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Outcome of checking one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `||a - n|| / max(||a||, ||n||)`; zero when both are numerically zero.
    pub rel_error: f64,
}

impl GroupCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Below this norm a group's gradient is treated as identically zero and
/// compared absolutely instead of relatively.
pub const ZERO_NORM: f64 = 1e-9;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < ZERO_NORM {
        if diff < ZERO_NORM {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

/// Compares analytic gradients against central differences for each named
/// trainable parameter in `store`.
///
/// `loss` evaluates the scalar objective for a store. At most
/// `max_entries` evenly spaced entries per group are probed.
pub fn check_params(
    store: &ParamStore,
    analytic: &BTreeMap<String, Matrix>,
    names: &[String],
    step: f64,
    max_entries: usize,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Vec<GroupCheck> {
    let mut out = Vec::new();
    let mut probe = store.clone();
    for name in names {
        let base = store.value(name).expect("checked parameter exists").clone();
        let n = base.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        let a = analytic.get(name).cloned().unwrap_or_else(|| Matrix::zeros(base.rows(), base.cols()));
        let mut an = Vec::with_capacity(idx.len());
        let mut nu = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut m = base.clone();
            m.as_mut_slice()[i] = base.as_slice()[i] + step;
            probe.set_value(name, m.clone()).expect("same shape");
            let up = loss(&probe);
            m.as_mut_slice()[i] = base.as_slice()[i] - step;
            probe.set_value(name, m).expect("same shape");
            let down = loss(&probe);
            nu.push((up - down) / (2.0 * step));
            an.push(a.as_slice()[i]);
        }
        probe.set_value(name, base).expect("same shape");
        out.push(GroupCheck {
            name: name.clone(),
            checked: idx.len(),
            analytic_norm: an.iter().map(|x| x * x).sum::<f64>().sqrt(),
            numeric_norm: nu.iter().map(|x| x * x).sum::<f64>().sqrt(),
            rel_error: relative_error(&an, &nu),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_quadratic() {
        let x = Matrix::from_rows(&[[1.0, -2.0]]);
        let g = finite_difference(&x, 1e-5, |m| m.as_slice().iter().map(|v| v * v).sum());
        assert!((g.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((g.get(0, 1) + 4.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[1.0]), 1.0);
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.0 + 1e-9]) < 1e-9);
    }
}
