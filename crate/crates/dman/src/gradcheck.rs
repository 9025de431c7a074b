//! Central finite-difference gradient verification.
//!
//! `grad_check` perturbs every entry of every parameter matrix by ±eps,
//! re-evaluates the loss closure, and compares the central difference
//! against the supplied analytic gradient. The closure receives the full
//! parameter list each call, so stop-gradient semantics are the caller's
//! responsibility: anything the tape treats as constant must be baked into
//! the closure, not passed as a parameter.

use crate::error::{DmanError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with an absolute floor so near-zero pairs compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn grad_check<F>(
    mut f: F,
    params: &[Matrix],
    analytic: &[Matrix],
    names: &[&str],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(params.len(), analytic.len());
    assert_eq!(params.len(), names.len());

    let mut work: Vec<Matrix> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());

    for (p, name) in names.iter().enumerate() {
        assert_eq!(
            params[p].shape(),
            analytic[p].shape(),
            "analytic gradient shape mismatch for {name}"
        );
        let mut worst = GradCheckEntry {
            name: name.to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        let n = params[p].rows() * params[p].cols();
        for idx in 0..n {
            let base = params[p].as_slice()[idx];

            work[p].as_mut_slice()[idx] = base + eps;
            let up = f(&work)?;
            work[p].as_mut_slice()[idx] = base - eps;
            let down = f(&work)?;
            work[p].as_mut_slice()[idx] = base;

            if !up.is_finite() || !down.is_finite() {
                return Err(DmanError::NonFinite {
                    context: format!("grad_check evaluation of {name}[{idx}]"),
                });
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].as_slice()[idx];
            let e = rel_err(a, numeric);
            if e > worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_index = idx;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = numeric;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { entries })
}
