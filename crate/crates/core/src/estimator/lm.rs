//! Levenberg-Marquardt driver and dense Schur-complement helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A nonlinear least-squares problem with cost `0.5 * sum ||r_i||^2`
/// (robustified where applicable).
pub trait Problem {
    type Snapshot;

    /// Cost at the current estimate.
    fn cost(&mut self) -> Result<f64>;
    /// Builds the normal equations at the current estimate and returns the
    /// cost there. May relinearize internal quantities.
    fn linearize(&mut self) -> Result<f64>;
    /// Solves `(H + lambda D) dx = -b` for the most recent linearization.
    fn solve(&mut self, lambda: f64) -> Result<DVector<f64>>;
    fn apply(&mut self, dx: &DVector<f64>);
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Relative cost decrease below which the solve stops.
    pub convergence_tol: f64,
    /// Largest step component below which the solve stops.
    pub min_step: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            initial_lambda: 1e-4,
            lambda_min: 1e-9,
            lambda_max: 1e4,
            convergence_tol: 1e-6,
            min_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LmReport {
    pub iterations: usize,
    pub accepted: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

/// Cost below which a problem is considered solved exactly.
const NEGLIGIBLE_COST: f64 = 1e-24;

pub fn levenberg_marquardt<P: Problem>(problem: &mut P, settings: &LmSettings) -> Result<LmReport> {
    let mut lambda = settings.initial_lambda.clamp(settings.lambda_min, settings.lambda_max);
    let mut cost = problem.linearize()?;
    let mut report = LmReport { initial_cost: cost, final_cost: cost, ..Default::default() };
    let mut need_linearize = false;
    while report.iterations < settings.max_iterations {
        if cost < NEGLIGIBLE_COST {
            report.converged = true;
            break;
        }
        if need_linearize {
            cost = problem.linearize()?;
            need_linearize = false;
        }
        report.iterations += 1;
        let dx = match problem.solve(lambda) {
            Ok(dx) => dx,
            Err(Error::Numerical(_)) if lambda < settings.lambda_max => {
                lambda = (lambda * 10.0).min(settings.lambda_max);
                continue;
            }
            Err(e) => return Err(e),
        };
        let snapshot = problem.snapshot();
        problem.apply(&dx);
        let new_cost = problem.cost()?;
        if new_cost <= cost {
            report.accepted += 1;
            let decrease = cost - new_cost;
            cost = new_cost;
            lambda = (lambda / 10.0).max(settings.lambda_min);
            need_linearize = true;
            if decrease <= settings.convergence_tol * cost.max(NEGLIGIBLE_COST) || dx.amax() < settings.min_step {
                report.converged = true;
                break;
            }
        } else {
            problem.restore(snapshot);
            // at the noise floor of the cost evaluation
            if new_cost - cost <= settings.convergence_tol * cost {
                report.converged = true;
                break;
            }
            if lambda >= settings.lambda_max {
                break;
            }
            lambda = (lambda * 10.0).min(settings.lambda_max);
        }
    }
    report.final_cost = cost;
    Ok(report)
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix.
pub fn spd_pseudo_inverse(h: &DMatrix<f64>) -> DMatrix<f64> {
    if h.nrows() == 0 {
        return h.clone();
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let tol = (max * 1e-14).max(1e-300);
    let inv = eig.eigenvalues.map(|e| if e > tol { 1.0 / e } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Marginalizes the variables `marg` out of the quadratic `(h, b)`, leaving a
/// quadratic over `keep` in the given order.
pub fn schur_complement(h: &DMatrix<f64>, b: &DVector<f64>, marg: &[usize], keep: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let hmm = h.select_rows(marg).select_columns(marg);
    let hkm = h.select_rows(keep).select_columns(marg);
    let hkk = h.select_rows(keep).select_columns(keep);
    let bm = b.select_rows(marg);
    let bk = b.select_rows(keep);
    let inv = spd_pseudo_inverse(&hmm);
    let k = &hkm * inv;
    let h_new = &hkk - &k * hkm.transpose();
    let b_new = bk - k * bm;
    ((&h_new + h_new.transpose()) * 0.5, b_new)
}

/// Square-root factor of a quadratic: returns `(j0, r0)` with
/// `j0^T j0 = h` and `j0^T r0 = b`.
pub fn prior_from_information(h: &DMatrix<f64>, b: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let tol = (max * 1e-14).max(1e-300);
    let kept: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let mut j0 = DMatrix::zeros(kept.len(), n);
    let mut r0 = DVector::zeros(kept.len());
    for (row, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        j0.row_mut(row).copy_from(&(v.transpose() * s));
        r0[row] = v.dot(b) / s;
    }
    (j0, r0)
}

/// Cholesky solve of `h x = rhs`.
pub fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?;
    Ok(chol.solve(rhs))
}
