//! Balanced pseudo-labels via entropic optimal transport.
//!
//! Finds the B×K plan `Y ≥ 0` with row sums `1/B` and column sums `1/K`
//! maximizing `Σ Y_ik L_ik + ε H(Y)`. The solution is a diagonal scaling of
//! the kernel `exp(L / ε)`, found by alternating row and column
//! normalization (Sinkhorn-Knopp).

use crate::error::{invalid, Result, SdcError};
use crate::numerics::{argmax, Matrix};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_MAX_ITERS: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub pseudo_labels: Vec<usize>,
    pub iterations_used: usize,
    /// Largest violation of either marginal.
    pub marginal_error: f64,
    /// Entropic dual objective after every full iteration.
    pub dual_trace: Vec<f64>,
}

fn marginal_errors(plan: &Matrix, row_target: f64, col_target: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut cols = vec![0.0; plan.cols()];
    for r in plan.row_iter() {
        let s: f64 = r.iter().sum();
        worst = worst.max((s - row_target).abs());
        cols.iter_mut().zip(r).for_each(|(c, v)| *c += v);
    }
    cols.iter().fold(worst, |w, c| w.max((c - col_target).abs()))
}

/// `ε (Σ a_i ln u_i + Σ b_j ln v_j − Σ u_i Q_ij v_j)`, non-decreasing under
/// exact Sinkhorn updates.
fn dual_objective(q: &Matrix, u: &[f64], v: &[f64], a: f64, b: f64, eps: f64) -> f64 {
    let lin: f64 = u.iter().map(|x| a * x.ln()).sum::<f64>() + v.iter().map(|x| b * x.ln()).sum::<f64>();
    let mass: f64 = q
        .row_iter()
        .zip(u)
        .map(|(r, ui)| ui * r.iter().zip(v).map(|(qij, vj)| qij * vj).sum::<f64>())
        .sum();
    eps * (lin - mass)
}

/// Solves the balanced entropic transport problem for one batch of logits.
pub fn sinkhorn_pseudo_labels(logits: &Matrix, epsilon: f64, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    let (b, k) = logits.shape();
    if b == 0 {
        return invalid("transport needs at least one row");
    }
    if k < 2 {
        return invalid("transport needs at least two categories");
    }
    if !(epsilon > 0.0) {
        return invalid("epsilon must be positive");
    }
    if !logits.is_finite() {
        return Err(SdcError::NonFinite("transport logits".into()));
    }
    let row_target = 1.0 / b as f64;
    let col_target = 1.0 / k as f64;

    // Row-max shift only rescales rows, which the row scaling absorbs.
    let mut q = logits.clone();
    for i in 0..b {
        let r = q.row_mut(i);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        r.iter_mut().for_each(|x| *x = ((*x - max) / epsilon).exp());
    }
    let mut col_mass = vec![0.0; k];
    for r in q.row_iter() {
        col_mass.iter_mut().zip(r).for_each(|(c, v)| *c += v);
    }
    if let Some(j) = col_mass.iter().position(|&c| c == 0.0) {
        return Err(SdcError::KernelUnderflow(format!(
            "column {j} of exp(L/epsilon) is all zero"
        )));
    }

    let mut u = vec![1.0; b];
    let mut v = vec![1.0; k];
    let mut dual_trace = Vec::new();
    let mut iterations_used = 0;
    let mut marginal_error = f64::INFINITY;
    for _ in 0..max_iters {
        iterations_used += 1;
        for i in 0..b {
            let s: f64 = q.row(i).iter().zip(&v).map(|(a, c)| a * c).sum();
            u[i] = row_target / s;
        }
        for (j, vj) in v.iter_mut().enumerate() {
            let s: f64 = (0..b).map(|i| q[(i, j)] * u[i]).sum();
            *vj = col_target / s;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return Err(SdcError::KernelUnderflow("scaling vector degenerated".into()));
        }
        dual_trace.push(dual_objective(&q, &u, &v, row_target, col_target, epsilon));
        // Column sums are exact after the column step; check rows.
        marginal_error = (0..b)
            .map(|i| {
                let s: f64 = q.row(i).iter().zip(&v).map(|(a, c)| a * c).sum::<f64>() * u[i];
                (s - row_target).abs()
            })
            .fold(0.0, f64::max);
        if marginal_error < tol {
            break;
        }
    }
    let mut plan = q;
    for i in 0..b {
        let ui = u[i];
        for (p, vj) in plan.row_mut(i).iter_mut().zip(&v) {
            *p *= ui * vj;
        }
    }
    let marginal_error = marginal_error.max(marginal_errors(&plan, row_target, col_target));
    let pseudo_labels = plan.row_iter().map(argmax).collect();
    Ok(TransportPlan {
        plan,
        pseudo_labels,
        iterations_used,
        marginal_error,
        dual_trace,
    })
}
