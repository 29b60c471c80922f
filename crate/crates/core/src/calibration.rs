//! Logit calibration driven by the frozen biased model.
//!
//! For an unlabeled instance with trainable logits `L_θ ∈ R^K` and biased
//! logits `L_bias ∈ R^M`:
//!
//! ```text
//! known  (0..M):  L_θ[..M] - α · L_bias              bias mitigation
//! novel  (M..K):  L_θ[M..] + α · Tᵀ L_bias           confusion mitigation
//! ```
//!
//! `T` is the M×N transfer matrix of known-to-novel prototype similarities,
//! softmax-normalized per row. `α_i = β · sigmoid(E_i − E_max)` where `E_i`
//! is the entropy of the biased softmax and `E_max` the largest entropy in
//! the current batch, so confidently known instances are barely adjusted.

use serde::Serialize;

use crate::error::{invalid, Result, SdcError};
use crate::model::BiasedModel;
use crate::numerics::{dot, entropy, sigmoid, softmax, softmax_in_place, Matrix};

/// Which halves of the calibration to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CalibrationFlags {
    pub bias_mitigation: bool,
    pub confusion_mitigation: bool,
}

impl Default for CalibrationFlags {
    fn default() -> Self {
        Self {
            bias_mitigation: true,
            confusion_mitigation: true,
        }
    }
}

/// Cached biased outputs for the unlabeled rows plus the transfer matrix.
#[derive(Debug, Clone)]
pub struct CalibrationState {
    /// n×M, row `i` belongs to the i-th unlabeled row.
    pub biased_logits: Matrix,
    pub entropies: Vec<f64>,
    /// M×N, rows sum to one.
    pub transfer: Matrix,
    pub beta: f64,
}

impl CalibrationState {
    pub fn num_known(&self) -> usize {
        self.transfer.rows()
    }

    pub fn num_novel(&self) -> usize {
        self.transfer.cols()
    }

    /// Recomputes `T` from new prototypes, e.g. current classifier rows.
    pub fn refresh_transfer(&mut self, prototypes: &Matrix) -> Result<()> {
        let t = transfer_matrix(prototypes, self.num_known())?;
        if t.shape() != self.transfer.shape() {
            return invalid("refreshed transfer matrix changed shape");
        }
        self.transfer = t;
        Ok(())
    }
}

/// Row-softmax of the known×novel prototype dot products.
pub fn transfer_matrix(prototypes: &Matrix, num_known: usize) -> Result<Matrix> {
    let k = prototypes.rows();
    if num_known == 0 || num_known >= k {
        return invalid(format!("transfer matrix needs 0 < M < K, got M = {num_known}, K = {k}"));
    }
    let n = k - num_known;
    let mut t = Matrix::zeros(num_known, n);
    for m in 0..num_known {
        let row = t.row_mut(m);
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(prototypes.row(m), prototypes.row(num_known + j));
        }
        softmax_in_place(row);
    }
    Ok(t)
}

/// Runs the frozen model once over the unlabeled rows and caches its
/// logits and entropies.
pub fn build_state(
    biased: &BiasedModel,
    unlabeled: &Matrix,
    prototypes: &Matrix,
    beta: f64,
) -> Result<CalibrationState> {
    if !(beta > 0.0) {
        return invalid("beta must be positive");
    }
    let m = biased.num_known();
    if m == 0 || prototypes.rows() <= m {
        return invalid("calibration needs at least one known and one novel category");
    }
    let transfer = transfer_matrix(prototypes, m)?;
    let (_, biased_logits) = biased.forward(unlabeled)?;
    if !biased_logits.is_finite() {
        return Err(SdcError::NonFinite("biased logits".into()));
    }
    let entropies = biased_logits
        .row_iter()
        .map(|r| softmax(r).and_then(|p| entropy(&p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationState {
        biased_logits,
        entropies,
        transfer,
        beta,
    })
}

/// `α_i = β · sigmoid(E_i − max_j E_j)` over one batch.
pub fn compute_alpha(entropies: &[f64], beta: f64) -> Result<Vec<f64>> {
    if entropies.is_empty() {
        return invalid("alpha needs a non-empty batch");
    }
    let e_max = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(entropies.iter().map(|&e| beta * sigmoid(e - e_max)).collect())
}

/// Calibrated logits for one instance.
pub fn calibrate(original: &[f64], biased: &[f64], alpha: f64, transfer: &Matrix) -> Result<Vec<f64>> {
    calibrate_with(original, biased, alpha, transfer, CalibrationFlags::default())
}

/// [`calibrate`] with either half switched off.
pub fn calibrate_with(
    original: &[f64],
    biased: &[f64],
    alpha: f64,
    transfer: &Matrix,
    flags: CalibrationFlags,
) -> Result<Vec<f64>> {
    let (m, n) = transfer.shape();
    if biased.len() != m {
        return Err(SdcError::DimensionMismatch {
            expected: m,
            got: biased.len(),
        });
    }
    if original.len() != m + n {
        return Err(SdcError::DimensionMismatch {
            expected: m + n,
            got: original.len(),
        });
    }
    if !(alpha >= 0.0) {
        return invalid("alpha must be non-negative");
    }
    let mut out = original.to_vec();
    if flags.bias_mitigation {
        for (o, b) in out[..m].iter_mut().zip(biased) {
            *o -= alpha * b;
        }
    }
    if flags.confusion_mitigation {
        for j in 0..n {
            let transferred: f64 = (0..m).map(|k| transfer[(k, j)] * biased[k]).sum();
            out[m + j] += alpha * transferred;
        }
    }
    Ok(out)
}
