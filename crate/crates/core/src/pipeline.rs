//! End-to-end discovery: pre-train, initialize prototypes, then train on
//! calibrated, transport-balanced pseudo-labels.

use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{build_state, calibrate_with, compute_alpha, CalibrationFlags, CalibrationState};
use crate::clustering::{align_prototypes, kmeans};
use crate::data::{EmbeddingDataset, SplitTag};
use crate::error::{invalid, Result, SdcError};
use crate::evaluation::{
    clustering_accuracy, compute_metrics, entropy_report, hungarian_map, EntropySummary, InferenceMode, MetricsReport,
};
use crate::model::{
    discovery_loss, dropout_mask, init_trainable, pretrain_biased, AdamW, AdamWConfig, BiasedModel, EncoderSpec,
    PretrainConfig, StepInputs, TrainableModel,
};
use crate::numerics::{l2_normalize_rows, Matrix};
use crate::transport::{sinkhorn_pseudo_labels, DEFAULT_MAX_ITERS, DEFAULT_TOL};

const KMEANS_ITERS: usize = 300;
const KMEANS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Identity,
    /// One tanh layer of width `hidden_dim`.
    Hidden,
}

/// Every knob of a discovery run. Loaded from flat `key = value` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub beta: f64,
    pub lambda1_start: f64,
    pub lambda1_end: f64,
    pub lambda2: f64,
    pub epochs_pretrain: usize,
    pub epochs_train: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_pretrain: f64,
    pub weight_decay: f64,
    pub epsilon_ot: f64,
    pub temperature: f64,
    pub dropout: f64,
    pub encoder: EncoderKind,
    pub hidden_dim: usize,
    pub seed: u64,
    pub k_override: Option<usize>,
    pub mode: InferenceMode,
    /// Recompute the transfer matrix from the current classifier each epoch.
    pub refresh_transfer: bool,
    pub disable_cbm: bool,
    pub disable_ccm: bool,
    /// Constant `α = β`: the entropy factor is dropped.
    pub disable_weighting: bool,
    /// `α = 0`: pseudo-labels from uncalibrated logits.
    pub disable_logit_adjustment: bool,
    pub disable_contrastive: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            lambda1_start: 0.6,
            lambda1_end: 0.7,
            lambda2: 0.01,
            epochs_pretrain: 100,
            epochs_train: 30,
            batch_size: 128,
            lr: 1e-3,
            lr_pretrain: 1e-3,
            weight_decay: 0.01,
            epsilon_ot: 0.05,
            temperature: 0.07,
            dropout: 0.1,
            encoder: EncoderKind::Hidden,
            hidden_dim: 32,
            seed: 0,
            k_override: None,
            mode: InferenceMode::Classifier,
            refresh_transfer: false,
            disable_cbm: false,
            disable_ccm: false,
            disable_weighting: false,
            disable_logit_adjustment: false,
            disable_contrastive: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| SdcError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SdcError::Config(m.to_string()));
        if !(0.0 <= self.lambda1_start && self.lambda1_start <= self.lambda1_end && self.lambda1_end <= 1.0) {
            return fail("need 0 <= lambda1_start <= lambda1_end <= 1");
        }
        if !(self.lambda2 >= 0.0) {
            return fail("lambda2 must be non-negative");
        }
        if !(self.beta > 0.0) {
            return fail("beta must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr_pretrain > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(self.epsilon_ot > 0.0) {
            return fail("epsilon_ot must be positive");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.encoder == EncoderKind::Hidden && self.hidden_dim == 0 {
            return fail("hidden_dim must be positive");
        }
        if self.k_override == Some(0) {
            return fail("k_override must be positive");
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        match self.encoder {
            EncoderKind::Identity => EncoderSpec::Identity,
            EncoderKind::Hidden => EncoderSpec::Hidden(self.hidden_dim),
        }
    }

    pub fn calibration_flags(&self) -> CalibrationFlags {
        CalibrationFlags {
            bias_mitigation: !self.disable_cbm,
            confusion_mitigation: !self.disable_ccm,
        }
    }

    /// λ₁ at a zero-based training epoch: linear from start to end.
    pub fn lambda1_at(&self, epoch: usize) -> f64 {
        if self.epochs_train <= 1 {
            return self.lambda1_start;
        }
        let t = (epoch as f64 / (self.epochs_train - 1) as f64).clamp(0.0, 1.0);
        self.lambda1_start + (self.lambda1_end - self.lambda1_start) * t
    }

    /// Per-instance calibration strengths for one batch of entropies.
    pub fn alphas(&self, entropies: &[f64]) -> Result<Vec<f64>> {
        if self.disable_logit_adjustment {
            Ok(vec![0.0; entropies.len()])
        } else if self.disable_weighting {
            Ok(vec![self.beta; entropies.len()])
        } else {
            compute_alpha(entropies, self.beta)
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs_pretrain,
            batch_size: self.batch_size,
            encoder: self.encoder_spec(),
            dropout_rate: self.dropout,
            optimizer: AdamWConfig {
                lr: self.lr_pretrain,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            seed: self.seed,
        }
    }

    fn sub_seed(&self, stream: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub sup_loss: f64,
    pub cont_loss: f64,
    pub total_loss: f64,
    /// Hungarian-matched accuracy of this epoch's pseudo-labels against the
    /// hidden labels of the unlabeled rows; `None` if some are unknown.
    pub pseudo_label_acc_all: Option<f64>,
    pub pseudo_label_acc_novel: Option<f64>,
    pub lambda1: f64,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

#[derive(Debug, Clone)]
pub struct DiscoveryOutcome {
    pub model: TrainableModel,
    pub biased: BiasedModel,
    pub report: MetricsReport,
    pub log: Vec<EpochLog>,
    /// Biased-model entropy of unlabeled rows grouped by hidden truth.
    pub entropy: Option<EntropySummary>,
    pub warnings: Vec<String>,
}

/// Hard predictions for a batch.
///
/// Clustering mode runs KMeans with `k` clusters over the encoder features
/// of the whole batch; its ids are arbitrary and must be matched before
/// scoring.
pub fn infer(model: &TrainableModel, x: &Matrix, mode: InferenceMode, k: usize, seed: u64) -> Result<Vec<usize>> {
    match mode {
        InferenceMode::Classifier => model.predict(x),
        InferenceMode::Clustering => {
            if x.rows() < k {
                return invalid(format!("clustering {} rows into {k} clusters", x.rows()));
            }
            let (features, _) = model.network.infer(x)?;
            Ok(kmeans(&features, k, KMEANS_ITERS, KMEANS_TOL, seed)?.assignments)
        }
    }
}

/// Scores `model` on the test split. Predictions are matched to categories
/// jointly over all categories.
pub fn evaluate(
    model: &TrainableModel,
    data: &EmbeddingDataset,
    mode: InferenceMode,
    seed: u64,
) -> Result<MetricsReport> {
    let rows = data.indices(SplitTag::Test);
    if rows.is_empty() {
        return invalid("dataset has no test rows");
    }
    let x = data.features().select_rows(&rows);
    let preds = infer(model, &x, mode, model.num_classes(), seed)?;
    let gts = data.labels_at(&rows)?;
    let mapping = hungarian_map(&preds, &gts, data.label_space().total())?;
    let gts: Vec<Option<usize>> = gts.into_iter().map(Some).collect();
    compute_metrics(&preds, &gts, data.label_space(), &mapping, mode)
}

/// Splits `n` shuffled rows into batches of `size`, folding a final batch
/// smaller than `min_last` into its predecessor.
fn batches(order: &[usize], size: usize, min_last: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_last) {
        let tail = out.len() - 1;
        let start = (tail - 1) * size;
        out.truncate(tail - 1);
        out.push(&order[start..]);
    }
    out
}

/// Per-known-category mean of `features` over labeled rows.
fn class_centroids(features: &Matrix, labels: &[usize], m: usize) -> Result<Matrix> {
    let mut sums = Matrix::zeros(m, features.cols());
    let mut counts = vec![0usize; m];
    for (r, &y) in features.row_iter().zip(labels) {
        counts[y] += 1;
        sums.row_mut(y).iter_mut().zip(r).for_each(|(s, v)| *s += v);
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return invalid(format!("known category {c} has no labeled rows"));
        }
        sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(sums)
}

/// The full discovery procedure.
pub fn run_discovery(data: &EmbeddingDataset, cfg: &PipelineConfig) -> Result<DiscoveryOutcome> {
    cfg.validate()?;
    let space = data.label_space();
    let m = space.num_known;
    let k = cfg.k_override.unwrap_or(space.total());
    if m == 0 || k <= m {
        return invalid(format!("need 0 < M < K, got M = {m}, K = {k}"));
    }
    let lab = data.indices(SplitTag::Labeled);
    let unl = data.indices(SplitTag::Unlabeled);
    if lab.is_empty() || unl.is_empty() || data.indices(SplitTag::Test).is_empty() {
        return invalid("discovery needs labeled, unlabeled and test rows");
    }
    if unl.len() < k {
        return invalid(format!("{} unlabeled rows cannot seed {k} clusters", unl.len()));
    }
    let mut warnings = Vec::new();
    if cfg.batch_size < k {
        warnings.push(format!(
            "batch_size {} is below K = {k}; pseudo-labels cannot be balanced",
            cfg.batch_size
        ));
    }

    let biased = pretrain_biased(data, &cfg.pretrain_config())?;

    let xl = data.features().select_rows(&lab);
    let yl = data.labels_at(&lab)?;
    let xu = data.features().select_rows(&unl);
    let hidden_u: Option<Vec<usize>> = unl.iter().map(|&i| data.labels()[i]).collect();

    let (fu, _) = biased.forward(&xu)?;
    let (fl, _) = biased.forward(&xl)?;
    let km = kmeans(&fu, k, KMEANS_ITERS, KMEANS_TOL, cfg.sub_seed(1))?;
    let prototypes = align_prototypes(&km.centers, &class_centroids(&fl, &yl, m)?)?;
    let mut model = init_trainable(&biased, &prototypes, k, cfg.dropout)?;
    let mut state = build_state(&biased, &xu, &prototypes, cfg.beta)?;
    let entropy = match &hidden_u {
        Some(g) if g.iter().any(|&c| space.is_known(c)) && g.iter().any(|&c| !space.is_known(c)) => {
            Some(entropy_report(&state, g, space)?)
        }
        _ => None,
    };

    let flags = cfg.calibration_flags();
    let lambda2 = if cfg.disable_contrastive { 0.0 } else { cfg.lambda2 };
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.network.num_params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed(2));
    let mut u_order: Vec<usize> = (0..unl.len()).collect();
    let mut l_order: Vec<usize> = (0..lab.len()).collect();
    l_order.shuffle(&mut rng);
    let bl = cfg.batch_size.min(lab.len());
    let mut l_cursor = 0;
    let mut log = Vec::with_capacity(cfg.epochs_train);

    for epoch in 0..cfg.epochs_train {
        if cfg.refresh_transfer && epoch > 0 {
            state.refresh_transfer(&l2_normalize_rows(&model.network.classifier)?)?;
        }
        let lambda1 = cfg.lambda1_at(epoch);
        u_order.shuffle(&mut rng);
        let mut pseudo = vec![0usize; unl.len()];
        let (mut sup, mut cont, mut total, mut nb) = (0.0, 0.0, 0.0, 0usize);
        for (batch, ub) in batches(&u_order, cfg.batch_size, k).into_iter().enumerate() {
            let xb = xu.select_rows(ub);
            let (_, logits) = model.network.infer(&xb)?;
            let y_hat = pseudo_labels(&state, &logits, ub, cfg, flags)?;
            for (&i, &y) in ub.iter().zip(&y_hat) {
                pseudo[i] = y;
            }

            let mut lb = Vec::with_capacity(bl);
            while lb.len() < bl {
                if l_cursor == l_order.len() {
                    l_order.shuffle(&mut rng);
                    l_cursor = 0;
                }
                lb.push(l_order[l_cursor]);
                l_cursor += 1;
            }
            let xlb = xl.select_rows(&lb);
            let ylb: Vec<usize> = lb.iter().map(|&i| yl[i]).collect();
            let rows = ub.len() + lb.len();
            let (mask_a, mask_b) = if cfg.dropout > 0.0 {
                let a = dropout_mask(rows, xu.cols(), cfg.dropout, &mut rng);
                let b = (lambda2 > 0.0).then(|| dropout_mask(rows, xu.cols(), cfg.dropout, &mut rng));
                (Some(a), b)
            } else {
                (None, None)
            };
            let step = StepInputs {
                unlabeled: &xb,
                pseudo_labels: &y_hat,
                labeled: &xlb,
                labels: &ylb,
                mask_a: mask_a.as_ref(),
                mask_b: mask_b.as_ref(),
                lambda1,
                lambda2,
                temperature: cfg.temperature,
            };
            let (report, grads) = discovery_loss(&model.network, &step)?;
            if !report.total_loss.is_finite() {
                return Err(SdcError::Divergence {
                    epoch,
                    batch,
                    detail: format!("loss {}", report.total_loss),
                });
            }
            opt.update(&mut model.network, &grads)
                .map_err(|e| SdcError::Divergence {
                    epoch,
                    batch,
                    detail: e.to_string(),
                })?;
            sup += report.sup_loss;
            cont += report.contrastive_loss;
            total += report.total_loss;
            nb += 1;
        }
        let (acc_all, acc_novel) = match &hidden_u {
            Some(g) => {
                let (a, n) = clustering_accuracy(&pseudo, g, space.total(), |c| !space.is_known(c))?;
                (Some(a), Some(n))
            }
            None => (None, None),
        };
        let nb = nb.max(1) as f64;
        log.push(EpochLog {
            epoch,
            sup_loss: sup / nb,
            cont_loss: cont / nb,
            total_loss: total / nb,
            pseudo_label_acc_all: acc_all,
            pseudo_label_acc_novel: acc_novel,
            lambda1,
        });
    }

    let report = evaluate(&model, data, cfg.mode, cfg.sub_seed(3))?;
    Ok(DiscoveryOutcome {
        model,
        biased,
        report,
        log,
        entropy,
        warnings,
    })
}

/// Calibrates one batch of trainable logits and balances them by
/// transport. `rows` index into the cached biased outputs.
fn pseudo_labels(
    state: &CalibrationState,
    logits: &Matrix,
    rows: &[usize],
    cfg: &PipelineConfig,
    flags: CalibrationFlags,
) -> Result<Vec<usize>> {
    let entropies: Vec<f64> = rows.iter().map(|&i| state.entropies[i]).collect();
    let alphas = cfg.alphas(&entropies)?;
    let mut calibrated = Matrix::zeros(logits.rows(), logits.cols());
    for (j, (&i, &alpha)) in rows.iter().zip(&alphas).enumerate() {
        let c = calibrate_with(logits.row(j), state.biased_logits.row(i), alpha, &state.transfer, flags)?;
        calibrated.row_mut(j).copy_from_slice(&c);
    }
    Ok(sinkhorn_pseudo_labels(&calibrated, cfg.epsilon_ot, DEFAULT_MAX_ITERS, DEFAULT_TOL)?.pseudo_labels)
}

/// Named ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    Full,
    NoCbm,
    NoCcm,
    NoWeighting,
    NoLa,
    NoCont,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Full,
        Arm::NoCbm,
        Arm::NoCcm,
        Arm::NoWeighting,
        Arm::NoLa,
        Arm::NoCont,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoCbm => "no-cbm",
            Arm::NoCcm => "no-ccm",
            Arm::NoWeighting => "no-weighting",
            Arm::NoLa => "no-la",
            Arm::NoCont => "no-cont",
        }
    }

    pub fn apply(self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut c = cfg.clone();
        match self {
            Arm::Full => {}
            Arm::NoCbm => c.disable_cbm = true,
            Arm::NoCcm => c.disable_ccm = true,
            Arm::NoWeighting => c.disable_weighting = true,
            Arm::NoLa => c.disable_logit_adjustment = true,
            Arm::NoCont => c.disable_contrastive = true,
        }
        c
    }
}

impl FromStr for Arm {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SdcError::Config(format!("unknown arm {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Runs every `(arm, seed)` pair on up to `threads` workers. Rows come back
/// in `arms × seeds` order regardless of scheduling.
pub fn run_ablation(
    data: &EmbeddingDataset,
    base: &PipelineConfig,
    arms: &[Arm],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(Arm, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let results: Mutex<Vec<Option<Result<MetricsReport>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(arm, seed)) = jobs.get(j) else { break };
                let mut cfg = arm.apply(base);
                cfg.seed = seed;
                let r = run_discovery(data, &cfg).map(|o| o.report);
                results.lock().expect("result lock")[j] = Some(r);
            });
        }
    });
    jobs.into_iter()
        .zip(results.into_inner().expect("result lock"))
        .map(|((arm, seed), r)| {
            Ok(AblationRow {
                arm,
                seed,
                report: r.expect("every job ran")?,
            })
        })
        .collect()
}
