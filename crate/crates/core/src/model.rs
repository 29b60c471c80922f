//! Encoder + prototype-classifier networks, their losses and optimizer.
//!
//! A network maps inputs `x ∈ R^{d_in}` to features `f(x) ∈ R^d` (identity,
//! or one `tanh` layer) and then to logits `W f(x)` where the classifier `W`
//! has one row per category and no bias, so logits are prototype dot
//! products. Gradients are derived by hand and verified against central
//! differences in the tests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, SplitTag};
use crate::error::{invalid, Result, SdcError};
use crate::numerics::{argmax, dot, log_sum_exp, norm, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderSpec {
    Identity,
    /// One fully connected `tanh` layer with the given width.
    Hidden(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Identity { dim: usize },
    Hidden { weights: Matrix, bias: Vec<f64> },
}

impl Encoder {
    /// Glorot-uniform weights, zero bias.
    pub fn init(spec: EncoderSpec, input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        match spec {
            EncoderSpec::Identity => Encoder::Identity { dim: input_dim },
            EncoderSpec::Hidden(width) => {
                let limit = (6.0 / (input_dim + width) as f64).sqrt();
                let data = (0..width * input_dim)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Encoder::Hidden {
                    weights: Matrix::from_vec(width, input_dim, data).expect("shape"),
                    bias: vec![0.0; width],
                }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Hidden { weights, .. } => weights.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Hidden { weights, .. } => weights.rows(),
        }
    }

    fn encode(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Encoder::Identity { .. } => Ok(x.clone()),
            Encoder::Hidden { weights, bias } => {
                let mut z = x.matmul_t(weights)?;
                for i in 0..z.rows() {
                    for (v, b) in z.row_mut(i).iter_mut().zip(bias) {
                        *v = (*v + b).tanh();
                    }
                }
                Ok(z)
            }
        }
    }
}

/// Gradients with the same layout as a [`Network`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub encoder_weights: Option<Matrix>,
    pub encoder_bias: Option<Vec<f64>>,
    pub classifier: Matrix,
}

impl NetworkGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(w) = &self.encoder_weights {
            out.extend_from_slice(w.as_slice());
        }
        if let Some(b) = &self.encoder_bias {
            out.extend_from_slice(b);
        }
        out.extend_from_slice(self.classifier.as_slice());
        out
    }

    pub fn norm(&self) -> f64 {
        norm(&self.to_flat())
    }

    fn accumulate(&mut self, other: &NetworkGrads) {
        if let (Some(a), Some(b)) = (&mut self.encoder_weights, &other.encoder_weights) {
            a.add_scaled(b, 1.0).expect("same shape");
        }
        if let (Some(a), Some(b)) = (&mut self.encoder_bias, &other.encoder_bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.classifier.add_scaled(&other.classifier, 1.0).expect("same shape");
    }
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Encoder input after dropout.
    pub input: Matrix,
    pub features: Matrix,
    pub logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: Encoder,
    /// One row per category.
    pub classifier: Matrix,
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(SdcError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Forward pass with an optional multiplicative input mask.
    pub fn forward_masked(&self, x: &Matrix, mask: Option<&Matrix>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let input = match mask {
            None => x.clone(),
            Some(m) => {
                if m.shape() != x.shape() {
                    return invalid("dropout mask shape differs from input");
                }
                let mut out = x.clone();
                for (v, k) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *v *= k;
                }
                out
            }
        };
        let features = self.encoder.encode(&input)?;
        let logits = features.matmul_t(&self.classifier)?;
        Ok(ForwardCache {
            input,
            features,
            logits,
        })
    }

    /// Inference-mode `(features, logits)`.
    pub fn infer(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let c = self.forward_masked(x, None)?;
        Ok((c.features, c.logits))
    }

    /// Backpropagates loss gradients wrt logits and (optionally) directly
    /// wrt features.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix, dfeatures: Option<&Matrix>) -> Result<NetworkGrads> {
        if dlogits.shape() != cache.logits.shape() {
            return invalid("logit gradient shape mismatch");
        }
        let classifier = dlogits.t_matmul(&cache.features)?;
        let mut dfeat = dlogits.matmul(&self.classifier)?;
        if let Some(extra) = dfeatures {
            dfeat.add_scaled(extra, 1.0)?;
        }
        let (encoder_weights, encoder_bias) = match &self.encoder {
            Encoder::Identity { .. } => (None, None),
            Encoder::Hidden { .. } => {
                // features = tanh(z) so dz = dfeat ⊙ (1 - features²)
                let mut dz = dfeat;
                for (g, f) in dz.as_mut_slice().iter_mut().zip(cache.features.as_slice()) {
                    *g *= 1.0 - f * f;
                }
                let dw = dz.t_matmul(&cache.input)?;
                let mut db = vec![0.0; dz.cols()];
                for r in dz.row_iter() {
                    db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                (Some(dw), Some(db))
            }
        };
        Ok(NetworkGrads {
            encoder_weights,
            encoder_bias,
            classifier,
        })
    }

    pub fn num_params(&self) -> usize {
        let enc = match &self.encoder {
            Encoder::Identity { .. } => 0,
            Encoder::Hidden { weights, bias } => weights.as_slice().len() + bias.len(),
        };
        enc + self.classifier.as_slice().len()
    }

    /// Parameters in the order encoder weights, encoder bias, classifier.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        if let Encoder::Hidden { weights, bias } = &self.encoder {
            out.extend_from_slice(weights.as_slice());
            out.extend_from_slice(bias);
        }
        out.extend_from_slice(self.classifier.as_slice());
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(SdcError::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut rest = params;
        if let Encoder::Hidden { weights, bias } = &mut self.encoder {
            let (w, r) = rest.split_at(weights.as_slice().len());
            weights.as_mut_slice().copy_from_slice(w);
            let (b, r) = r.split_at(bias.len());
            bias.copy_from_slice(b);
            rest = r;
        }
        self.classifier.as_mut_slice().copy_from_slice(rest);
        Ok(())
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// `1 / (1 - rate)` otherwise.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// The frozen pre-trained model producing the biased logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasedModel {
    pub network: Network,
    pub frozen: bool,
}

impl BiasedModel {
    pub fn num_known(&self) -> usize {
        self.network.num_classes()
    }

    /// Inference-mode `(features, logits)`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.network.infer(x)
    }
}

/// The model trained on unlabeled data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableModel {
    pub network: Network,
    pub num_known: usize,
    pub dropout_rate: f64,
}

impl TrainableModel {
    pub fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    /// Returns `(features, logits)`. Passing an RNG selects train mode, which
    /// applies input dropout.
    pub fn forward(&self, x: &Matrix, rng: Option<&mut ChaCha8Rng>) -> Result<(Matrix, Matrix)> {
        match rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let mask = dropout_mask(x.rows(), x.cols(), self.dropout_rate, rng);
                let c = self.network.forward_masked(x, Some(&mask))?;
                Ok((c.features, c.logits))
            }
            _ => self.network.infer(x),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let (_, logits) = self.network.infer(x)?;
        Ok(logits.row_iter().map(argmax).collect())
    }
}

/// Copies the biased encoder and installs the prototypes as classifier rows.
pub fn init_trainable(
    biased: &BiasedModel,
    prototypes: &Matrix,
    num_classes: usize,
    dropout_rate: f64,
) -> Result<TrainableModel> {
    if prototypes.rows() != num_classes {
        return invalid(format!("expected {num_classes} prototypes, got {}", prototypes.rows()));
    }
    if prototypes.cols() != biased.network.feature_dim() {
        return Err(SdcError::DimensionMismatch {
            expected: biased.network.feature_dim(),
            got: prototypes.cols(),
        });
    }
    if let Some(r) = prototypes.row_iter().find(|r| (norm(r) - 1.0).abs() > 1e-9) {
        return invalid(format!("prototype norm {} is not 1", norm(r)));
    }
    if num_classes < biased.num_known() {
        return invalid("fewer prototypes than known categories");
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return invalid("dropout rate must lie in [0, 1)");
    }
    Ok(TrainableModel {
        network: Network {
            encoder: biased.network.encoder.clone(),
            classifier: prototypes.clone(),
        },
        num_known: biased.num_known(),
        dropout_rate,
    })
}

/// `log Σ exp(x) − x_t`, accurate even when the loss is far below one ulp
/// of the logits.
fn nll(x: &[f64], t: usize) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rest: f64 = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m - x[t]) + (rest + (x[t] - m).exp_m1()).ln_1p()
}

/// Mean cross-entropy and its gradient wrt the logits.
pub fn ce_loss(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if targets.len() != b {
        return Err(SdcError::DimensionMismatch {
            expected: b,
            got: targets.len(),
        });
    }
    if b == 0 {
        return Ok((0.0, Matrix::zeros(0, c)));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return invalid(format!("target {t} out of range for {c} classes"));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = logits.clone();
    for (i, &t) in targets.iter().enumerate() {
        loss += nll(logits.row(i), t);
        let g = grad.row_mut(i);
        softmax_in_place(g);
        g[t] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv_b);
    }
    Ok((loss * inv_b, grad))
}

/// NT-Xent over two views of a batch.
///
/// Features are L2-normalized inside; for each of the `2B` anchors the
/// positive is the other view of the same instance and the denominator runs
/// over the other `2B - 1` views. Returns the mean loss and gradients wrt
/// the unnormalized features of each view.
pub fn contrastive_loss(v1: &Matrix, v2: &Matrix, temperature: f64) -> Result<(f64, Matrix, Matrix)> {
    let b = v1.rows();
    if v2.shape() != v1.shape() {
        return invalid("contrastive views differ in shape");
    }
    if b < 2 {
        return invalid("contrastive loss needs a batch of at least 2");
    }
    if !(temperature > 0.0) {
        return invalid("temperature must be positive");
    }
    let raw = v1.vstack(v2)?;
    let n = 2 * b;
    let norms: Vec<f64> = raw.row_iter().map(norm).collect();
    if norms.contains(&0.0) {
        return invalid("cannot normalize a zero feature vector");
    }
    let mut z = raw.clone();
    for i in 0..n {
        z.row_mut(i).iter_mut().for_each(|v| *v /= norms[i]);
    }
    let inv_t = 1.0 / temperature;
    let sim = z.matmul_t(&z)?;

    // A = P - Pos where P is the row softmax over j != i.
    let mut a = Matrix::zeros(n, n);
    let mut loss = 0.0;
    let mut row = vec![0.0; n - 1];
    for i in 0..n {
        let pos = (i + b) % n;
        let mut k = 0;
        for j in 0..n {
            if j != i {
                row[k] = sim[(i, j)] * inv_t;
                k += 1;
            }
        }
        loss += log_sum_exp(&row) - sim[(i, pos)] * inv_t;
        softmax_in_place(&mut row);
        let mut k = 0;
        for j in 0..n {
            if j != i {
                a[(i, j)] = row[k];
                k += 1;
            }
        }
        a[(i, pos)] -= 1.0;
    }
    loss /= n as f64;

    // dL/dz = (A + Aᵀ) z / (n τ)
    let mut sym = a.clone();
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] += a[(j, i)];
        }
    }
    let dz = sym.matmul(&z)?;
    let scale = inv_t / n as f64;
    // back through normalization: (I - z zᵀ) g / ‖f‖
    let mut draw = Matrix::zeros(n, raw.cols());
    for i in 0..n {
        let zi = z.row(i);
        let gi: Vec<f64> = dz.row(i).iter().map(|g| g * scale).collect();
        let proj = dot(zi, &gi);
        for (o, (g, zz)) in draw.row_mut(i).iter_mut().zip(gi.iter().zip(zi)) {
            *o = (g - proj * zz) / norms[i];
        }
    }
    let g1 = draw.select_rows(&(0..b).collect::<Vec<_>>());
    let g2 = draw.select_rows(&(b..n).collect::<Vec<_>>());
    Ok((loss, g1, g2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub sup_loss: f64,
    pub contrastive_loss: f64,
    pub total_loss: f64,
    pub gradient_norm: f64,
}

/// One mini-batch of the discovery objective
/// `λ₁ CE(u, pseudo) + (1 - λ₁) CE(l, y) + λ₂ NT-Xent(u ∪ l)`.
///
/// The masks fix the two dropout views so the loss is a deterministic
/// function of the parameters. The second view is only used when
/// `lambda2 > 0`.
pub struct StepInputs<'a> {
    pub unlabeled: &'a Matrix,
    pub pseudo_labels: &'a [usize],
    pub labeled: &'a Matrix,
    pub labels: &'a [usize],
    pub mask_a: Option<&'a Matrix>,
    pub mask_b: Option<&'a Matrix>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
}

pub fn discovery_loss(net: &Network, s: &StepInputs<'_>) -> Result<(LossReport, NetworkGrads)> {
    let bu = s.unlabeled.rows();
    let bl = s.labeled.rows();
    let x = s.unlabeled.vstack(s.labeled)?;
    let view_a = net.forward_masked(&x, s.mask_a)?;
    let u_idx: Vec<usize> = (0..bu).collect();
    let l_idx: Vec<usize> = (bu..bu + bl).collect();
    let (ce_u, g_u) = ce_loss(&view_a.logits.select_rows(&u_idx), s.pseudo_labels)?;
    let (ce_l, g_l) = ce_loss(&view_a.logits.select_rows(&l_idx), s.labels)?;
    let sup_loss = s.lambda1 * ce_u + (1.0 - s.lambda1) * ce_l;

    let mut dlogits = Matrix::zeros(bu + bl, net.num_classes());
    for i in 0..bu {
        for (d, g) in dlogits.row_mut(i).iter_mut().zip(g_u.row(i)) {
            *d = s.lambda1 * g;
        }
    }
    for i in 0..bl {
        for (d, g) in dlogits.row_mut(bu + i).iter_mut().zip(g_l.row(i)) {
            *d = (1.0 - s.lambda1) * g;
        }
    }

    let (contrastive_loss, grads) = if s.lambda2 > 0.0 {
        let view_b = net.forward_masked(&x, s.mask_b)?;
        let (cl, mut ga, mut gb) = contrastive_loss(&view_a.features, &view_b.features, s.temperature)?;
        ga.scale(s.lambda2);
        gb.scale(s.lambda2);
        let mut grads = net.backward(&view_a, &dlogits, Some(&ga))?;
        let zero = Matrix::zeros(bu + bl, net.num_classes());
        grads.accumulate(&net.backward(&view_b, &zero, Some(&gb))?);
        (cl, grads)
    } else {
        (0.0, net.backward(&view_a, &dlogits, None)?)
    };
    let report = LossReport {
        sup_loss,
        contrastive_loss,
        total_loss: sup_loss + s.lambda2 * contrastive_loss,
        gradient_norm: grads.norm(),
    };
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(SdcError::DimensionMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(SdcError::NonFinite("gradient".into()));
        }
        let c = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * c.weight_decay * params[i];
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// Applies one update to a network's parameters.
    pub fn update(&mut self, net: &mut Network, grads: &NetworkGrads) -> Result<()> {
        let mut p = net.params_flat();
        self.step(&mut p, &grads.to_flat())?;
        net.set_params_flat(&p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder: EncoderSpec,
    pub dropout_rate: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            encoder: EncoderSpec::Hidden(32),
            dropout_rate: 0.1,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Cross-entropy training of encoder + classifier on the labeled rows.
pub fn pretrain_biased(data: &EmbeddingDataset, cfg: &PretrainConfig) -> Result<BiasedModel> {
    let rows = data.indices(SplitTag::Labeled);
    if rows.is_empty() {
        return invalid("no labeled rows to pre-train on");
    }
    let m = data.label_space().num_known;
    if m == 0 {
        return invalid("label space has no known categories");
    }
    let labels = data.labels_at(&rows)?;
    let x = data.features().select_rows(&rows);
    pretrain_on(&x, &labels, m, cfg)
}

/// [`pretrain_biased`] on an explicit feature matrix and label vector.
pub fn pretrain_on(x: &Matrix, labels: &[usize], num_known: usize, cfg: &PretrainConfig) -> Result<BiasedModel> {
    if x.rows() == 0 || x.rows() != labels.len() {
        return invalid("pre-training needs one label per non-empty row");
    }
    if cfg.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = Encoder::init(cfg.encoder, x.cols(), &mut rng);
    let d = encoder.output_dim();
    let classifier = Matrix::from_vec(
        num_known,
        d,
        (0..num_known * d)
            .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )?;
    let mut net = Network { encoder, classifier };
    let mut opt = AdamW::new(cfg.optimizer, net.num_params());
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mask = (cfg.dropout_rate > 0.0).then(|| dropout_mask(xb.rows(), xb.cols(), cfg.dropout_rate, &mut rng));
            let cache = net.forward_masked(&xb, mask.as_ref())?;
            let (loss, dlogits) = ce_loss(&cache.logits, &yb)?;
            if !loss.is_finite() {
                return Err(SdcError::Divergence {
                    epoch,
                    batch,
                    detail: format!("pre-training loss {loss}"),
                });
            }
            let grads = net.backward(&cache, &dlogits, None)?;
            opt.update(&mut net, &grads).map_err(|e| SdcError::Divergence {
                epoch,
                batch,
                detail: e.to_string(),
            })?;
        }
    }
    Ok(BiasedModel {
        network: net,
        frozen: true,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCM";
const CHECKPOINT_VERSION: u32 = 1;

/// Model checkpoint.
///
/// Layout (little endian): magic `SDCM`, `u32` version (1), `u32` role
/// (0 biased, 1 trainable), `u32` encoder kind (0 identity, 1 tanh layer),
/// `u32` d_in, `u32` d, `u32` classes, `u32` known categories, `f32`
/// dropout rate; then for a tanh encoder `d × d_in` weights and `d` biases;
/// then the `classes × d` classifier. All parameter blocks are row-major
/// `f32`.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Biased(BiasedModel),
    Trainable(TrainableModel),
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, w: &mut W) -> Result<()> {
    let (role, net, known, dropout) = match ckpt {
        Checkpoint::Biased(b) => (0u32, &b.network, b.num_known(), 0.0),
        Checkpoint::Trainable(t) => (1u32, &t.network, t.num_known, t.dropout_rate),
    };
    let kind = match net.encoder {
        Encoder::Identity { .. } => 0u32,
        Encoder::Hidden { .. } => 1u32,
    };
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        role,
        kind,
        net.input_dim() as u32,
        net.feature_dim() as u32,
        net.num_classes() as u32,
        known as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(dropout as f32).to_le_bytes())?;
    for p in net.params_flat() {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let bad = |m: &str| SdcError::Parse {
        line: 0,
        message: m.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad checkpoint magic, expected SDCM"));
    }
    let mut word = [0u8; 4];
    let mut next = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    if next(&mut r)? != CHECKPOINT_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let role = next(&mut r)?;
    let kind = next(&mut r)?;
    let d_in = next(&mut r)? as usize;
    let d = next(&mut r)? as usize;
    let classes = next(&mut r)? as usize;
    let known = next(&mut r)? as usize;
    let dropout = f64::from(f32::from_bits(next(&mut r)?));
    let encoder = match kind {
        0 if d == d_in => Encoder::Identity { dim: d },
        1 => Encoder::Hidden {
            weights: Matrix::zeros(d, d_in),
            bias: vec![0.0; d],
        },
        _ => return Err(bad("bad encoder kind")),
    };
    let mut net = Network {
        encoder,
        classifier: Matrix::zeros(classes, d),
    };
    let mut buf = vec![0u8; 4 * net.num_params()];
    r.read_exact(&mut buf)?;
    let params: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    net.set_params_flat(&params)?;
    match role {
        0 => Ok(Checkpoint::Biased(BiasedModel {
            network: net,
            frozen: true,
        })),
        1 => Ok(Checkpoint::Trainable(TrainableModel {
            network: net,
            num_known: known,
            dropout_rate: dropout,
        })),
        _ => Err(bad("bad checkpoint role")),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmbeddingDataset, LabelSpace};
    use crate::numerics::{finite_diff_check, l2_normalize_rows};

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    }

    fn hidden_net(d_in: usize, d: usize, classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(EncoderSpec::Hidden(d), d_in, &mut rng);
        Network {
            encoder,
            classifier: random_matrix(classes, d, &mut rng),
        }
    }

    #[test]
    fn ce_examples() {
        let (l, _) = ce_loss(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = ce_loss(&Matrix::from_rows(&[[100.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!(l > 0.0 && l < 1e-40);
        assert!(ce_loss(&Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), &[2]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_matrix(4, 5, &mut rng);
        let targets = [0usize, 4, 2, 2];
        let f = |p: &[f64]| {
            let m = Matrix::from_vec(4, 5, p.to_vec()).unwrap();
            let (l, g) = ce_loss(&m, &targets).unwrap();
            (l, g.into_vec())
        };
        assert!(finite_diff_check(f, logits.as_slice(), 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn contrastive_examples() {
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (l, _, _) = contrastive_loss(&v, &v, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e / (e + 2.0)).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.5514).abs() < 1e-4);

        // positives at +1, negatives at -1: loss vanishes as τ → 0
        let v = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let (hot, _, _) = contrastive_loss(&v, &v, 1.0).unwrap();
        let (cold, _, _) = contrastive_loss(&v, &v, 0.01).unwrap();
        assert!(cold < hot && cold < 1e-80, "{cold}");

        assert!(contrastive_loss(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2), 1.0).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(3, 4, &mut rng);
        let b = random_matrix(3, 4, &mut rng);
        let f = |p: &[f64]| {
            let a = Matrix::from_vec(3, 4, p[..12].to_vec()).unwrap();
            let b = Matrix::from_vec(3, 4, p[12..].to_vec()).unwrap();
            let (l, ga, gb) = contrastive_loss(&a, &b, 0.5).unwrap();
            let mut g = ga.into_vec();
            g.extend(gb.into_vec());
            (l, g)
        };
        let mut p = a.into_vec();
        p.extend(b.into_vec());
        assert!(finite_diff_check(f, &p, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn discovery_loss_gradient_through_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = hidden_net(5, 4, 3, 4);
        let u = random_matrix(4, 5, &mut rng);
        let l = random_matrix(3, 5, &mut rng);
        let ma = dropout_mask(7, 5, 0.2, &mut rng);
        let mb = dropout_mask(7, 5, 0.2, &mut rng);
        let inputs = StepInputs {
            unlabeled: &u,
            pseudo_labels: &[2, 0, 1, 1],
            labeled: &l,
            labels: &[0, 1, 0],
            mask_a: Some(&ma),
            mask_b: Some(&mb),
            lambda1: 0.6,
            lambda2: 0.5,
            temperature: 0.5,
        };
        let (report, _) = discovery_loss(&net, &inputs).unwrap();
        assert!((report.total_loss - (report.sup_loss + 0.5 * report.contrastive_loss)).abs() < 1e-12);
        let f = |p: &[f64]| {
            let mut n = net.clone();
            n.set_params_flat(p).unwrap();
            let (r, g) = discovery_loss(&n, &inputs).unwrap();
            (r.total_loss, g.to_flat())
        };
        assert!(finite_diff_check(f, &net.params_flat(), 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn forward_identity_and_basis() {
        let net = Network {
            encoder: Encoder::Identity { dim: 3 },
            classifier: Matrix::identity(3),
        };
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]).unwrap();
        let (f, l) = net.infer(&x).unwrap();
        assert_eq!(f, x);
        assert_eq!(l, x);
        assert!(net.infer(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn forward_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = hidden_net(6, 5, 4, 6);
        let x = random_matrix(7, 6, &mut rng);
        let (f, l) = net.infer(&x).unwrap();
        let Encoder::Hidden { weights, bias } = &net.encoder else {
            unreachable!()
        };
        for i in 0..7 {
            for h in 0..5 {
                let z: f64 = (0..6).map(|j| weights[(h, j)] * x[(i, j)]).sum::<f64>() + bias[h];
                assert!((f[(i, h)] - z.tanh()).abs() < 1e-12);
            }
            for c in 0..4 {
                let s: f64 = (0..5).map(|h| f[(i, h)] * net.classifier[(c, h)]).sum();
                assert!((l[(i, c)] - s).abs() < 1e-12);
            }
        }
        assert_eq!(net.infer(&x).unwrap(), (f, l));
    }

    #[test]
    fn adamw_behaviour() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 2);
        let mut p = vec![1.5, -2.0];
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);

        let mut opt = AdamW::new(cfg, 1);
        let mut x = [20.0];
        let mut prev = x[0];
        for _ in 0..100 {
            let g = [x[0]];
            opt.step(&mut x, &g).unwrap();
            assert!(x[0].abs() < prev.abs());
            prev = x[0];
        }

        let run = || {
            let mut opt = AdamW::new(AdamWConfig::default(), 3);
            let mut p = vec![0.3, -0.1, 2.0];
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|v| v * (k as f64 + 1.0)).collect();
                opt.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        assert!(AdamW::new(cfg, 1).step(&mut [0.0], &[f64::NAN]).is_err());
    }

    fn separable_dataset() -> EmbeddingDataset {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..40 {
            let c = i % 2;
            let sign = if c == 0 { 1.0 } else { -1.0 };
            rows.push(vec![
                sign * 2.0 + 0.3 * rng.sample::<f64, _>(StandardNormal),
                rng.sample(StandardNormal),
            ]);
            labels.push(Some(c));
        }
        EmbeddingDataset::new(
            (0..40).collect(),
            Matrix::from_rows(&rows).unwrap(),
            labels,
            vec![SplitTag::Labeled; 40],
            LabelSpace::new(2, 1),
        )
        .unwrap()
    }

    #[test]
    fn pretrain_separates_linearly_separable_data() {
        let ds = separable_dataset();
        let cfg = PretrainConfig {
            epochs: 200,
            batch_size: 16,
            encoder: EncoderSpec::Identity,
            dropout_rate: 0.0,
            optimizer: AdamWConfig {
                lr: 0.05,
                ..Default::default()
            },
            seed: 0,
        };
        let model = pretrain_biased(&ds, &cfg).unwrap();
        assert!(model.frozen);
        let (_, logits) = model.forward(ds.features()).unwrap();
        for (r, l) in logits.row_iter().zip(ds.labels()) {
            assert_eq!(argmax(r), l.unwrap());
        }
    }

    #[test]
    fn pretrain_zero_epochs_starts_near_uniform() {
        let ds = separable_dataset();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let model = pretrain_biased(&ds, &cfg).unwrap();
        assert!(model.frozen);
        let (_, logits) = model.forward(ds.features()).unwrap();
        let labels: Vec<usize> = ds.labels().iter().map(|l| l.unwrap()).collect();
        let (ce, _) = ce_loss(&logits, &labels).unwrap();
        assert!((ce - 2f64.ln()).abs() < 0.05, "{ce}");
    }

    #[test]
    fn init_trainable_contract() {
        let biased = BiasedModel {
            network: hidden_net(4, 3, 2, 9),
            frozen: true,
        };
        let protos = l2_normalize_rows(
            &Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let model = init_trainable(&biased, &protos, 4, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_matrix(5, 4, &mut rng);
        let (fb, _) = biased.forward(&x).unwrap();
        let (ft, lt) = model.forward(&x, None).unwrap();
        assert_eq!(fb, ft);
        assert!(lt.max_abs_diff(&ft.matmul_t(&protos).unwrap()) < 1e-15);
        assert!(init_trainable(&biased, &protos, 5, 0.1).is_err());
        let unnormalized = Matrix::from_vec(4, 3, vec![1.0; 12]).unwrap();
        assert!(init_trainable(&biased, &unnormalized, 4, 0.1).is_err());

        let id = TrainableModel {
            network: Network {
                encoder: Encoder::Identity { dim: 3 },
                classifier: protos.clone(),
            },
            num_known: 2,
            dropout_rate: 0.0,
        };
        assert_eq!(id.predict(&protos).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = hidden_net(3, 2, 4, 11);
        let mut narrowed = net.clone();
        let p: Vec<f64> = net.params_flat().iter().map(|&v| f64::from(v as f32)).collect();
        narrowed.set_params_flat(&p).unwrap();
        let t = Checkpoint::Trainable(TrainableModel {
            network: narrowed.clone(),
            num_known: 3,
            dropout_rate: 0.25,
        });
        let mut buf = Vec::new();
        write_checkpoint(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SDCM");
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), t);

        let b = Checkpoint::Biased(BiasedModel {
            network: Network {
                encoder: Encoder::Identity { dim: 2 },
                classifier: Matrix::from_rows(&[[0.5, -1.0]]).unwrap(),
            },
            frozen: true,
        });
        let mut buf = Vec::new();
        write_checkpoint(&b, &mut buf).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), b);
        assert!(read_checkpoint(&buf[..10]).is_err());
    }
}
