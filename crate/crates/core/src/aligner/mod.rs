//! Pose-shared identity aligner.
//!
//! One face is an `L × F` matrix of raw token features plus its Euler angles.
//! The forward pass is
//!
//! ```text
//! tokens  = raw · T                       (L × D)
//! tokens += 1 · (encode(euler) · P)       pose injection, broadcast to every row
//! M       = tokens · Dᵀ                   (L × C) token/atom correlations
//! W       = pool_rows(M)                  (1 × C) dictionary weights
//! S       = W · D                         (1 × D) global pose representation
//! ```
//!
//! and [`parameter_gradients`] differentiates the contrastive loss of a pair
//! batch with respect to `T`, `P`, `D` and the temperature by hand.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrastive::{pia_loss_and_grad, SimMatrix, Temperature};
use crate::euler_embedding::encode_euler_padded;
use crate::pose::EulerAngles;
use crate::rng::{stream, Domain};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
    Sum,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Max, Pooling::Mean, Pooling::Sum];

    pub fn name(&self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            other => Err(Error::InvalidArgument(format!("unknown pooling '{other}' (expected max, mean or sum)"))),
        }
    }
}

/// Architecture hyperparameters. Serialized with the single-letter keys used
/// by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignerConfig {
    #[serde(rename = "L")]
    pub tokens: usize,
    #[serde(rename = "F")]
    pub features: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "C")]
    pub atoms: usize,
    pub pooling: Pooling,
    pub euler_enabled: bool,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self { tokens: 16, features: 24, dim: 64, atoms: 256, pooling: Pooling::Max, euler_enabled: true }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.features == 0 || self.dim == 0 || self.atoms == 0 {
            return Err(Error::InvalidArgument(format!("aligner dimensions must be positive: {self:?}")));
        }
        if self.euler_enabled && self.dim < 6 {
            return Err(Error::InvalidArgument(format!(
                "euler injection needs D >= 6, got D = {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Which parameter tensor a gradient or mask refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamTensor {
    Tokenizer,
    EulerProj,
    Dictionary,
    LogScale,
}

impl ParamTensor {
    pub const ALL: [ParamTensor; 4] =
        [ParamTensor::Tokenizer, ParamTensor::EulerProj, ParamTensor::Dictionary, ParamTensor::LogScale];

    pub fn name(&self) -> &'static str {
        match self {
            ParamTensor::Tokenizer => "tokenizer_weights",
            ParamTensor::EulerProj => "euler_proj",
            ParamTensor::Dictionary => "dictionary",
            ParamTensor::LogScale => "log_scale",
        }
    }
}

impl fmt::Display for ParamTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learnable state. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerParams {
    /// `F × D`
    pub tokenizer: Array2<f64>,
    /// `D × D`
    pub euler_proj: Array2<f64>,
    /// `C × D`, one atom per row.
    pub dictionary: Array2<f64>,
    /// `ln(1/τ)`
    pub log_scale: f64,
}

impl AlignerParams {
    /// Uniform `±1/√F` tokenizer, uniform `±1/√D` projection, Gaussian atoms
    /// scaled by `1/√D`, `τ = 0.07`.
    pub fn init(cfg: &AlignerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (f, d, c) = (cfg.features, cfg.dim, cfg.atoms);
        let mut rng = stream(seed, Domain::Init, 0);
        let bound_f = 1.0 / (f as f64).sqrt();
        let bound_d = 1.0 / (d as f64).sqrt();
        let tokenizer = Array2::from_shape_fn((f, d), |_| rng.random_range(-bound_f..=bound_f));
        let euler_proj = Array2::from_shape_fn((d, d), |_| rng.random_range(-bound_d..=bound_d));
        let dictionary = Array2::from_shape_fn((c, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * bound_d
        });
        Ok(Self { tokenizer, euler_proj, dictionary, log_scale: Temperature::default().log_scale })
    }

    pub fn from_parts(
        tokenizer: Array2<f64>,
        euler_proj: Array2<f64>,
        dictionary: Array2<f64>,
        log_scale: f64,
    ) -> Result<Self> {
        let p = Self { tokenizer, euler_proj, dictionary, log_scale };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tokenizer: Array2::zeros(self.tokenizer.raw_dim()),
            euler_proj: Array2::zeros(self.euler_proj.raw_dim()),
            dictionary: Array2::zeros(self.dictionary.raw_dim()),
            log_scale: 0.0,
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.tokenizer.ncols();
        if self.euler_proj.dim() != (d, d) {
            return Err(Error::Shape(format!("euler_proj is {:?}, expected ({d}, {d})", self.euler_proj.dim())));
        }
        if self.dictionary.ncols() != d || self.dictionary.nrows() == 0 {
            return Err(Error::Shape(format!("dictionary is {:?}, expected (C, {d})", self.dictionary.dim())));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.tokenizer.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokenizer.ncols()
    }

    pub fn atoms(&self) -> usize {
        self.dictionary.nrows()
    }

    pub fn temperature(&self) -> Temperature {
        Temperature { log_scale: self.log_scale }
    }

    /// Flat view of one tensor, in row-major order.
    pub fn tensor(&self, t: ParamTensor) -> &[f64] {
        match t {
            ParamTensor::Tokenizer => self.tokenizer.as_slice().expect("standard layout"),
            ParamTensor::EulerProj => self.euler_proj.as_slice().expect("standard layout"),
            ParamTensor::Dictionary => self.dictionary.as_slice().expect("standard layout"),
            ParamTensor::LogScale => std::slice::from_ref(&self.log_scale),
        }
    }

    pub fn tensor_mut(&mut self, t: ParamTensor) -> &mut [f64] {
        match t {
            ParamTensor::Tokenizer => self.tokenizer.as_slice_mut().expect("standard layout"),
            ParamTensor::EulerProj => self.euler_proj.as_slice_mut().expect("standard layout"),
            ParamTensor::Dictionary => self.dictionary.as_slice_mut().expect("standard layout"),
            ParamTensor::LogScale => std::slice::from_mut(&mut self.log_scale),
        }
    }

    pub fn all_finite(&self) -> bool {
        ParamTensor::ALL.iter().all(|&t| self.tensor(t).iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        ParamTensor::ALL
            .iter()
            .flat_map(|&t| self.tensor(t).iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<ParamTensor> {
        ParamTensor::ALL.into_iter().find(|&t| self.tensor(t).iter().any(|v| !v.is_finite()))
    }
}

/// Sequential face tokens, `L × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding(pub Array2<f64>);

/// Pooled token/atom correlations, length `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct DictWeights(pub Array1<f64>);

/// `W · D`, length `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPoseRep(pub Array1<f64>);

pub fn tokenize(raw: ArrayView2<'_, f64>, p: &AlignerParams) -> Result<TokenEmbedding> {
    if raw.ncols() != p.features() {
        return Err(Error::Shape(format!("raw features have {} columns, tokenizer expects {}", raw.ncols(), p.features())));
    }
    if raw.nrows() == 0 {
        return Err(Error::Shape("raw input has no tokens".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw feature".into()));
    }
    Ok(TokenEmbedding(raw.dot(&p.tokenizer)))
}

/// Row vector added to every token: `encode(e) · P`.
fn pose_offset(e: &EulerAngles, p: &AlignerParams) -> Result<Array1<f64>> {
    let enc = encode_euler_padded(e, p.dim())?;
    Ok(enc.dot(&p.euler_proj))
}

pub fn inject_pose(t: TokenEmbedding, e: &EulerAngles, p: &AlignerParams, enabled: bool) -> Result<TokenEmbedding> {
    if !enabled {
        return Ok(t);
    }
    if t.0.ncols() != p.dim() {
        return Err(Error::Shape(format!("tokens have width {}, expected {}", t.0.ncols(), p.dim())));
    }
    let offset = pose_offset(e, p)?;
    let mut tokens = t.0;
    tokens += &offset.view().insert_axis(Axis(0));
    Ok(TokenEmbedding(tokens))
}

pub fn correlations(t: &TokenEmbedding, p: &AlignerParams) -> Result<Array2<f64>> {
    if t.0.nrows() == 0 {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if t.0.ncols() != p.dim() {
        return Err(Error::Shape(format!("tokens have width {}, dictionary atoms have {}", t.0.ncols(), p.dim())));
    }
    Ok(t.0.dot(&p.dictionary.t()))
}

/// Pool each column of an `L × C` matrix over its rows.
pub fn pool_columns(m: ArrayView2<'_, f64>, pooling: Pooling) -> Array1<f64> {
    match pooling {
        Pooling::Max => m.fold_axis(Axis(0), f64::NEG_INFINITY, |&acc, &v| acc.max(v)),
        Pooling::Sum => m.sum_axis(Axis(0)),
        Pooling::Mean => m.sum_axis(Axis(0)) / m.nrows() as f64,
    }
}

pub fn dictionary_weights(t: &TokenEmbedding, p: &AlignerParams, pooling: Pooling) -> Result<DictWeights> {
    let m = correlations(t, p)?;
    Ok(DictWeights(pool_columns(m.view(), pooling)))
}

pub fn global_pose_rep(w: &DictWeights, p: &AlignerParams) -> Result<GlobalPoseRep> {
    if w.0.len() != p.atoms() {
        return Err(Error::Shape(format!("{} weights for {} atoms", w.0.len(), p.atoms())));
    }
    if w.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dictionary weight".into()));
    }
    Ok(GlobalPoseRep(w.0.dot(&p.dictionary)))
}

/// Forward pass returning both the dictionary weights and the representation.
pub fn forward_with_weights(
    raw: ArrayView2<'_, f64>,
    e: &EulerAngles,
    p: &AlignerParams,
    cfg: &AlignerConfig,
) -> Result<(DictWeights, GlobalPoseRep)> {
    let tokens = inject_pose(tokenize(raw, p)?, e, p, cfg.euler_enabled)?;
    let w = dictionary_weights(&tokens, p, cfg.pooling)?;
    let rep = global_pose_rep(&w, p)?;
    Ok((w, rep))
}

pub fn forward(raw: ArrayView2<'_, f64>, e: &EulerAngles, p: &AlignerParams, cfg: &AlignerConfig) -> Result<GlobalPoseRep> {
    forward_with_weights(raw, e, p, cfg).map(|(_, rep)| rep)
}

/// One face: raw token features and the estimated head pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceInput {
    pub raw: Array2<f64>,
    pub euler: EulerAngles,
}

/// `n` identities seen under two poses each. `first[i]` and `second[i]` are
/// the positive pair for identity `identities[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub identities: Vec<u64>,
    pub first: Vec<FaceInput>,
    pub second: Vec<FaceInput>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.first.len() != self.second.len() || self.first.is_empty() {
            return Err(Error::Shape(format!(
                "pair batch needs matching non-empty views, got {} and {}",
                self.first.len(),
                self.second.len()
            )));
        }
        Ok(())
    }
}

/// Intermediate values of a stacked forward pass over `N` faces.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    tokens_per_face: usize,
    /// `N·L × F`
    raw: Array2<f64>,
    /// `N × D`, zero when injection is off.
    encodings: Array2<f64>,
    /// `N·L × D` tokens after injection.
    tokens: Array2<f64>,
    /// For max pooling: winning token index per `(face, atom)`, row-major `N × C`.
    argmax: Vec<usize>,
    /// For mean/sum pooling: pooled tokens per face, `N × D`.
    pooled_tokens: Array2<f64>,
    /// `N × C`
    pub weights: Array2<f64>,
    /// `N × D`
    pub reps: Array2<f64>,
}

pub fn forward_batch<'a>(
    faces: impl IntoIterator<Item = &'a FaceInput>,
    p: &AlignerParams,
    cfg: &AlignerConfig,
) -> Result<BatchTrace> {
    let faces: Vec<&FaceInput> = faces.into_iter().collect();
    let (l, f, d, c) = (cfg.tokens, p.features(), p.dim(), p.atoms());
    let n = faces.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }

    let mut raw = Array2::zeros((n * l, f));
    let mut encodings = Array2::zeros((n, d));
    for (i, face) in faces.iter().enumerate() {
        if face.raw.dim() != (l, f) {
            return Err(Error::Shape(format!("face {i} has raw shape {:?}, expected ({l}, {f})", face.raw.dim())));
        }
        raw.slice_mut(s![i * l..(i + 1) * l, ..]).assign(&face.raw);
        if cfg.euler_enabled {
            encodings.row_mut(i).assign(&encode_euler_padded(&face.euler, d)?);
        }
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw feature".into()));
    }

    let mut tokens = raw.dot(&p.tokenizer);
    if cfg.euler_enabled {
        let offsets = encodings.dot(&p.euler_proj);
        for (i, off) in offsets.rows().into_iter().enumerate() {
            let mut block = tokens.slice_mut(s![i * l..(i + 1) * l, ..]);
            block += &off.insert_axis(Axis(0));
        }
    }

    let mut argmax = Vec::new();
    let mut pooled_tokens = Array2::zeros((0, d));
    let weights = match cfg.pooling {
        Pooling::Max => {
            let m = tokens.dot(&p.dictionary.t());
            let mut weights = Array2::zeros((n, c));
            argmax = vec![0; n * c];
            for i in 0..n {
                let block = m.slice(s![i * l..(i + 1) * l, ..]);
                for atom in 0..c {
                    let mut best = 0;
                    let mut best_v = block[[0, atom]];
                    for row in 1..l {
                        // Strict comparison keeps the lowest index on ties.
                        if block[[row, atom]] > best_v {
                            best = row;
                            best_v = block[[row, atom]];
                        }
                    }
                    argmax[i * c + atom] = best;
                    weights[[i, atom]] = best_v;
                }
            }
            weights
        }
        Pooling::Mean | Pooling::Sum => {
            let scale = if cfg.pooling == Pooling::Mean { 1.0 / l as f64 } else { 1.0 };
            let summed = tokens
                .to_shape((n, l, d))
                .expect("contiguous tokens")
                .sum_axis(Axis(1));
            pooled_tokens = summed * scale;
            pooled_tokens.dot(&p.dictionary.t())
        }
    };
    let reps = weights.dot(&p.dictionary);
    Ok(BatchTrace { tokens_per_face: l, raw, encodings, tokens, argmax, pooled_tokens, weights, reps })
}

/// Gradients of a scalar objective given `d_reps = ∂L/∂S` (`N × D`).
/// The returned `log_scale` entry is zero; the loss owns the temperature.
pub fn backward_batch(trace: &BatchTrace, d_reps: ArrayView2<'_, f64>, p: &AlignerParams, cfg: &AlignerConfig) -> AlignerParams {
    let l = trace.tokens_per_face;
    let (n, c) = trace.weights.dim();
    let d = p.dim();

    // S = W · D
    let d_weights = d_reps.dot(&p.dictionary.t());
    let mut d_dict = trace.weights.t().dot(&d_reps);

    let (d_tokenizer, d_offsets) = match cfg.pooling {
        Pooling::Max => {
            let mut d_tokens = Array2::<f64>::zeros((n * l, d));
            let dict = p.dictionary.as_slice().expect("standard layout");
            let tokens = trace.tokens.as_slice().expect("standard layout");
            {
                let dt = d_tokens.as_slice_mut().expect("standard layout");
                let dd = d_dict.as_slice_mut().expect("standard layout");
                for i in 0..n {
                    for atom in 0..c {
                        let g = d_weights[[i, atom]];
                        if g == 0.0 {
                            continue;
                        }
                        let row = i * l + trace.argmax[i * c + atom];
                        let atom_row = &dict[atom * d..(atom + 1) * d];
                        let tok_row = &tokens[row * d..(row + 1) * d];
                        for k in 0..d {
                            dt[row * d + k] += g * atom_row[k];
                            dd[atom * d + k] += g * tok_row[k];
                        }
                    }
                }
            }
            let d_tokenizer = trace.raw.t().dot(&d_tokens);
            let d_offsets = d_tokens
                .to_shape((n, l, d))
                .expect("contiguous gradients")
                .sum_axis(Axis(1));
            (d_tokenizer, d_offsets)
        }
        Pooling::Mean | Pooling::Sum => {
            let scale = if cfg.pooling == Pooling::Mean { 1.0 / l as f64 } else { 1.0 };
            d_dict += &d_weights.t().dot(&trace.pooled_tokens);
            // Every token row of face i receives the same gradient.
            let d_token_row = d_weights.dot(&p.dictionary) * scale;
            let raw_sums = trace
                .raw
                .to_shape((n, l, p.features()))
                .expect("contiguous raw")
                .sum_axis(Axis(1));
            let d_tokenizer = raw_sums.t().dot(&d_token_row);
            (d_tokenizer, d_token_row * l as f64)
        }
    };

    let d_euler = if cfg.euler_enabled {
        trace.encodings.t().dot(&d_offsets)
    } else {
        Array2::zeros((d, d))
    };

    AlignerParams { tokenizer: d_tokenizer, euler_proj: d_euler, dictionary: d_dict, log_scale: 0.0 }
}

/// Extension point for objectives added on top of the contrastive loss.
///
/// Implementations receive both views' representations (`n × D` each) and
/// return their loss together with its gradient with respect to each view.
pub trait AuxiliaryLoss {
    fn evaluate(&self, first: ArrayView2<'_, f64>, second: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>, Array2<f64>)>;
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    /// Total objective (contrastive plus auxiliary).
    pub loss: f64,
    pub pia_loss: f64,
    pub sims: SimMatrix,
    pub grads: AlignerParams,
}

pub fn parameter_gradients(
    batch: &PairBatch,
    p: &AlignerParams,
    cfg: &AlignerConfig,
    aux: Option<&dyn AuxiliaryLoss>,
) -> Result<GradientReport> {
    batch.validate()?;
    let n = batch.len();
    let trace = forward_batch(batch.first.iter().chain(batch.second.iter()), p, cfg)?;
    let first = trace.reps.slice(s![..n, ..]);
    let second = trace.reps.slice(s![n.., ..]);
    let lg = pia_loss_and_grad(first, second, p.temperature())?;
    if !lg.loss.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss {}", lg.loss)));
    }

    let mut d_reps = Array2::zeros(trace.reps.raw_dim());
    d_reps.slice_mut(s![..n, ..]).assign(&lg.d_first);
    d_reps.slice_mut(s![n.., ..]).assign(&lg.d_second);

    let mut loss = lg.loss;
    if let Some(aux) = aux {
        let (aux_loss, d1, d2) = aux.evaluate(first, second)?;
        if !aux_loss.is_finite() {
            return Err(Error::NonFinite(format!("auxiliary loss {aux_loss}")));
        }
        loss += aux_loss;
        d_reps.slice_mut(s![..n, ..]).scaled_add(1.0, &d1);
        d_reps.slice_mut(s![n.., ..]).scaled_add(1.0, &d2);
    }

    let mut grads = backward_batch(&trace, d_reps.view(), p, cfg);
    grads.log_scale = lg.d_log_scale;
    Ok(GradientReport { loss, pia_loss: lg.loss, sims: lg.sims, grads })
}

/// Contrastive loss of a batch without gradients.
pub fn batch_loss(batch: &PairBatch, p: &AlignerParams, cfg: &AlignerConfig) -> Result<f64> {
    batch.validate()?;
    let n = batch.len();
    let trace = forward_batch(batch.first.iter().chain(batch.second.iter()), p, cfg)?;
    let sims = crate::contrastive::cosine_sim_matrix(trace.reps.slice(s![..n, ..]), trace.reps.slice(s![n.., ..]))?;
    crate::contrastive::pia_loss(&sims, p.temperature())
}
