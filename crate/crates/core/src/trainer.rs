//! Training loop, gradient checking and retrieval evaluation.

use std::io::Write;

use log::debug;
use ndarray::s;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::aligner::{
    batch_loss, forward_batch, parameter_gradients, AlignerConfig, AlignerParams, AuxiliaryLoss, FaceInput,
    PairBatch, ParamTensor, Pooling,
};
use crate::contrastive::{clamp_log_scale, cosine_sim_matrix, mi_lower_bound};
use crate::rng::{stream, Domain};
use crate::synth::{SynthWorld, WorldConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_pairs_per_batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub pooling: Pooling,
    pub euler_enabled: bool,
    #[serde(rename = "C")]
    pub atoms: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "L")]
    pub tokens: usize,
    #[serde(rename = "F")]
    pub features: usize,
    pub seed: u64,
    /// Held-out identities used for the final retrieval accuracy.
    pub eval_identities: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_pairs_per_batch: 32,
            steps: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pooling: Pooling::Max,
            euler_enabled: true,
            atoms: 256,
            dim: 64,
            tokens: 16,
            features: 24,
            seed: 0,
            eval_identities: 64,
        }
    }
}

impl TrainConfig {
    pub fn aligner(&self) -> AlignerConfig {
        AlignerConfig {
            tokens: self.tokens,
            features: self.features,
            dim: self.dim,
            atoms: self.atoms,
            pooling: self.pooling,
            euler_enabled: self.euler_enabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.aligner().validate()?;
        if self.n_pairs_per_batch == 0 {
            return Err(Error::InvalidArgument("n_pairs_per_batch must be positive".into()));
        }
        let positive = [("learning_rate", self.learning_rate), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: AlignerParams,
    v: AlignerParams,
}

impl Adam {
    pub fn new(params: &AlignerParams, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut AlignerParams, grads: &AlignerParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for t in ParamTensor::ALL {
            let g = grads.tensor(t);
            let m = self.m.tensor_mut(t);
            let v = self.v.tensor_mut(t);
            let p = params.tensor_mut(t);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        params.log_scale = clamp_log_scale(params.log_scale);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub pia_loss: f64,
    pub mi_lower_bound: f64,
    pub temperature: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,pia_loss,mi_lower_bound,temperature,grad_norm";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.pia_loss, self.mi_lower_bound, self.temperature, self.grad_norm)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMetrics {
    pub records: Vec<StepRecord>,
    pub final_retrieval: Option<f64>,
}

impl TrainMetrics {
    /// Trailing mean of `pia_loss` over up to `window` records ending at `step`.
    pub fn smoothed_loss(&self, step: usize, window: usize) -> Option<f64> {
        if step >= self.records.len() || window == 0 {
            return None;
        }
        let start = (step + 1).saturating_sub(window);
        let slice = &self.records[start..=step];
        Some(slice.iter().map(|r| r.pia_loss).sum::<f64>() / slice.len() as f64)
    }

    pub fn final_smoothed_loss(&self, window: usize) -> Option<f64> {
        self.records.len().checked_sub(1).and_then(|last| self.smoothed_loss(last, window))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &self.records {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// Everything a run needs besides the config.
pub struct TrainOptions<'a> {
    /// Called after every step, in step order.
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord) -> Result<()>>,
    /// Added to the contrastive objective.
    pub aux: Option<&'a dyn AuxiliaryLoss>,
    /// Tensors whose gradients are zeroed before the update.
    pub frozen: &'a [ParamTensor],
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { on_step: None, aux: None, frozen: &[] }
    }
}

pub fn train(cfg: &TrainConfig, world_cfg: &WorldConfig) -> Result<(AlignerParams, TrainMetrics)> {
    train_with(cfg, world_cfg, TrainOptions::default())
}

pub fn build_world(cfg: &TrainConfig, world_cfg: &WorldConfig) -> Result<SynthWorld> {
    SynthWorld::new(world_cfg.clone(), cfg.tokens, cfg.features, cfg.seed)
}

pub fn train_with(cfg: &TrainConfig, world_cfg: &WorldConfig, mut opts: TrainOptions<'_>) -> Result<(AlignerParams, TrainMetrics)> {
    cfg.validate()?;
    let acfg = cfg.aligner();
    let world = build_world(cfg, world_cfg)?;
    let mut params = AlignerParams::init(&acfg, cfg.seed)?;
    let mut adam = Adam::new(&params, cfg);
    let mut metrics = TrainMetrics::default();
    let n = cfg.n_pairs_per_batch;

    for step in 0..cfg.steps {
        let batch = world.make_pair_batch(n, step as u64)?;
        let mut report = parameter_gradients(&batch, &params, &acfg, opts.aux).map_err(|e| match e {
            Error::NonFinite(q) => Error::NumericalAbort { step, quantity: q },
            // Representations collapse to zero or overflow only when training diverged.
            Error::ZeroNorm { index, side } => Error::NumericalAbort { step, quantity: format!("representation norm ({side}, index {index})") },
            other => other,
        })?;
        for &t in opts.frozen {
            report.grads.tensor_mut(t).fill(0.0);
        }
        let grad_norm = report.grads.l2_norm();
        if !grad_norm.is_finite() {
            let which = report.grads.first_non_finite().map_or("gradient".to_string(), |t| format!("gradient of {t}"));
            return Err(Error::NumericalAbort { step, quantity: which });
        }
        let record = StepRecord {
            step,
            pia_loss: report.pia_loss,
            mi_lower_bound: mi_lower_bound(report.pia_loss, n)?,
            temperature: params.temperature().tau(),
            grad_norm,
        };
        adam.step(&mut params, &report.grads);
        if let Some(t) = params.first_non_finite() {
            return Err(Error::NumericalAbort { step, quantity: format!("parameter {t}") });
        }
        if step % 100 == 0 {
            debug!("step {step}: loss {:.4} tau {:.4}", record.pia_loss, record.temperature);
        }
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&record)?;
        }
        metrics.records.push(record);
    }

    if cfg.eval_identities >= 2 {
        let eval = world.eval_pairs(cfg.eval_identities, 0)?;
        metrics.final_retrieval = Some(retrieval_eval(&params, &acfg, &eval)?);
    }
    Ok((params, metrics))
}

/// Representations of the first and second views, `n × D` each.
pub fn pair_reps(p: &AlignerParams, cfg: &AlignerConfig, pairs: &PairBatch) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let n = pairs.len();
    let trace = forward_batch(pairs.first.iter().chain(pairs.second.iter()), p, cfg)?;
    Ok((trace.reps.slice(s![..n, ..]).to_owned(), trace.reps.slice(s![n.., ..]).to_owned()))
}

/// Fraction of first views whose most similar second view is their own pair.
/// Ties go to the lowest index.
pub fn retrieval_accuracy(first: ndarray::ArrayView2<'_, f64>, second: ndarray::ArrayView2<'_, f64>) -> Result<f64> {
    let m = first.nrows();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("retrieval needs at least 2 pairs, got {m}")));
    }
    let sims = cosine_sim_matrix(first, second)?;
    let hits = sims
        .values()
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == *i
        })
        .count();
    Ok(hits as f64 / m as f64)
}

pub fn retrieval_eval(p: &AlignerParams, cfg: &AlignerConfig, eval_pairs: &PairBatch) -> Result<f64> {
    let (a, b) = pair_reps(p, cfg, eval_pairs)?;
    retrieval_accuracy(a.view(), b.view())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub aligner: AlignerConfig,
    pub n_pairs: usize,
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    pub frozen: Vec<ParamTensor>,
    /// Negative control: perturb the analytic gradient before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            aligner: AlignerConfig { tokens: 4, features: 6, dim: 12, atoms: 16, pooling: Pooling::Max, euler_enabled: true },
            n_pairs: 3,
            samples: 200,
            step: 1e-5,
            seed: 0,
            frozen: Vec::new(),
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub tensor: ParamTensor,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate, with analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst_tensor(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    2.0 * (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compare analytic gradients with central differences on `samples`
/// random coordinates per tensor.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.samples == 0 {
        return Err(Error::InvalidArgument("grad_check needs at least one sample per tensor".into()));
    }
    let acfg = cfg.aligner;
    acfg.validate()?;
    let total = acfg.features * acfg.dim + acfg.dim * acfg.dim + acfg.atoms * acfg.dim + 1;
    if total > 100_000 {
        return Err(Error::InvalidArgument(format!("grad_check is meant for small models; got {total} parameters")));
    }
    let world_cfg = WorldConfig { identity_dim: 4, pose_scale: 1.0, identity_pool: cfg.n_pairs.max(1), ..Default::default() };
    let world = SynthWorld::new(world_cfg, acfg.tokens, acfg.features, cfg.seed)?;
    let batch = world.make_pair_batch(cfg.n_pairs, 0)?;
    let mut params = AlignerParams::init(&acfg, cfg.seed)?;
    // Move off the initial temperature so the scale gradient is generic.
    params.log_scale = 1.5;

    let mut report = parameter_gradients(&batch, &params, &acfg, None)?;
    for &t in &cfg.frozen {
        report.grads.tensor_mut(t).fill(0.0);
    }
    if cfg.corrupt {
        for t in ParamTensor::ALL {
            for g in report.grads.tensor_mut(t) {
                *g = *g * 1.01 + 1e-6;
            }
        }
    }

    let mut rng = stream(cfg.seed, Domain::GradCheck, 0);
    let h = cfg.step;
    let mut tensors = Vec::new();
    for t in ParamTensor::ALL {
        if cfg.frozen.contains(&t) {
            tensors.push(TensorCheck { tensor: t, max_rel_error: 0.0, worst: None, checked: 0 });
            continue;
        }
        let len = params.tensor(t).len();
        let idx: Vec<usize> = if cfg.samples >= len {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, cfg.samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = TensorCheck { tensor: t, max_rel_error: 0.0, worst: None, checked: idx.len() };
        for i in idx {
            let original = params.tensor(t)[i];
            params.tensor_mut(t)[i] = original + h;
            let up = batch_loss(&batch, &params, &acfg)?;
            params.tensor_mut(t)[i] = original - h;
            let down = batch_loss(&batch, &params, &acfg)?;
            params.tensor_mut(t)[i] = original;
            let numeric = (up - down) / (2.0 * h);
            let analytic = report.grads.tensor(t)[i];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((i, analytic, numeric));
            }
        }
        tensors.push(check);
    }
    let max_rel_error = tensors.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, tensors })
}

/// Dictionary weights (`N × C`) and representations (`N × D`) of a set of faces.
pub fn face_reps<'a>(
    p: &AlignerParams,
    cfg: &AlignerConfig,
    faces: impl IntoIterator<Item = &'a FaceInput>,
) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let trace = forward_batch(faces, p, cfg)?;
    Ok((trace.weights, trace.reps))
}
