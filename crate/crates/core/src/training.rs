//! Minibatch training of the mixture hypernetwork on NLL plus a weighted
//! PCE-KDE penalty of smoothed projected PITs, and validation-based choice
//! of the penalty weight λ.
//!
//! A batch is processed in three stages. Every point gets its own tape with
//! the network parameters as leaves, the point NLL and the smoothed PIT of
//! each pre-rank. The penalty and its gradient with respect to the pooled
//! PIT values are then computed once for the batch. Finally each point tape
//! is swept backwards with seeds `1/B` on its NLL and `λ·w·∂R/∂Z` on its PIT
//! nodes, and the per-point gradients are reduced in a fixed order.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::diagnostics::{
    energy_score, pce, pce_kde_with_grad, projected_pit, projected_pit_tape, DiagnosticsError, NullDistribution,
    PitMode, PitSample, PreRankReport, QuantileGrid,
};
use crate::model::{Architecture, Hypernetwork, MixtureVars, ModelError, NoiseDraw};
use crate::numerics::RngStream;
use crate::preranks::{
    copula_smooth_tape, dependency_tape, location_tape, pca_direction, projection_tape, scale_tape, CopulaMode,
    PreRank, PreRankContext, PreRankError,
};

const NOISE_STREAM_TAG: u64 = 0x6e6f_6973;
const SHUFFLE_STREAM_TAG: u64 = 0x7368_7566;
const EVAL_STREAM_TAG: u64 = 0x6576_616c;
const REDUCE_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    PreRank(#[from] PreRankError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A pre-rank with its weight in the averaged penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PreRankEntry")]
pub struct WeightedPreRank {
    pub prerank: PreRank,
    pub weight: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PreRankEntry {
    Plain(PreRank),
    Weighted {
        prerank: PreRank,
        #[serde(default = "unit_weight")]
        weight: f64,
    },
}

fn unit_weight() -> f64 {
    1.0
}

impl From<PreRankEntry> for WeightedPreRank {
    fn from(e: PreRankEntry) -> Self {
        match e {
            PreRankEntry::Plain(prerank) => Self { prerank, weight: 1.0 },
            PreRankEntry::Weighted { prerank, weight } => Self { prerank, weight },
        }
    }
}

impl From<PreRank> for WeightedPreRank {
    fn from(prerank: PreRank) -> Self {
        Self { prerank, weight: 1.0 }
    }
}

fn d_tau() -> f64 {
    100.0
}
fn d_p() -> f64 {
    1.0
}
fn d_levels() -> usize {
    100
}
fn d_ensemble() -> usize {
    100
}
fn d_batch() -> usize {
    512
}
fn d_epochs() -> usize {
    100
}
fn d_lr() -> f64 {
    1e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_context() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub lambda: f64,
    /// Sigmoid temperature of smoothed PITs and of the smoothed CDF.
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_p")]
    pub p: f64,
    /// Quantile grid `j/(levels+1)`.
    #[serde(default = "d_levels")]
    pub grid_levels: usize,
    /// Predictive samples per point inside the training objective.
    #[serde(default = "d_ensemble")]
    pub ensemble: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    pub preranks: Vec<WeightedPreRank>,
    /// Temperature of the smoothed copula pre-rank.
    #[serde(default = "d_tau")]
    pub copula_tau: f64,
    /// Use the whole training split as one batch every step.
    #[serde(default)]
    pub full_set: bool,
    /// Predictive samples per point when evaluating.
    #[serde(default = "d_ensemble")]
    pub eval_ensemble: usize,
    /// Extra samples per point for PCA directions and copula CDFs when evaluating.
    #[serde(default = "d_context")]
    pub eval_context: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(preranks: Vec<WeightedPreRank>) -> Self {
        Self {
            lambda: 0.0,
            tau: d_tau(),
            p: d_p(),
            grid_levels: d_levels(),
            ensemble: d_ensemble(),
            batch: d_batch(),
            epochs: d_epochs(),
            learning_rate: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            adam_eps: d_adam_eps(),
            preranks,
            copula_tau: d_tau(),
            full_set: false,
            eval_ensemble: d_ensemble(),
            eval_context: d_context(),
            seed: 0,
        }
    }

    pub fn grid(&self) -> QuantileGrid {
        QuantileGrid::uniform(self.grid_levels)
    }

    pub fn validate(&self, output_dim: usize) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::InvalidConfig(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.tau > 0.0) || !(self.copula_tau > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.p >= 1.0) {
            return bad(format!("p must be >= 1, got {}", self.p));
        }
        if self.batch < 2 && !self.full_set {
            return bad("batch must be at least 2".into());
        }
        if self.ensemble < 2 || self.eval_ensemble < 2 {
            return bad("ensemble sizes must be at least 2".into());
        }
        if self.grid_levels == 0 {
            return bad("grid_levels must be positive".into());
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("invalid optimizer settings".into());
        }
        if self.preranks.is_empty() {
            return bad("at least one pre-rank is required".into());
        }
        for w in &self.preranks {
            if !(w.weight > 0.0) {
                return bad(format!("weight of {} must be positive", w.prerank));
            }
            for p in w.prerank.expand(output_dim) {
                p.validate(output_dim, self.ensemble)?;
                if p.needs_samples() {
                    p.validate(output_dim, self.eval_context)?;
                }
            }
        }
        Ok(())
    }

    fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            ensemble: self.eval_ensemble,
            context: self.eval_context,
            grid: self.grid(),
            preranks: self.preranks.iter().map(|w| w.prerank).collect(),
            seed: self.seed,
        }
    }
}

/// Inputs and targets, one row per example.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegressionData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl RegressionData {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> Result<Self, TrainingError> {
        let data = Self { x, y };
        data.check()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i].clone()).collect(),
        }
    }

    fn check(&self) -> Result<(), TrainingError> {
        if self.x.len() != self.y.len() {
            return Err(TrainingError::InvalidData(format!(
                "{} inputs but {} targets",
                self.x.len(),
                self.y.len()
            )));
        }
        if let (Some(x0), Some(y0)) = (self.x.first(), self.y.first()) {
            if self.x.iter().any(|r| r.len() != x0.len()) || self.y.iter().any(|r| r.len() != y0.len()) {
                return Err(TrainingError::InvalidData("ragged rows".into()));
            }
            if self.x.iter().chain(&self.y).flatten().any(|v| !v.is_finite()) {
                return Err(TrainingError::InvalidData("non-finite value".into()));
            }
        }
        Ok(())
    }

    fn check_against(&self, arch: &Architecture) -> Result<(), TrainingError> {
        self.check()?;
        if let (Some(x0), Some(y0)) = (self.x.first(), self.y.first()) {
            if x0.len() != arch.input_dim || y0.len() != arch.output_dim {
                return Err(TrainingError::InvalidData(format!(
                    "rows have {} features and {} targets, network expects {} and {}",
                    x0.len(),
                    y0.len(),
                    arch.input_dim,
                    arch.output_dim
                )));
            }
        }
        Ok(())
    }
}

/// One training example; `id` keys its noise stream.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub id: u64,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

/// Value and gradient of the training objective on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub nll: f64,
    /// Weighted average of the per-pre-rank penalties (0 when λ = 0).
    pub regularizer: f64,
    pub per_prerank: Vec<f64>,
    pub grad: Vec<f64>,
}

struct PointTape {
    tape: Tape,
    nll: Var,
    /// Smoothed PIT nodes in expanded pre-rank order.
    pits: Vec<Var>,
}

struct Expanded {
    flat: Vec<PreRank>,
    /// Configured pre-rank each flat entry belongs to.
    group: Vec<usize>,
    weights: Vec<f64>,
}

impl Expanded {
    fn new(preranks: &[WeightedPreRank], dim: usize) -> Self {
        let mut flat = Vec::new();
        let mut group = Vec::new();
        for (g, w) in preranks.iter().enumerate() {
            for p in w.prerank.expand(dim) {
                flat.push(p);
                group.push(g);
            }
        }
        let total: f64 = preranks.iter().map(|w| w.weight).sum();
        Self {
            flat,
            group,
            weights: preranks.iter().map(|w| w.weight / total).collect(),
        }
    }
}

fn prerank_values_tape(
    t: &mut Tape,
    prerank: PreRank,
    mix: &MixtureVars,
    y: &[Var],
    samples: &[Vec<Var>],
    sample_values: &[Vec<f64>],
    copula_tau: f64,
) -> Result<(Var, Vec<Var>), TrainingError> {
    Ok(match prerank {
        PreRank::Marginal(d) => (y[d - 1], samples.iter().map(|s| s[d - 1]).collect()),
        PreRank::Location => (
            location_tape(t, y),
            samples.iter().map(|s| location_tape(t, s)).collect(),
        ),
        PreRank::Scale => (scale_tape(t, y), samples.iter().map(|s| scale_tape(t, s)).collect()),
        PreRank::Dependency(h) => (
            dependency_tape(t, y, h),
            samples.iter().map(|s| dependency_tape(t, s, h)).collect(),
        ),
        // log density orders points exactly like the density
        PreRank::Hdr => (
            mix.log_density_tape(t, y),
            samples.iter().map(|s| mix.log_density_tape(t, s)).collect(),
        ),
        PreRank::Copula => (
            copula_smooth_tape(t, y, samples, copula_tau),
            samples.iter().map(|s| copula_smooth_tape(t, s, samples, copula_tau)).collect(),
        ),
        PreRank::Pca(k) => {
            let dir = pca_direction(sample_values, k)?;
            (
                projection_tape(t, y, &dir.vector),
                samples.iter().map(|s| projection_tape(t, s, &dir.vector)).collect(),
            )
        }
        PreRank::MarginalPooled => unreachable!("pooled marginal is expanded before use"),
    })
}

fn point_tape(
    net: &Hypernetwork,
    example: &Example<'_>,
    step: u64,
    cfg: &TrainConfig,
    expanded: &Expanded,
    with_penalty: bool,
) -> Result<PointTape, TrainingError> {
    let mut t = Tape::new();
    let params = t.vars(net.params().values());
    let mix = net.forward_tape(&mut t, &params, example.x);
    let y = t.constants(example.y);
    let ld = mix.log_density_tape(&mut t, &y);
    let nll = t.neg(ld);
    let mut pits = Vec::new();
    if with_penalty {
        let values = mix.values(&t);
        let mut rng = RngStream::derive(cfg.seed, &[NOISE_STREAM_TAG, step, example.id]);
        let noise: Vec<NoiseDraw> = values.draw_noise(cfg.ensemble, &mut rng);
        let samples = mix.samples_tape(&mut t, &noise);
        let sample_values: Vec<Vec<f64>> = samples.iter().map(|s| t.values_of(s)).collect();
        for &p in &expanded.flat {
            let (t_obs, t_samples) =
                prerank_values_tape(&mut t, p, &mix, &y, &samples, &sample_values, cfg.copula_tau)?;
            pits.push(projected_pit_tape(&mut t, t_obs, &t_samples, cfg.tau));
        }
    }
    Ok(PointTape { tape: t, nll, pits })
}

/// Objective and gradient on one batch at optimizer step `step`.
///
/// Predictive noise for an example is drawn from a stream keyed by
/// `(seed, step, example id)`.
pub fn batch_loss(
    net: &Hypernetwork,
    batch: &[Example<'_>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<BatchLoss, TrainingError> {
    let arch = net.architecture();
    if batch.len() < 2 {
        return Err(TrainingError::InvalidConfig(format!(
            "batch needs at least 2 examples, got {}",
            batch.len()
        )));
    }
    for e in batch {
        if e.x.len() != arch.input_dim || e.y.len() != arch.output_dim {
            return Err(TrainingError::InvalidData("example dimension does not match network".into()));
        }
    }
    let expanded = Expanded::new(&cfg.preranks, arch.output_dim);
    let with_penalty = cfg.lambda > 0.0;
    let tapes = batch
        .par_iter()
        .map(|e| point_tape(net, e, step, cfg, &expanded, with_penalty))
        .collect::<Result<Vec<_>, _>>()?;

    let b = batch.len() as f64;
    let nll = tapes.iter().map(|pt| pt.tape.value(pt.nll)).sum::<f64>() / b;

    let groups = cfg.preranks.len();
    let mut per_prerank = vec![0.0; groups];
    // pit_seeds[i][j] is the adjoint seed of flat PIT j at point i
    let mut pit_seeds = vec![vec![0.0; expanded.flat.len()]; tapes.len()];
    let mut regularizer = 0.0;
    if with_penalty {
        let grid = cfg.grid();
        for g in 0..groups {
            let members: Vec<usize> = (0..expanded.flat.len()).filter(|&j| expanded.group[j] == g).collect();
            let z: Vec<f64> = tapes
                .iter()
                .flat_map(|pt| members.iter().map(|&j| pt.tape.value(pt.pits[j])))
                .collect();
            let (value, dz) = pce_kde_with_grad(&z, &grid, cfg.tau, cfg.p)?;
            per_prerank[g] = value;
            regularizer += expanded.weights[g] * value;
            let scale = cfg.lambda * expanded.weights[g];
            for (i, seeds) in pit_seeds.iter_mut().enumerate() {
                for (k, &j) in members.iter().enumerate() {
                    seeds[j] = scale * dz[i * members.len() + k];
                }
            }
        }
    }
    let loss = if with_penalty { nll + cfg.lambda * regularizer } else { nll };
    if !loss.is_finite() {
        return Err(TrainingError::NonFiniteLoss { epoch: 0, batch: 0 });
    }

    let n_params = net.num_params();
    let partials: Vec<Vec<f64>> = (0..tapes.len())
        .collect::<Vec<_>>()
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; n_params];
            for &i in chunk {
                let pt = &tapes[i];
                let mut seeds = Vec::with_capacity(1 + pt.pits.len());
                seeds.push((pt.nll, 1.0 / b));
                for (j, &v) in pt.pits.iter().enumerate() {
                    seeds.push((v, pit_seeds[i][j]));
                }
                let adj = pt.tape.backward_seeded(&seeds);
                for (a, g) in acc.iter_mut().zip(&adj[..n_params]) {
                    *a += g;
                }
            }
            acc
        })
        .collect();
    let mut grad = vec![0.0; n_params];
    for part in partials {
        for (g, p) in grad.iter_mut().zip(part) {
            *g += p;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainingError::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    Ok(BatchLoss {
        loss,
        nll,
        regularizer,
        per_prerank,
        grad,
    })
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "gradient length");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Settings for scoring a network on a data split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub ensemble: usize,
    pub context: usize,
    pub grid: QuantileGrid,
    pub preranks: Vec<PreRank>,
    pub seed: u64,
}

/// Hard projected PITs and proper scores of a network on a split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub points: usize,
    pub nll: f64,
    pub energy_score: f64,
    pub pits: Vec<(PreRank, PitSample)>,
}

impl Evaluation {
    pub fn pce(&self, grid: &QuantileGrid) -> Vec<f64> {
        self.pits.iter().map(|(_, s)| pce(s, grid)).collect()
    }

    pub fn reports(&self, grid: &QuantileGrid, null: &NullDistribution) -> Vec<PreRankReport> {
        self.pits
            .iter()
            .map(|(p, s)| PreRankReport::new(p.to_string(), s, grid, null))
            .collect()
    }
}

struct PointEval {
    nll: f64,
    es: f64,
    pits: Vec<f64>,
}

/// Scores `net` on `data`. Point `i` draws from its own stream keyed by
/// `(seed, i)`, so results do not depend on how work is scheduled.
pub fn evaluate(net: &Hypernetwork, data: &RegressionData, settings: &EvalSettings) -> Result<Evaluation, TrainingError> {
    data.check_against(net.architecture())?;
    if data.is_empty() {
        return Err(TrainingError::InvalidData("nothing to evaluate".into()));
    }
    if settings.ensemble < 1 {
        return Err(TrainingError::InvalidConfig("evaluation ensemble must be positive".into()));
    }
    let dim = net.architecture().output_dim;
    let groups: Vec<Vec<PreRank>> = settings.preranks.iter().map(|p| p.expand(dim)).collect();
    let needs_context = settings.preranks.iter().any(PreRank::needs_samples);
    let per_point = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<PointEval, TrainingError> {
            let params = net.forward(&data.x[i])?;
            let y = &data.y[i];
            let mut rng = RngStream::derive(settings.seed, &[EVAL_STREAM_TAG, i as u64]);
            let samples = params.sample(settings.ensemble, &mut rng).samples;
            let context = if needs_context {
                params.sample(settings.context, &mut rng).samples
            } else {
                Vec::new()
            };
            let density = |v: &[f64]| params.density(v);
            let mut ctx = PreRankContext::empty().with_density(&density).with_copula_mode(CopulaMode::Hard);
            if needs_context {
                ctx = ctx.with_samples(&context);
            }
            let mut pits = Vec::new();
            for p in groups.iter().flatten() {
                let prepared = p.prepare(dim, &ctx)?;
                let t_obs = prepared.apply(y)?;
                let t_samples = samples.iter().map(|s| prepared.apply(s)).collect::<Result<Vec<_>, _>>()?;
                pits.push(projected_pit(t_obs, &t_samples, PitMode::Hard)?);
            }
            Ok(PointEval {
                nll: params.nll(y),
                es: energy_score(y, &samples)?,
                pits,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = per_point.len() as f64;
    let nll = per_point.iter().map(|p| p.nll).sum::<f64>() / n;
    let es = per_point.iter().map(|p| p.es).sum::<f64>() / n;
    let mut pits = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for (p, group) in settings.preranks.iter().zip(&groups) {
        let values: Vec<f64> = per_point
            .iter()
            .flat_map(|pe| pe.pits[offset..offset + group.len()].iter().copied())
            .collect();
        offset += group.len();
        pits.push((*p, PitSample::new(values, Some(settings.ensemble))?));
    }
    Ok(Evaluation {
        points: per_point.len(),
        nll,
        energy_score: es,
        pits,
    })
}

/// Metrics recorded after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: f64,
    /// Validation PCE per configured pre-rank, in config order.
    pub val_pce: Vec<f64>,
    pub val_es: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: Hypernetwork,
    pub trace: Vec<EpochRecord>,
}

impl TrainedModel {
    /// Weighted validation PCE of the final epoch.
    pub fn final_pce(&self, cfg: &TrainConfig) -> Option<f64> {
        self.trace.last().map(|r| weighted_pce(&r.val_pce, &cfg.preranks))
    }
}

fn weighted_pce(values: &[f64], preranks: &[WeightedPreRank]) -> f64 {
    let total: f64 = preranks.iter().map(|w| w.weight).sum();
    values.iter().zip(preranks).map(|(v, w)| v * w.weight).sum::<f64>() / total
}

/// Validation metrics used in the trace and by [`select_lambda`].
pub fn validation_record(
    net: &Hypernetwork,
    val: &RegressionData,
    cfg: &TrainConfig,
    epoch: usize,
    train_loss: f64,
) -> Result<EpochRecord, TrainingError> {
    let settings = cfg.eval_settings();
    let ev = evaluate(net, val, &settings)?;
    Ok(EpochRecord {
        epoch,
        train_loss,
        val_nll: ev.nll,
        val_pce: ev.pce(&settings.grid),
        val_es: ev.energy_score,
    })
}

/// Evaluation settings matching the per-epoch validation of `cfg`.
pub fn eval_settings(cfg: &TrainConfig) -> EvalSettings {
    cfg.eval_settings()
}

/// Trains a freshly initialized network for `cfg.epochs` epochs.
pub fn train(
    arch: &Architecture,
    train_data: &RegressionData,
    val_data: &RegressionData,
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainingError> {
    train_from(Hypernetwork::init(arch.clone(), cfg.seed), train_data, val_data, cfg)
}

/// Trains starting from `net`.
pub fn train_from(
    mut net: Hypernetwork,
    train_data: &RegressionData,
    val_data: &RegressionData,
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainingError> {
    let arch = net.architecture().clone();
    cfg.validate(arch.output_dim)?;
    train_data.check_against(&arch)?;
    val_data.check_against(&arch)?;
    if train_data.len() < 2 {
        return Err(TrainingError::InvalidData("training split needs at least 2 examples".into()));
    }
    if arch.output_dim < 2 {
        return Err(TrainingError::InvalidData("targets must have at least 2 dimensions".into()));
    }
    if cfg.epochs > 0 && val_data.is_empty() {
        return Err(TrainingError::InvalidData("validation split is empty".into()));
    }
    let mut adam = Adam::new(net.num_params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let batch_size = if cfg.full_set { train_data.len() } else { cfg.batch.min(train_data.len()) };
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut RngStream::derive(cfg.seed, &[SHUFFLE_STREAM_TAG, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| Example {
                    id: i as u64,
                    x: &train_data.x[i],
                    y: &train_data.y[i],
                })
                .collect();
            let out = batch_loss(&net, &batch, cfg, step).map_err(|e| match e {
                TrainingError::NonFiniteLoss { .. } => TrainingError::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            adam.step(net.params_mut().values_mut(), &out.grad);
            if net.params().values().iter().any(|v| !v.is_finite()) {
                return Err(TrainingError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += out.loss;
            batches += 1;
            step += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        trace.push(validation_record(&net, val_data, cfg, epoch + 1, train_loss)?);
    }
    Ok(TrainedModel { net, trace })
}

/// Validation outcome of one λ candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaOutcome {
    pub lambda: f64,
    pub pce: f64,
    pub energy_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub candidates: Vec<LambdaOutcome>,
    pub chosen: f64,
    /// `1.1·ES(λ=0) − ES(chosen)`; nonnegative for a feasible choice.
    pub slack: f64,
    /// No positive λ met the energy-score bound.
    pub fallback: bool,
}

/// Picks the λ with the smallest PCE among candidates whose energy score is
/// at most 10% above the λ = 0 run; ties go to the smaller λ.
pub fn choose_lambda(candidates: &[LambdaOutcome]) -> Result<LambdaSelection, TrainingError> {
    let base = candidates
        .iter()
        .find(|c| c.lambda == 0.0)
        .ok_or_else(|| TrainingError::InvalidConfig("lambda grid must contain 0".into()))?;
    let bound = base.energy_score + 0.1 * base.energy_score.abs();
    let mut best = base;
    for c in candidates {
        if c.energy_score <= bound && (c.pce < best.pce || (c.pce == best.pce && c.lambda < best.lambda)) {
            best = c;
        }
    }
    let fallback = candidates.iter().all(|c| c.lambda == 0.0 || c.energy_score > bound);
    Ok(LambdaSelection {
        candidates: candidates.to_vec(),
        chosen: best.lambda,
        slack: bound - best.energy_score,
        fallback,
    })
}

/// Trains one model per λ (concurrently) and applies [`choose_lambda`]
/// to their final validation metrics. Returns the selection and the models
/// in grid order.
pub fn select_lambda(
    arch: &Architecture,
    train_data: &RegressionData,
    val_data: &RegressionData,
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<(LambdaSelection, Vec<TrainedModel>), TrainingError> {
    if !grid.contains(&0.0) {
        return Err(TrainingError::InvalidConfig("lambda grid must contain 0".into()));
    }
    let models = grid
        .par_iter()
        .map(|&lambda| {
            let c = TrainConfig { lambda, ..cfg.clone() };
            train(arch, train_data, val_data, &c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let outcomes = grid
        .iter()
        .zip(&models)
        .map(|(&lambda, m)| {
            let record = match m.trace.last() {
                Some(r) => r.clone(),
                None => validation_record(&m.net, val_data, cfg, 0, f64::NAN)?,
            };
            Ok(LambdaOutcome {
                lambda,
                pce: weighted_pce(&record.val_pce, &cfg.preranks),
                energy_score: record.val_es,
            })
        })
        .collect::<Result<Vec<_>, TrainingError>>()?;
    Ok((choose_lambda(&outcomes)?, models))
}
