//! Conditional Gaussian-mixture predictive distribution produced by a
//! feed-forward hypernetwork.
//!
//! For an input `x` the network emits `K` mixture logits, `K·D` means and the
//! lower-triangular Cholesky factor of each component covariance (softplus on
//! the diagonal). The forward pass exists twice: a plain `f64` version for
//! evaluation and a tape version for training; tests keep them in agreement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, AutodiffError, ParamVector, Tape, Var};
use crate::numerics::{gaussian_log_pdf, mvn_transform, Matrix, NumericsError, RngStream};
use crate::preranks::{copula, CopulaMode, PreRankError};

const INIT_STREAM_TAG: u64 = 0x696e_6974;
const CHECKPOINT_FORMAT: &str = "prerank-mixture-v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("input has {got} features, network expects {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    PreRank(#[from] PreRankError),
}

/// Structure of the Cholesky head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Full,
    /// Diagonal factors only; off-diagonal entries are fixed at zero.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default)]
    pub covariance: CovarianceKind,
}

fn default_hidden() -> Vec<usize> {
    vec![100, 100, 100]
}

fn default_components() -> usize {
    5
}

impl Architecture {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden: default_hidden(),
            components: default_components(),
            covariance: CovarianceKind::Full,
        }
    }

    /// Cholesky head outputs per component.
    pub fn chol_entries(&self) -> usize {
        let d = self.output_dim;
        match self.covariance {
            CovarianceKind::Full => d * (d + 1) / 2,
            CovarianceKind::Diagonal => d,
        }
    }

    fn layout(&self) -> Vec<(String, usize)> {
        let mut layout = Vec::new();
        let mut fan_in = self.input_dim;
        for (l, &width) in self.hidden.iter().enumerate() {
            layout.push((format!("hidden{l}.weight"), width * fan_in));
            layout.push((format!("hidden{l}.bias"), width));
            fan_in = width;
        }
        let k = self.components;
        let heads = [
            ("logits", k),
            ("means", k * self.output_dim),
            ("chol", k * self.chol_entries()),
        ];
        for (name, out) in heads {
            layout.push((format!("{name}.weight"), out * fan_in));
            layout.push((format!("{name}.bias"), out));
        }
        layout
    }
}

/// Feed-forward network mapping an input to mixture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypernetwork {
    arch: Architecture,
    params: ParamVector,
}

struct Dense {
    weight: usize,
    bias: usize,
    fan_in: usize,
    out: usize,
}

impl Hypernetwork {
    /// All parameters zero.
    pub fn zeros(arch: Architecture) -> Self {
        let params = ParamVector::from_layout(arch.layout());
        Self { arch, params }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut net = Self::zeros(arch);
        let mut rng = RngStream::derive(seed, &[INIT_STREAM_TAG]);
        let dense = net.dense_layers();
        let values = net.params.values_mut();
        for layer in dense {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for v in &mut values[layer.weight..layer.weight + layer.out * layer.fan_in] {
                *v = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        net
    }

    pub fn from_params(arch: Architecture, values: Vec<f64>) -> Result<Self, ModelError> {
        let params = ParamVector::from_layout(arch.layout()).with_values(values)?;
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn dense_layers(&self) -> Vec<Dense> {
        let seg = |name: &str| self.params.segment(name).expect("layout segment").offset;
        let mut layers = Vec::new();
        let mut fan_in = self.arch.input_dim;
        for (l, &width) in self.arch.hidden.iter().enumerate() {
            layers.push(Dense {
                weight: seg(&format!("hidden{l}.weight")),
                bias: seg(&format!("hidden{l}.bias")),
                fan_in,
                out: width,
            });
            fan_in = width;
        }
        let k = self.arch.components;
        for (name, out) in [
            ("logits", k),
            ("means", k * self.arch.output_dim),
            ("chol", k * self.arch.chol_entries()),
        ] {
            layers.push(Dense {
                weight: seg(&format!("{name}.weight")),
                bias: seg(&format!("{name}.bias")),
                fan_in,
                out,
            });
        }
        layers
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.arch.input_dim {
            return Err(ModelError::InputDimension {
                expected: self.arch.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteActivation("input"));
        }
        Ok(())
    }

    /// Mixture parameters for input `x`.
    pub fn forward(&self, x: &[f64]) -> Result<MixtureParams, ModelError> {
        self.check_input(x)?;
        let p = self.params.values();
        let layers = self.dense_layers();
        let n_hidden = self.arch.hidden.len();
        let apply = |layer: &Dense, input: &[f64]| -> Vec<f64> {
            (0..layer.out)
                .map(|o| {
                    let row = &p[layer.weight + o * layer.fan_in..layer.weight + (o + 1) * layer.fan_in];
                    p[layer.bias + o] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect()
        };
        let mut h = x.to_vec();
        for layer in &layers[..n_hidden] {
            h = apply(layer, &h).into_iter().map(|v| v.max(0.0)).collect();
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteActivation("hidden"));
        }
        let logits = apply(&layers[n_hidden], &h);
        let means_raw = apply(&layers[n_hidden + 1], &h);
        let chol_raw = apply(&layers[n_hidden + 2], &h);

        let k = self.arch.components;
        let d = self.arch.output_dim;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights = exps.iter().map(|e| e / total).collect();
        let means = (0..k).map(|c| means_raw[c * d..(c + 1) * d].to_vec()).collect();
        let per = self.arch.chol_entries();
        let chols = (0..k)
            .map(|c| {
                let raw = &chol_raw[c * per..(c + 1) * per];
                let mut l = Matrix::zeros(d, d);
                match self.arch.covariance {
                    CovarianceKind::Full => {
                        let mut idx = 0;
                        for i in 0..d {
                            for j in 0..=i {
                                l[(i, j)] = if i == j { softplus(raw[idx]) } else { raw[idx] };
                                idx += 1;
                            }
                        }
                    }
                    CovarianceKind::Diagonal => {
                        for i in 0..d {
                            l[(i, i)] = softplus(raw[i]);
                        }
                    }
                }
                l
            })
            .collect();
        let out = MixtureParams {
            weights,
            means,
            chols,
        };
        if !out.is_finite() {
            return Err(ModelError::NonFiniteActivation("heads"));
        }
        Ok(out)
    }

    /// Forward pass on a tape; `params` are the network parameters as tape nodes.
    pub fn forward_tape(&self, t: &mut Tape, params: &[Var], x: &[f64]) -> MixtureVars {
        let layers = self.dense_layers();
        let n_hidden = self.arch.hidden.len();
        let mut first = true;
        let mut h_const: &[f64] = x;
        let mut h: Vec<Var> = Vec::new();
        let apply = |t: &mut Tape, layer: &Dense, h_vars: &[Var], h_const: &[f64], from_const: bool| -> Vec<Var> {
            (0..layer.out)
                .map(|o| {
                    let w = &params[layer.weight + o * layer.fan_in..layer.weight + (o + 1) * layer.fan_in];
                    let b = params[layer.bias + o];
                    if from_const {
                        t.linear_const_input(w, h_const, b)
                    } else {
                        t.linear(w, h_vars, b)
                    }
                })
                .collect()
        };
        for layer in &layers[..n_hidden] {
            let pre = apply(t, layer, &h, h_const, first);
            h = pre.into_iter().map(|v| t.relu(v)).collect();
            first = false;
            h_const = &[];
        }
        let logits = apply(t, &layers[n_hidden], &h, h_const, first);
        let means_raw = apply(t, &layers[n_hidden + 1], &h, h_const, first);
        let chol_raw = apply(t, &layers[n_hidden + 2], &h, h_const, first);

        let k = self.arch.components;
        let d = self.arch.output_dim;
        let lse = t.logsumexp(&logits);
        let log_weights = logits.iter().map(|&l| t.sub(l, lse)).collect();
        let means = (0..k).map(|c| means_raw[c * d..(c + 1) * d].to_vec()).collect();
        let per = self.arch.chol_entries();
        let chols = (0..k)
            .map(|c| {
                let raw = &chol_raw[c * per..(c + 1) * per];
                match self.arch.covariance {
                    CovarianceKind::Full => {
                        let mut entries = Vec::with_capacity(per);
                        let mut idx = 0;
                        for i in 0..d {
                            for j in 0..=i {
                                entries.push(if i == j { t.softplus(raw[idx]) } else { raw[idx] });
                                idx += 1;
                            }
                        }
                        CholVars::full(d, entries)
                    }
                    CovarianceKind::Diagonal => {
                        CholVars::diagonal(raw.iter().map(|&r| t.softplus(r)).collect())
                    }
                }
            })
            .collect();
        MixtureVars {
            log_weights,
            means,
            chols,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            architecture: self.arch.clone(),
            params: self.params.values().iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::InvalidCheckpoint(format!("unknown format `{}`", ckpt.format)));
        }
        let values = ckpt
            .params
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| ModelError::InvalidCheckpoint(format!("parameter {i}: `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_params(ckpt.architecture.clone(), values)
            .map_err(|e| ModelError::InvalidCheckpoint(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let ckpt: Checkpoint =
            serde_json::from_str(s).map_err(|e| ModelError::InvalidCheckpoint(e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Serialized network: architecture plus parameters as shortest round-trip decimal strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub params: Vec<String>,
}

/// Lower-triangular Cholesky factor held as tape nodes.
#[derive(Debug, Clone)]
pub struct CholVars {
    dim: usize,
    diagonal_only: bool,
    entries: Vec<Var>,
}

impl CholVars {
    /// `entries` holds the lower triangle row by row.
    pub fn full(dim: usize, entries: Vec<Var>) -> Self {
        assert_eq!(entries.len(), dim * (dim + 1) / 2);
        Self {
            dim,
            diagonal_only: false,
            entries,
        }
    }

    pub fn diagonal(entries: Vec<Var>) -> Self {
        Self {
            dim: entries.len(),
            diagonal_only: true,
            entries,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> Option<Var> {
        if j > i {
            return None;
        }
        if self.diagonal_only {
            return (i == j).then(|| self.entries[i]);
        }
        Some(self.entries[i * (i + 1) / 2 + j])
    }

    pub fn diag(&self, i: usize) -> Var {
        self.get(i, i).expect("diagonal entry")
    }

    /// Nonzero entries of row `i` up to and including the diagonal, with their column.
    fn row(&self, i: usize) -> Vec<(usize, Var)> {
        if self.diagonal_only {
            vec![(i, self.entries[i])]
        } else {
            (0..=i).map(|j| (j, self.entries[i * (i + 1) / 2 + j])).collect()
        }
    }
}

/// Mixture parameters as tape nodes.
#[derive(Debug, Clone)]
pub struct MixtureVars {
    pub log_weights: Vec<Var>,
    pub means: Vec<Vec<Var>>,
    pub chols: Vec<CholVars>,
}

impl MixtureVars {
    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Plain values read back from the tape.
    pub fn values(&self, t: &Tape) -> MixtureParams {
        let d = self.dim();
        MixtureParams {
            weights: self.log_weights.iter().map(|&v| t.value(v).exp()).collect(),
            means: self.means.iter().map(|m| t.values_of(m)).collect(),
            chols: self
                .chols
                .iter()
                .map(|c| {
                    let mut l = Matrix::zeros(d, d);
                    for i in 0..d {
                        for (j, v) in c.row(i) {
                            l[(i, j)] = t.value(v);
                        }
                    }
                    l
                })
                .collect(),
        }
    }

    /// `log Σ_k π_k N(y; μ_k, L_k L_kᵀ)` with `y` on the tape.
    pub fn log_density_tape(&self, t: &mut Tape, y: &[Var]) -> Var {
        let d = y.len();
        let norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let comps: Vec<Var> = (0..self.components())
            .map(|k| {
                let chol = &self.chols[k];
                let mut z: Vec<Var> = Vec::with_capacity(d);
                for i in 0..d {
                    let r = t.sub(y[i], self.means[k][i]);
                    let row = chol.row(i);
                    let num = if row.len() > 1 {
                        let (ls, zs): (Vec<Var>, Vec<Var>) =
                            row[..row.len() - 1].iter().map(|&(j, l)| (l, z[j])).unzip();
                        let acc = t.dot(&ls, &zs);
                        t.sub(r, acc)
                    } else {
                        r
                    };
                    z.push(t.div(num, chol.diag(i)));
                }
                let quad = t.dot(&z, &z);
                let logs: Vec<Var> = (0..d).map(|i| t.ln(chol.diag(i))).collect();
                let log_det = t.sum(&logs);
                let neg_half_quad = t.scale(quad, -0.5);
                let tmp = t.sub(neg_half_quad, log_det);
                let tmp = t.add(tmp, self.log_weights[k]);
                t.shift(tmp, norm)
            })
            .collect();
        if comps.len() == 1 {
            comps[0]
        } else {
            t.logsumexp(&comps)
        }
    }

    /// Reparameterized samples `μ_k + L_k ε` for a recorded draw.
    pub fn samples_tape(&self, t: &mut Tape, noise: &[NoiseDraw]) -> Vec<Vec<Var>> {
        noise
            .iter()
            .map(|draw| {
                let k = draw.component;
                let chol = &self.chols[k];
                (0..chol.dim())
                    .map(|i| {
                        let row = chol.row(i);
                        let mut vars = Vec::with_capacity(row.len() + 1);
                        let mut coefs = Vec::with_capacity(row.len() + 1);
                        vars.push(self.means[k][i]);
                        coefs.push(1.0);
                        for (j, l) in row {
                            vars.push(l);
                            coefs.push(draw.eps[j]);
                        }
                        t.affine(&vars, &coefs, 0.0)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Plain mixture parameters for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub chols: Vec<Matrix>,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite())
            && self.means.iter().flatten().all(|v| v.is_finite())
            && self.chols.iter().all(|l| l.as_slice().iter().all(|v| v.is_finite()))
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .filter(|&k| self.weights[k] > 0.0)
            .map(|k| self.weights[k].ln() + gaussian_log_pdf(y, &self.means[k], &self.chols[k]))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    pub fn density(&self, y: &[f64]) -> f64 {
        self.log_density(y).exp()
    }

    pub fn nll(&self, y: &[f64]) -> f64 {
        -self.log_density(y)
    }

    /// Draws a component index from the mixture weights.
    pub fn draw_component(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // rounding left u above the final partial sum; take the last positive weight
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn draw_noise(&self, m: usize, rng: &mut RngStream) -> Vec<NoiseDraw> {
        let d = self.dim();
        (0..m)
            .map(|_| {
                let component = self.draw_component(rng);
                let mut eps = vec![0.0; d];
                rng.fill_standard_normal(&mut eps);
                NoiseDraw { component, eps }
            })
            .collect()
    }

    pub fn realize(&self, draw: &NoiseDraw) -> Vec<f64> {
        mvn_transform(&self.means[draw.component], &self.chols[draw.component], &draw.eps)
            .expect("noise matches dimension")
    }

    pub fn sample(&self, m: usize, rng: &mut RngStream) -> PredictiveSampleSet {
        let noise = self.draw_noise(m, rng);
        let samples = noise.iter().map(|n| self.realize(n)).collect();
        PredictiveSampleSet { samples, noise }
    }

    /// Monte-Carlo joint CDF at `y` from `s` fresh samples.
    pub fn mc_cdf(&self, y: &[f64], s: usize, mode: CopulaMode, rng: &mut RngStream) -> Result<f64, ModelError> {
        let set = self.sample(s, rng);
        Ok(copula(y, &set.samples, mode)?)
    }
}

/// Component index and standard-normal noise behind one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub component: usize,
    pub eps: Vec<f64>,
}

/// Samples from one predictive distribution with the draws that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSampleSet {
    pub samples: Vec<Vec<f64>>,
    pub noise: Vec<NoiseDraw>,
}

impl PredictiveSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
