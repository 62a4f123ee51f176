//! Scalar projections `ρ(x, y)` of a forecast–observation pair.
//!
//! The same pre-rank is applied to the observation and to every predictive
//! sample; the rank of the former among the latter is the projected PIT.
//! Functions taking `&[f64]` evaluate a pre-rank directly, the `*_tape`
//! variants build the same quantity on a [`Tape`] for training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::numerics::{sample_covariance, sym_eigen, NumericsError};

/// `s_y²` at or below this value makes the dependency pre-rank undefined.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;
/// Eigen-gap below which a PCA direction is flagged as unstable.
pub const DEGENERATE_GAP: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreRankError {
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("lag {lag} out of range for dimension {dim}")]
    LagOutOfRange { lag: usize, dim: usize },
    #[error("component {k} out of range (dimension {dim}, {samples} samples)")]
    ComponentOutOfRange { k: usize, dim: usize, samples: usize },
    #[error("vector has (near) zero spread across coordinates")]
    DegenerateVector,
    #[error("pre-rank needs a predictive density")]
    DensityUnavailable,
    #[error("pre-rank needs predictive samples")]
    NoSamples,
    #[error("smoothing temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("unknown pre-rank `{0}`")]
    Parse(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A named pre-rank. Indices (`d`, `h`, `k`) are 1-based as in the CLI names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PreRank {
    /// `y_d`.
    Marginal(usize),
    /// All marginals, pooled into one PIT sample.
    MarginalPooled,
    Location,
    Scale,
    /// Negative variogram at lag `h` over the coordinate variance.
    Dependency(usize),
    /// Predictive density at `y`.
    Hdr,
    /// Predictive joint CDF at `y`.
    Copula,
    /// Projection on the `k`-th principal direction of the predictive samples.
    Pca(usize),
}

impl PreRank {
    /// Gradient can flow through the pre-rank value itself.
    pub fn is_differentiable(&self, copula: CopulaMode) -> bool {
        match self {
            PreRank::Pca(_) => false,
            PreRank::Copula => matches!(copula, CopulaMode::Smooth { .. }),
            _ => true,
        }
    }

    pub fn needs_samples(&self) -> bool {
        matches!(self, PreRank::Copula | PreRank::Pca(_))
    }

    pub fn needs_density(&self) -> bool {
        matches!(self, PreRank::Hdr)
    }

    /// Scalar pre-ranks making up this one; only `MarginalPooled` expands.
    pub fn expand(&self, dim: usize) -> Vec<PreRank> {
        match self {
            PreRank::MarginalPooled => (1..=dim).map(PreRank::Marginal).collect(),
            other => vec![*other],
        }
    }

    /// Checks index ranges for a `dim`-dimensional target and `samples` context samples.
    pub fn validate(&self, dim: usize, samples: usize) -> Result<(), PreRankError> {
        match *self {
            PreRank::Marginal(d) if d == 0 || d > dim => {
                Err(PreRankError::IndexOutOfRange { index: d, dim })
            }
            PreRank::Dependency(h) if dim < 2 || h == 0 || h >= dim => {
                Err(PreRankError::LagOutOfRange { lag: h, dim })
            }
            PreRank::Pca(k) if k == 0 || k > dim || k + 1 > samples => {
                Err(PreRankError::ComponentOutOfRange { k, dim, samples })
            }
            _ => Ok(()),
        }
    }

    /// Resolves per-case state (the PCA direction) once for a forecast case.
    pub fn prepare<'a>(
        &self,
        dim: usize,
        ctx: &PreRankContext<'a>,
    ) -> Result<PreparedPreRank<'a>, PreRankError> {
        let pca = match *self {
            PreRank::Pca(k) => {
                let samples = ctx.samples.ok_or(PreRankError::NoSamples)?;
                Some(pca_direction(samples, k)?)
            }
            PreRank::MarginalPooled => {
                return Err(PreRankError::Parse("marg (pooled) must be expanded".into()))
            }
            _ => None,
        };
        self.validate(dim, ctx.samples.map_or(usize::MAX, |s| s.len()))?;
        Ok(PreparedPreRank {
            kind: *self,
            ctx: ctx.clone(),
            pca,
        })
    }
}

impl fmt::Display for PreRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreRank::Marginal(d) => write!(f, "marg:{d}"),
            PreRank::MarginalPooled => write!(f, "marg"),
            PreRank::Location => write!(f, "loc"),
            PreRank::Scale => write!(f, "scale"),
            PreRank::Dependency(h) => write!(f, "dep:{h}"),
            PreRank::Hdr => write!(f, "hdr"),
            PreRank::Copula => write!(f, "copula"),
            PreRank::Pca(k) => write!(f, "pca:{k}"),
        }
    }
}

impl FromStr for PreRank {
    type Err = PreRankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PreRankError::Parse(s.to_string());
        let index = |v: &str| v.parse::<usize>().ok().filter(|&i| i >= 1).ok_or_else(bad);
        match s.split_once(':') {
            None => match s {
                "marg" => Ok(PreRank::MarginalPooled),
                "loc" => Ok(PreRank::Location),
                "scale" => Ok(PreRank::Scale),
                "hdr" => Ok(PreRank::Hdr),
                "copula" => Ok(PreRank::Copula),
                _ => Err(bad()),
            },
            Some(("marg", v)) => Ok(PreRank::Marginal(index(v)?)),
            Some(("dep", v)) => Ok(PreRank::Dependency(index(v)?)),
            Some(("pca", v)) => Ok(PreRank::Pca(index(v)?)),
            Some(_) => Err(bad()),
        }
    }
}

impl TryFrom<String> for PreRank {
    type Error = PreRankError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PreRank> for String {
    fn from(p: PreRank) -> String {
        p.to_string()
    }
}

/// Hard indicator or sigmoid-smoothed indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CopulaMode {
    Hard,
    Smooth { tau: f64 },
}

pub type DensityFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// Per-forecast-case information some pre-ranks need.
#[derive(Clone)]
pub struct PreRankContext<'a> {
    /// Predictive density evaluator (HDR).
    pub density: Option<DensityFn<'a>>,
    /// Predictive samples (copula CDF and PCA directions).
    pub samples: Option<&'a [Vec<f64>]>,
    pub copula_mode: CopulaMode,
}

impl<'a> PreRankContext<'a> {
    pub fn empty() -> Self {
        Self {
            density: None,
            samples: None,
            copula_mode: CopulaMode::Hard,
        }
    }

    pub fn with_samples(mut self, samples: &'a [Vec<f64>]) -> Self {
        self.samples = Some(samples);
        self
    }

    pub fn with_density(mut self, density: DensityFn<'a>) -> Self {
        self.density = Some(density);
        self
    }

    pub fn with_copula_mode(mut self, mode: CopulaMode) -> Self {
        self.copula_mode = mode;
        self
    }
}

/// A pre-rank bound to one forecast case.
pub struct PreparedPreRank<'a> {
    kind: PreRank,
    ctx: PreRankContext<'a>,
    pca: Option<PcaDirection>,
}

impl PreparedPreRank<'_> {
    pub fn kind(&self) -> PreRank {
        self.kind
    }

    pub fn pca_direction(&self) -> Option<&PcaDirection> {
        self.pca.as_ref()
    }

    pub fn apply(&self, y: &[f64]) -> Result<f64, PreRankError> {
        match self.kind {
            PreRank::Marginal(d) => marginal(y, d),
            PreRank::MarginalPooled => Err(PreRankError::Parse("marg".into())),
            PreRank::Location => Ok(location(y)),
            PreRank::Scale => Ok(scale(y)),
            PreRank::Dependency(h) => dependency(y, h),
            PreRank::Hdr => hdr(y, &self.ctx),
            PreRank::Copula => {
                let samples = self.ctx.samples.ok_or(PreRankError::NoSamples)?;
                copula(y, samples, self.ctx.copula_mode)
            }
            PreRank::Pca(_) => {
                let dir = self.pca.as_ref().expect("prepared with direction");
                Ok(dot(&dir.vector, y))
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn marginal(y: &[f64], d: usize) -> Result<f64, PreRankError> {
    if d == 0 || d > y.len() {
        return Err(PreRankError::IndexOutOfRange {
            index: d,
            dim: y.len(),
        });
    }
    Ok(y[d - 1])
}

/// Sum taken in ascending order, so coordinate order cannot change the result.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

pub fn location(y: &[f64]) -> f64 {
    ordered_sum(y.to_vec()) / y.len() as f64
}

/// Population variance across coordinates.
pub fn scale(y: &[f64]) -> f64 {
    let mean = location(y);
    ordered_sum(y.iter().map(|v| (v - mean) * (v - mean)).collect()) / y.len() as f64
}

/// Variogram `γ_y(h) = Σ_{d≤D−h} (y_d − y_{d+h})² / (2(D−h))`.
pub fn variogram(y: &[f64], h: usize) -> f64 {
    let n = y.len() - h;
    let total: f64 = (0..n).map(|d| (y[d] - y[d + h]).powi(2)).sum();
    total / (2.0 * n as f64)
}

/// `−γ_y(h) / s_y²`.
pub fn dependency(y: &[f64], h: usize) -> Result<f64, PreRankError> {
    let dim = y.len();
    if dim < 2 || h == 0 || h >= dim {
        return Err(PreRankError::LagOutOfRange { lag: h, dim });
    }
    let s2 = scale(y);
    if s2 <= DEGENERATE_VARIANCE {
        return Err(PreRankError::DegenerateVector);
    }
    Ok(-variogram(y, h) / s2)
}

pub fn hdr(y: &[f64], ctx: &PreRankContext<'_>) -> Result<f64, PreRankError> {
    let density = ctx.density.ok_or(PreRankError::DensityUnavailable)?;
    Ok(density(y))
}

/// Monte-Carlo joint CDF at `y`: share of samples coordinatewise `≤ y`, or
/// the mean of `∏_d σ(τ(y_d − ŷ_d))` in smooth mode.
pub fn copula(y: &[f64], samples: &[Vec<f64>], mode: CopulaMode) -> Result<f64, PreRankError> {
    if samples.is_empty() {
        return Err(PreRankError::NoSamples);
    }
    let total: f64 = match mode {
        CopulaMode::Hard => samples
            .iter()
            .filter(|s| s.iter().zip(y).all(|(a, b)| a <= b))
            .count() as f64,
        CopulaMode::Smooth { tau } => {
            if !(tau > 0.0) {
                return Err(PreRankError::InvalidTemperature(tau));
            }
            samples
                .iter()
                .map(|s| {
                    s.iter()
                        .zip(y)
                        .map(|(a, b)| sigmoid(tau * (b - a)))
                        .product::<f64>()
                })
                .sum()
        }
    };
    Ok(total / samples.len() as f64)
}

/// `k`-th principal direction of a sample set.
#[derive(Debug, Clone)]
pub struct PcaDirection {
    pub vector: Vec<f64>,
    pub eigenvalue: f64,
    /// Set when the gap to a neighbouring eigenvalue is below [`DEGENERATE_GAP`].
    pub degenerate: bool,
}

pub fn pca_direction(samples: &[Vec<f64>], k: usize) -> Result<PcaDirection, PreRankError> {
    if samples.len() < 2 {
        return Err(NumericsError::TooFewSamples {
            need: 2,
            got: samples.len(),
        }
        .into());
    }
    let dim = samples[0].len();
    if k == 0 || k > dim || k > samples.len() - 1 {
        return Err(PreRankError::ComponentOutOfRange {
            k,
            dim,
            samples: samples.len(),
        });
    }
    let cov = sample_covariance(samples)?;
    let eig = sym_eigen(&cov)?;
    let i = k - 1;
    let below = eig.values.get(i + 1).map(|v| eig.values[i] - v);
    let above = i.checked_sub(1).map(|j| eig.values[j] - eig.values[i]);
    let degenerate = below.into_iter().chain(above).any(|g| g < DEGENERATE_GAP);
    Ok(PcaDirection {
        vector: eig.vector(i),
        eigenvalue: eig.values[i],
        degenerate,
    })
}

/// Projection value plus the degenerate-spectrum flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaProjection {
    pub value: f64,
    pub degenerate: bool,
}

/// `⟨y, v_k⟩` with `v_k` from the population covariance of `samples`.
pub fn pca_prerank(y: &[f64], samples: &[Vec<f64>], k: usize) -> Result<PcaProjection, PreRankError> {
    let dir = pca_direction(samples, k)?;
    Ok(PcaProjection {
        value: dot(&dir.vector, y),
        degenerate: dir.degenerate,
    })
}

pub fn location_tape(t: &mut Tape, y: &[Var]) -> Var {
    t.mean(y)
}

pub fn scale_tape(t: &mut Tape, y: &[Var]) -> Var {
    let mean = t.mean(y);
    let sq: Vec<Var> = y
        .iter()
        .map(|&v| {
            let d = t.sub(v, mean);
            t.mul(d, d)
        })
        .collect();
    t.mean(&sq)
}

pub fn dependency_tape(t: &mut Tape, y: &[Var], h: usize) -> Var {
    let n = y.len() - h;
    let sq: Vec<Var> = (0..n)
        .map(|d| {
            let diff = t.sub(y[d], y[d + h]);
            t.mul(diff, diff)
        })
        .collect();
    let total = t.sum(&sq);
    let gamma = t.scale(total, 1.0 / (2.0 * n as f64));
    let s2 = scale_tape(t, y);
    let ratio = t.div(gamma, s2);
    t.neg(ratio)
}

/// Smooth Monte-Carlo joint CDF on the tape.
pub fn copula_smooth_tape(t: &mut Tape, y: &[Var], samples: &[Vec<Var>], tau: f64) -> Var {
    let terms: Vec<Var> = samples
        .iter()
        .map(|s| {
            let mut prod: Option<Var> = None;
            for (&a, &b) in s.iter().zip(y) {
                let diff = t.sub(b, a);
                let z = t.scale(diff, tau);
                let sg = t.sigmoid(z);
                prod = Some(match prod {
                    None => sg,
                    Some(p) => t.mul(p, sg),
                });
            }
            prod.expect("non-empty dimension")
        })
        .collect();
    t.mean(&terms)
}

/// Projection on a fixed (stop-gradient) direction.
pub fn projection_tape(t: &mut Tape, y: &[Var], direction: &[f64]) -> Var {
    t.affine(y, direction, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginal_examples() {
        assert_eq!(marginal(&[7.0, -1.0, 4.0], 2).unwrap(), -1.0);
        assert_eq!(marginal(&[5.0], 1).unwrap(), 5.0);
        assert_eq!(
            marginal(&[0.0, 0.0], 3).unwrap_err(),
            PreRankError::IndexOutOfRange { index: 3, dim: 2 }
        );
    }

    #[test]
    fn location_and_scale_examples() {
        assert_eq!(location(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(location(&[4.5; 6]), 4.5);
        assert_eq!(location(&[-1.0, 1.0]), 0.0);
        assert!((scale(&[1.0, 2.0, 3.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(scale(&[3.0; 4]), 0.0);
        assert_eq!(scale(&[0.0, 2.0]), 1.0);
    }

    #[test]
    fn dependency_examples() {
        let v = dependency(&[0.0, 1.0, 3.0], 1).unwrap();
        assert!((v + 45.0 / 56.0).abs() < 1e-15);

        // arithmetic progression: γ = c²/2 whatever the offset
        let c = 0.7;
        let a: Vec<f64> = (0..5).map(|i| 2.0 + c * i as f64).collect();
        let b: Vec<f64> = (0..5).map(|i| -9.0 + c * i as f64).collect();
        let expected = -(c * c / 2.0) / scale(&a);
        assert!((dependency(&a, 1).unwrap() - expected).abs() < 1e-12);
        assert!((dependency(&b, 1).unwrap() - expected).abs() < 1e-12);

        assert_eq!(dependency(&[1.0, 1.0], 1).unwrap_err(), PreRankError::DegenerateVector);
        assert!(matches!(
            dependency(&[1.0, 2.0], 2),
            Err(PreRankError::LagOutOfRange { .. })
        ));
    }

    #[test]
    fn hdr_needs_density() {
        assert_eq!(
            hdr(&[0.0], &PreRankContext::empty()).unwrap_err(),
            PreRankError::DensityUnavailable
        );
        let f = |y: &[f64]| (-0.5 * y.iter().map(|v| v * v).sum::<f64>()).exp() / (2.0 * std::f64::consts::PI);
        let ctx = PreRankContext::empty().with_density(&f);
        assert!((hdr(&[0.0, 0.0], &ctx).unwrap() - 0.159_154_943_091_895_35).abs() < 1e-15);
        assert!(hdr(&[0.0, 0.0], &ctx).unwrap() >= hdr(&[0.3, -0.1], &ctx).unwrap());
    }

    #[test]
    fn copula_examples() {
        let s = vec![vec![0.0, 0.0]];
        assert_eq!(copula(&[1.0, 1.0], &s, CopulaMode::Hard).unwrap(), 1.0);
        for tau in [0.1, 1.0, 100.0] {
            assert_eq!(copula(&[0.0, 0.0], &s, CopulaMode::Smooth { tau }).unwrap(), 0.25);
        }
        assert_eq!(copula(&[0.0], &[], CopulaMode::Hard).unwrap_err(), PreRankError::NoSamples);
        assert!(matches!(
            copula(&[0.0, 0.0], &s, CopulaMode::Smooth { tau: 0.0 }),
            Err(PreRankError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn pca_examples() {
        let s = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 2.0], vec![0.0, -2.0]];
        let p1 = pca_prerank(&[3.0, 5.0], &s, 1).unwrap();
        assert_eq!(p1.value, 5.0);
        assert!(!p1.degenerate);
        assert_eq!(pca_prerank(&[3.0, 5.0], &s, 2).unwrap().value, 3.0);
        for k in 1..=2 {
            assert_eq!(pca_prerank(&[0.0, 0.0], &s, k).unwrap().value, 0.0);
        }
    }

    #[test]
    fn pca_component_bounds() {
        let s = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        // M = 2 samples allow only k = 1
        assert!(pca_prerank(&[0.0; 3], &s, 1).is_ok());
        assert!(matches!(
            pca_prerank(&[0.0; 3], &s, 2),
            Err(PreRankError::ComponentOutOfRange { .. })
        ));
        assert!(pca_prerank(&[0.0; 3], &s[..1], 1).is_err());
    }

    #[test]
    fn pca_flags_degenerate_spectrum() {
        let s = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        assert!(pca_prerank(&[1.0, 1.0], &s, 1).unwrap().degenerate);
    }

    #[test]
    fn names_round_trip() {
        for name in ["marg:2", "marg", "loc", "scale", "dep:1", "hdr", "copula", "pca:3"] {
            let p: PreRank = name.parse().unwrap();
            assert_eq!(p.to_string(), name);
        }
        assert!("pca".parse::<PreRank>().is_err());
        assert!("dep:x".parse::<PreRank>().is_err());
        assert!("variance".parse::<PreRank>().is_err());
    }

    #[test]
    fn tape_versions_match_direct() {
        let y = [0.3, -1.2, 2.5, 0.9];
        let mut t = Tape::new();
        let vy = t.vars(&y);
        let loc = location_tape(&mut t, &vy);
        let sc = scale_tape(&mut t, &vy);
        let dep = dependency_tape(&mut t, &vy, 2);
        assert!((t.value(loc) - location(&y)).abs() < 1e-15);
        assert!((t.value(sc) - scale(&y)).abs() < 1e-15);
        assert!((t.value(dep) - dependency(&y, 2).unwrap()).abs() < 1e-14);

        let samples = vec![vec![0.1, 0.2, 0.0, 1.0], vec![-0.5, 0.4, 3.0, 0.2]];
        let vs: Vec<Vec<Var>> = samples.iter().map(|s| t.constants(s)).collect();
        let cop = copula_smooth_tape(&mut t, &vy, &vs, 7.0);
        let direct = copula(&y, &samples, CopulaMode::Smooth { tau: 7.0 }).unwrap();
        assert!((t.value(cop) - direct).abs() < 1e-15);
    }
}
