//! Gaussian simulation scenarios and covariance misspecifications.
//!
//! The true law is `N(0, Σ)` with an exponential covariance either on a 1-D
//! index set or on a rectangular spatial grid. A [`Misspecification`] turns it
//! into the forecast law from which ensembles are drawn.
//!
//! Note on naming: the range parameter of the exponential kernel is called
//! `length` here; it is the same quantity sometimes written τ elsewhere,
//! which in this crate always means a sigmoid temperature.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{projected_pit, DiagnosticsError, NullDistribution, PitMode, PitSample, PreRankReport, QuantileGrid};
use crate::numerics::{cholesky, gaussian_log_pdf, mvn_sample, sym_eigen, Matrix, NumericsError, RngStream};
use crate::preranks::{PreRank, PreRankContext, PreRankError};

const CASE_STREAM_TAG: u64 = 0x6361_7365;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("dimension {dim} too small (need at least {need})")]
    DimensionTooSmall { dim: usize, need: usize },
    #[error("amplified and shrunk index sets overlap: 2k = {} > {}", 2 * .k, .available)]
    IndexOverlap { k: usize, available: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    PreRank(#[from] PreRankError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

/// Geometry on which distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    /// Points `1..=dim`, distance `|i − j|`.
    IndexDistance { dim: usize },
    /// Row-major `rows × cols` grid; point `r·cols + c` sits at `(c, r)`.
    SpatialGrid { rows: usize, cols: usize },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match *self {
            Domain::IndexDistance { dim } => dim,
            Domain::SpatialGrid { rows, cols } => rows * cols,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Exponential covariance `σ² exp(−dist/ℓ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpCovSpec {
    #[serde(flatten)]
    pub domain: Domain,
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(default = "one")]
    pub length: f64,
    /// Factor applied to the grid `y` coordinate before measuring distances.
    #[serde(default = "one")]
    pub axis_scale: f64,
}

impl ExpCovSpec {
    pub fn index(dim: usize, sigma2: f64, length: f64) -> Self {
        Self {
            domain: Domain::IndexDistance { dim },
            sigma2,
            length,
            axis_scale: 1.0,
        }
    }

    pub fn grid(rows: usize, cols: usize, sigma2: f64, length: f64) -> Self {
        Self {
            domain: Domain::SpatialGrid { rows, cols },
            sigma2,
            length,
            axis_scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.sigma2 > 0.0) || !(self.length > 0.0) || !(self.axis_scale > 0.0) {
            return Err(ScenarioError::InvalidParameter(format!(
                "sigma2, length and axis_scale must be positive ({self:?})"
            )));
        }
        if self.dim() == 0 {
            return Err(ScenarioError::DimensionTooSmall { dim: 0, need: 1 });
        }
        Ok(())
    }
}

/// Covariance matrix of an [`ExpCovSpec`].
pub fn build_cov(spec: &ExpCovSpec) -> Result<Matrix, ScenarioError> {
    spec.validate()?;
    let n = spec.dim();
    let coords: Vec<(f64, f64)> = match spec.domain {
        Domain::IndexDistance { dim } => (0..dim).map(|i| (i as f64, 0.0)).collect(),
        Domain::SpatialGrid { rows, cols } => (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (c as f64, r as f64)))
            .map(|(x, y)| (x, spec.axis_scale * y))
            .collect(),
    };
    let mut cov = Matrix::zeros(n, n);
    for i in 0..n {
        cov[(i, i)] = spec.sigma2;
        for j in (i + 1)..n {
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            let v = spec.sigma2 * (-(dx * dx + dy * dy).sqrt() / spec.length).exp();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

fn descending_eigen(sigma: &Matrix) -> Result<(Vec<f64>, Matrix), ScenarioError> {
    let eig = sym_eigen(sigma)?;
    Ok((eig.values, eig.vectors))
}

/// Interpolates the spectrum towards its reversal, `(1−γ)Λ + γΛ_rev`,
/// rescaled to the original trace; eigenvectors are kept.
pub fn spectrum_scramble(sigma: &Matrix, gamma: f64) -> Result<Matrix, ScenarioError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ScenarioError::InvalidParameter(format!("gamma {gamma} not in [0, 1]")));
    }
    let (values, vectors) = descending_eigen(sigma)?;
    let n = values.len();
    let mixed: Vec<f64> = (0..n)
        .map(|i| (1.0 - gamma) * values[i] + gamma * values[n - 1 - i])
        .collect();
    let factor = values.iter().sum::<f64>() / mixed.iter().sum::<f64>();
    let scaled: Vec<f64> = mixed.iter().map(|v| v * factor).collect();
    Ok(Matrix::congruence_diag(&vectors, &scaled))
}

/// Orthonormal basis whose first column is `1/√D`, completed by modified
/// Gram–Schmidt over the standard basis in index order.
pub fn mean_direction_basis(dim: usize) -> Matrix {
    let e = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut cols: Vec<Vec<f64>> = vec![e];
    let mut candidate = 0;
    while cols.len() < dim && candidate < dim {
        let mut v = vec![0.0; dim];
        v[candidate] = 1.0;
        candidate += 1;
        // two passes of MGS for orthogonality at round-off level
        for _ in 0..2 {
            for c in &cols {
                let proj: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= proj * ci;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut basis = Matrix::zeros(dim, dim);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..dim {
            basis[(i, j)] = c[i];
        }
    }
    basis
}

/// Scales the top-`k` eigenvalues of the block orthogonal to the mean
/// direction by `c` and the bottom-`k` by `1/c`; variance along the mean
/// direction is unchanged.
pub fn pca_structure(sigma: &Matrix, c: f64, k: usize) -> Result<Matrix, ScenarioError> {
    let dim = sigma.rows();
    if dim < 3 {
        return Err(ScenarioError::DimensionTooSmall { dim, need: 3 });
    }
    if k == 0 {
        return Err(ScenarioError::InvalidParameter("k must be at least 1".into()));
    }
    if 2 * k > dim - 1 {
        return Err(ScenarioError::IndexOverlap { k, available: dim - 1 });
    }
    if !(c > 0.0) {
        return Err(ScenarioError::InvalidParameter(format!("c = {c} must be positive")));
    }
    let v = mean_direction_basis(dim);
    let s = v.transpose().matmul(sigma)?.matmul(&v)?;
    let m = dim - 1;
    let mut block = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            block[(i, j)] = s[(i + 1, j + 1)];
        }
    }
    // V is orthonormal only to round-off, so symmetrize before the eigensolve
    for i in 0..m {
        for j in (i + 1)..m {
            let avg = 0.5 * (block[(i, j)] + block[(j, i)]);
            block[(i, j)] = avg;
            block[(j, i)] = avg;
        }
    }
    let (mu, w) = descending_eigen(&block)?;
    let distorted: Vec<f64> = mu
        .iter()
        .enumerate()
        .map(|(i, &val)| {
            if i < k {
                c * val
            } else if i >= m - k {
                val / c
            } else {
                val
            }
        })
        .collect();
    let new_block = Matrix::congruence_diag(&w, &distorted);
    let mut s_new = s.clone();
    for i in 0..m {
        for j in 0..m {
            s_new[(i + 1, j + 1)] = new_block[(i, j)];
        }
    }
    for j in 1..dim {
        let avg = 0.5 * (s_new[(0, j)] + s_new[(j, 0)]);
        s_new[(0, j)] = avg;
        s_new[(j, 0)] = avg;
    }
    let out = v.matmul(&s_new)?.matmul(&v.transpose())?;
    Ok(symmetrize(out))
}

fn symmetrize(mut m: Matrix) -> Matrix {
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

/// Reversed spectrum with the top-`k` values amplified by `a` and the
/// bottom-`k` shrunk by `a`, renormalized to the original trace, optionally
/// followed by a quarter turn in the plane of the two leading eigenvectors.
pub fn pc_anisotropy_flip(sigma: &Matrix, a: f64, k: usize, rotate: bool) -> Result<Matrix, ScenarioError> {
    let dim = sigma.rows();
    if dim < 2 {
        return Err(ScenarioError::DimensionTooSmall { dim, need: 2 });
    }
    if 2 * k > dim {
        return Err(ScenarioError::IndexOverlap { k, available: dim });
    }
    if !(a > 0.0) {
        return Err(ScenarioError::InvalidParameter(format!("a = {a} must be positive")));
    }
    let (values, mut vectors) = descending_eigen(sigma)?;
    let mut flipped: Vec<f64> = values.iter().rev().copied().collect();
    for (i, v) in flipped.iter_mut().enumerate() {
        if i < k {
            *v *= a;
        } else if i >= dim - k {
            *v /= a;
        }
    }
    let factor = values.iter().sum::<f64>() / flipped.iter().sum::<f64>();
    for v in &mut flipped {
        *v *= factor;
    }
    if rotate {
        // U·R with R = [[0, −1], [1, 0]] on the first two coordinates
        for i in 0..dim {
            let u0 = vectors[(i, 0)];
            let u1 = vectors[(i, 1)];
            vectors[(i, 0)] = u1;
            vectors[(i, 1)] = -u0;
        }
    }
    Ok(Matrix::congruence_diag(&vectors, &flipped))
}

/// Perturbation turning the true law into the forecast law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Misspecification {
    #[default]
    None,
    /// Forecast mean `δ·1`.
    MeanBias { delta: f64 },
    /// Forecast covariance `c·Σ`.
    VarianceScale { factor: f64 },
    /// Forecast covariance `(1 + b)·Σ`.
    VarianceBias { bias: f64 },
    /// Same kernel with range `length`.
    RangeChange { length: f64 },
    SpectrumScramble { gamma: f64 },
    PcaStructure { c: f64, k: usize },
    /// Grid `y` axis rescaled by `alpha` (spatial grids only).
    Isotropy { alpha: f64 },
    PcAnisotropyFlip {
        a: f64,
        k: usize,
        #[serde(default = "yes")]
        rotation: bool,
    },
}

fn yes() -> bool {
    true
}

impl Misspecification {
    pub fn label(&self) -> &'static str {
        match self {
            Misspecification::None => "none",
            Misspecification::MeanBias { .. } => "mean_bias",
            Misspecification::VarianceScale { .. } => "variance_scale",
            Misspecification::VarianceBias { .. } => "variance_bias",
            Misspecification::RangeChange { .. } => "range_change",
            Misspecification::SpectrumScramble { .. } => "spectrum_scramble",
            Misspecification::PcaStructure { .. } => "pca_structure",
            Misspecification::Isotropy { .. } => "isotropy",
            Misspecification::PcAnisotropyFlip { .. } => "pc_anisotropy_flip",
        }
    }
}

/// Mean and covariance of the forecast law.
pub fn forecast_law(truth: &ExpCovSpec, misspec: &Misspecification) -> Result<(Vec<f64>, Matrix), ScenarioError> {
    let dim = truth.dim();
    let base = build_cov(truth)?;
    let mut mean = vec![0.0; dim];
    let cov = match *misspec {
        Misspecification::None => base,
        Misspecification::MeanBias { delta } => {
            mean = vec![delta; dim];
            base
        }
        Misspecification::VarianceScale { factor } => {
            if !(factor > 0.0) {
                return Err(ScenarioError::InvalidParameter(format!("variance factor {factor}")));
            }
            base.scaled(factor)
        }
        Misspecification::VarianceBias { bias } => {
            if !(1.0 + bias > 0.0) {
                return Err(ScenarioError::InvalidParameter(format!("variance bias {bias}")));
            }
            base.scaled(1.0 + bias)
        }
        Misspecification::RangeChange { length } => build_cov(&ExpCovSpec { length, ..*truth })?,
        Misspecification::SpectrumScramble { gamma } => spectrum_scramble(&base, gamma)?,
        Misspecification::PcaStructure { c, k } => pca_structure(&base, c, k)?,
        Misspecification::Isotropy { alpha } => {
            if !matches!(truth.domain, Domain::SpatialGrid { .. }) {
                return Err(ScenarioError::InvalidParameter(
                    "isotropy misspecification needs a spatial grid".into(),
                ));
            }
            build_cov(&ExpCovSpec {
                axis_scale: alpha,
                ..*truth
            })?
        }
        Misspecification::PcAnisotropyFlip { a, k, rotation } => pc_anisotropy_flip(&base, a, k, rotation)?,
    };
    Ok((mean, cov))
}

/// Settings of a calibration simulation beyond the two laws.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSettings {
    /// Forecast cases `N`.
    pub cases: usize,
    /// Ensemble members `M` per case.
    pub ensemble: usize,
    pub preranks: Vec<PreRank>,
    /// Independent forecast draws per case used for copula CDFs and PCA directions.
    pub context_samples: usize,
    pub seed: u64,
}

/// PITs of one pre-rank, pooled over cases (and over coordinates for `marg`).
#[derive(Debug, Clone)]
pub struct PreRankPits {
    pub prerank: PreRank,
    pub pits: PitSample,
    /// Cases at which the PCA direction sat on a (near) tie in the spectrum.
    pub degenerate_cases: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub cases: usize,
    pub ensemble: usize,
    pub true_cov: Matrix,
    pub forecast_mean: Vec<f64>,
    pub forecast_cov: Matrix,
    /// Observation plus ensemble draws, `N·(M+1)`.
    pub draws: usize,
    pub pits: Vec<PreRankPits>,
}

impl SimulationRun {
    pub fn pits_for(&self, prerank: PreRank) -> Option<&PitSample> {
        self.pits.iter().find(|p| p.prerank == prerank).map(|p| &p.pits)
    }

    /// Per-pre-rank reports against a null matched to the number of cases.
    pub fn reports(&self, grid: &QuantileGrid, null: &NullDistribution) -> Vec<PreRankReport> {
        self.pits
            .iter()
            .map(|p| PreRankReport::new(p.prerank.to_string(), &p.pits, grid, null))
            .collect()
    }
}

struct CaseOutcome {
    pits: Vec<Vec<f64>>,
    degenerate: Vec<bool>,
}

/// Draws `N` observations from the true law and `M`-member ensembles from
/// the forecast law, returning hard projected PITs for every pre-rank.
///
/// Case `i` uses its own random stream, so results are identical for any
/// number of worker threads.
pub fn run_simulation(
    truth: &ExpCovSpec,
    misspec: &Misspecification,
    settings: &SimulationSettings,
) -> Result<SimulationRun, ScenarioError> {
    if settings.cases == 0 {
        return Err(ScenarioError::InvalidParameter("need at least one case".into()));
    }
    if settings.ensemble < 2 {
        return Err(ScenarioError::InvalidParameter("ensemble size must be at least 2".into()));
    }
    let dim = truth.dim();
    let true_cov = build_cov(truth)?;
    let true_chol = cholesky(&true_cov)?;
    let true_mean = vec![0.0; dim];
    let (forecast_mean, forecast_cov) = forecast_law(truth, misspec)?;
    let forecast_chol = cholesky(&forecast_cov)?;

    let needs_context = settings.preranks.iter().any(PreRank::needs_samples);
    if needs_context && settings.context_samples < 2 {
        return Err(ScenarioError::InvalidParameter(
            "copula and PCA pre-ranks need at least 2 context samples".into(),
        ));
    }
    let groups: Vec<Vec<PreRank>> = settings.preranks.iter().map(|p| p.expand(dim)).collect();
    for p in groups.iter().flatten() {
        p.validate(dim, if needs_context { settings.context_samples } else { usize::MAX })?;
    }

    let density = |y: &[f64]| gaussian_log_pdf(y, &forecast_mean, &forecast_chol).exp();

    let outcomes: Vec<Result<CaseOutcome, ScenarioError>> = (0..settings.cases)
        .into_par_iter()
        .map(|case| {
            let mut rng = RngStream::derive(settings.seed, &[CASE_STREAM_TAG, case as u64]);
            let y = mvn_sample(&true_mean, &true_chol, &mut rng)?;
            let ensemble = (0..settings.ensemble)
                .map(|_| mvn_sample(&forecast_mean, &forecast_chol, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let context = if needs_context {
                (0..settings.context_samples)
                    .map(|_| mvn_sample(&forecast_mean, &forecast_chol, &mut rng))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                Vec::new()
            };
            let mut ctx = PreRankContext::empty().with_density(&density);
            if needs_context {
                ctx = ctx.with_samples(&context);
            }
            let mut pits = Vec::with_capacity(groups.len());
            let mut degenerate = Vec::with_capacity(groups.len());
            for group in &groups {
                let mut values = Vec::with_capacity(group.len());
                let mut flagged = false;
                for p in group {
                    let prepared = p.prepare(dim, &ctx)?;
                    flagged |= prepared.pca_direction().is_some_and(|d| d.degenerate);
                    let t_obs = prepared.apply(&y)?;
                    let t_ens = ensemble.iter().map(|s| prepared.apply(s)).collect::<Result<Vec<_>, _>>()?;
                    values.push(projected_pit(t_obs, &t_ens, PitMode::Hard)?);
                }
                pits.push(values);
                degenerate.push(flagged);
            }
            Ok(CaseOutcome { pits, degenerate })
        })
        .collect();

    let mut pooled: Vec<Vec<f64>> = vec![Vec::with_capacity(settings.cases); groups.len()];
    let mut degenerate_counts = vec![0; groups.len()];
    for outcome in outcomes {
        let outcome = outcome?;
        for (g, values) in outcome.pits.into_iter().enumerate() {
            pooled[g].extend(values);
            degenerate_counts[g] += outcome.degenerate[g] as usize;
        }
    }
    let pits = settings
        .preranks
        .iter()
        .zip(pooled)
        .zip(degenerate_counts)
        .map(|((&prerank, values), degenerate_cases)| {
            Ok(PreRankPits {
                prerank,
                pits: PitSample::new(values, Some(settings.ensemble))?,
                degenerate_cases,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;

    Ok(SimulationRun {
        cases: settings.cases,
        ensemble: settings.ensemble,
        true_cov,
        forecast_mean,
        forecast_cov,
        draws: settings.cases * (settings.ensemble + 1),
        pits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.sub(b).unwrap().max_abs() <= tol
    }

    #[test]
    fn index_kernel_entries() {
        let c = build_cov(&ExpCovSpec::index(4, 1.0, 1.0)).unwrap();
        assert!((c[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert!((c[(0, 3)] - (-3f64).exp()).abs() < 1e-15);
        let c2 = build_cov(&ExpCovSpec::index(3, 2.5, 0.7)).unwrap();
        assert_eq!(c2.diagonal(), vec![2.5; 3]);
    }

    #[test]
    fn grid_kernel_three_four_five() {
        let c = build_cov(&ExpCovSpec::grid(5, 5, 1.0, 1.0)).unwrap();
        // (0,0) is point 0, (3,4) is point 4·5 + 3
        assert!((c[(0, 23)] - (-5f64).exp()).abs() < 1e-15);
        assert_eq!(c.diagonal(), vec![1.0; 25]);
    }

    #[test]
    fn axis_scale_stretches_rows_only() {
        let mut spec = ExpCovSpec::grid(2, 2, 1.0, 1.0);
        spec.axis_scale = 5.0;
        let c = build_cov(&spec).unwrap();
        assert!((c[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert!((c[(0, 2)] - (-5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn scramble_examples() {
        let s = build_cov(&ExpCovSpec::index(5, 1.0, 1.0)).unwrap();
        assert!(close(&spectrum_scramble(&s, 0.0).unwrap(), &s, 1e-12));
        let d = spectrum_scramble(&Matrix::from_diag(&[2.0, 1.0]), 1.0).unwrap();
        assert!(close(&d, &Matrix::from_diag(&[1.0, 2.0]), 1e-15));
        let i = spectrum_scramble(&Matrix::identity(4), 0.3).unwrap();
        assert!(close(&i, &Matrix::identity(4), 1e-15));
        assert!(spectrum_scramble(&s, 1.5).is_err());
    }

    #[test]
    fn pca_structure_identity() {
        let out = pca_structure(&Matrix::identity(3), 2.0, 1).unwrap();
        let mut ev = sym_eigen(&out).unwrap().values;
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip([0.5, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let e = [1.0 / 3f64.sqrt(); 3];
        let ete: f64 = (0..3).map(|i| (0..3).map(|j| e[i] * out[(i, j)] * e[j]).sum::<f64>()).sum();
        assert!((ete - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_structure_errors() {
        assert!(matches!(
            pca_structure(&Matrix::identity(2), 2.0, 1),
            Err(ScenarioError::DimensionTooSmall { .. })
        ));
        assert!(matches!(
            pca_structure(&Matrix::identity(4), 2.0, 2),
            Err(ScenarioError::IndexOverlap { .. })
        ));
    }

    #[test]
    fn pca_structure_no_distortion() {
        let s = build_cov(&ExpCovSpec::index(6, 1.0, 1.0)).unwrap();
        assert!(close(&pca_structure(&s, 1.0, 2).unwrap(), &s, 1e-10));
    }

    #[test]
    fn mean_basis_is_orthonormal() {
        let v = mean_direction_basis(7);
        let vtv = v.transpose().matmul(&v).unwrap();
        assert!(close(&vtv, &Matrix::identity(7), 1e-14));
        assert!((v[(3, 0)] - 1.0 / 7f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn flip_identity() {
        let out = pc_anisotropy_flip(&Matrix::identity(2), 2.0, 1, true).unwrap();
        assert!(close(&out, &Matrix::from_diag(&[0.4, 1.6]), 1e-15), "{out:?}");
    }

    #[test]
    fn flip_without_rotation_is_reversal() {
        let s = build_cov(&ExpCovSpec::index(5, 1.0, 1.0)).unwrap();
        let flip = pc_anisotropy_flip(&s, 1.0, 2, false).unwrap();
        assert!(close(&flip, &spectrum_scramble(&s, 1.0).unwrap(), 1e-10));
        assert!(matches!(
            pc_anisotropy_flip(&Matrix::identity(1), 2.0, 1, true),
            Err(ScenarioError::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn misspec_json_shape() {
        let m: Misspecification = serde_json::from_str(r#"{"kind":"pca_structure","params":{"c":2.0,"k":2}}"#).unwrap();
        assert_eq!(m, Misspecification::PcaStructure { c: 2.0, k: 2 });
        let n: Misspecification = serde_json::from_str(r#"{"kind":"none"}"#).unwrap();
        assert_eq!(n, Misspecification::None);
        let f: Misspecification =
            serde_json::from_str(r#"{"kind":"pc_anisotropy_flip","params":{"a":2.0,"k":3}}"#).unwrap();
        assert_eq!(f, Misspecification::PcAnisotropyFlip { a: 2.0, k: 3, rotation: true });
    }

    #[test]
    fn isotropy_requires_grid() {
        let spec = ExpCovSpec::index(4, 1.0, 1.0);
        assert!(forecast_law(&spec, &Misspecification::Isotropy { alpha: 5.0 }).is_err());
    }

    #[test]
    fn small_simulation_accounts_for_draws() {
        let settings = SimulationSettings {
            cases: 50,
            ensemble: 5,
            preranks: vec![PreRank::Location, PreRank::MarginalPooled, PreRank::Pca(1)],
            context_samples: 20,
            seed: 4,
        };
        let run = run_simulation(&ExpCovSpec::index(3, 1.0, 1.0), &Misspecification::None, &settings).unwrap();
        assert_eq!(run.draws, 50 * 6);
        assert_eq!(run.pits_for(PreRank::Location).unwrap().len(), 50);
        assert_eq!(run.pits_for(PreRank::MarginalPooled).unwrap().len(), 150);
        for p in &run.pits {
            assert!(p.pits.values().iter().all(|z| (0.0..=1.0).contains(z)));
            // hard PITs live on the {0, 1/M, …, 1} lattice
            assert!(p.pits.values().iter().all(|z| (z * 5.0 - (z * 5.0).round()).abs() < 1e-12));
        }
    }
}
