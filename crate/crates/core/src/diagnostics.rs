//! Projected PITs and calibration statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::numerics::RngStream;

/// Minimum number of replicates for a null distribution used as a gate.
pub const MIN_NULL_REPLICATES: usize = 1000;

const NULL_STREAM_TAG: u64 = 0x6e75_6c6c;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("PIT value {0} outside [0, 1]")]
    PitOutOfRange(f64),
    #[error("quantile levels must be strictly increasing in (0, 1)")]
    InvalidGrid,
    #[error("smoothing temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("penalty exponent must be >= 1, got {0}")]
    InvalidExponent(f64),
    #[error("need at least {need} null replicates, got {got}")]
    TooFewReplicates { need: usize, got: usize },
}

/// How the indicator `1{T̂ ≤ T}` is evaluated.
#[derive(Debug)]
pub enum PitMode<'r> {
    Hard,
    Smooth { tau: f64 },
    /// Ties and discreteness broken by a uniform draw.
    Randomized(&'r mut RngStream),
}

/// Projected PIT of `t_obs` among `t_samples`.
pub fn projected_pit(t_obs: f64, t_samples: &[f64], mode: PitMode<'_>) -> Result<f64, DiagnosticsError> {
    if t_samples.is_empty() {
        return Err(DiagnosticsError::EmptySampleSet);
    }
    let m = t_samples.len() as f64;
    Ok(match mode {
        PitMode::Hard => t_samples.iter().filter(|&&s| s <= t_obs).count() as f64 / m,
        PitMode::Smooth { tau } => {
            if !(tau > 0.0) {
                return Err(DiagnosticsError::InvalidTemperature(tau));
            }
            t_samples.iter().map(|&s| sigmoid(tau * (t_obs - s))).sum::<f64>() / m
        }
        PitMode::Randomized(rng) => {
            let below = t_samples.iter().filter(|&&s| s < t_obs).count() as f64;
            let ties = t_samples.iter().filter(|&&s| s == t_obs).count() as f64;
            let v = rng.uniform();
            (below + v * (1.0 + ties)) / (m + 1.0)
        }
    })
}

/// Smooth projected PIT on the tape: mean of `σ(τ(T − T̂_m))`.
pub fn projected_pit_tape(t: &mut Tape, t_obs: Var, t_samples: &[Var], tau: f64) -> Var {
    let terms: Vec<Var> = t_samples
        .iter()
        .map(|&s| {
            let d = t.sub(t_obs, s);
            let z = t.scale(d, tau);
            t.sigmoid(z)
        })
        .collect();
    t.mean(&terms)
}

/// A sample of PIT values, optionally known to live on `{0, 1/M, …, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitSample {
    values: Vec<f64>,
    discretization: Option<usize>,
}

impl PitSample {
    pub fn new(values: Vec<f64>, discretization: Option<usize>) -> Result<Self, DiagnosticsError> {
        if values.is_empty() {
            return Err(DiagnosticsError::EmptySampleSet);
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DiagnosticsError::PitOutOfRange(bad));
        }
        Ok(Self {
            values,
            discretization,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn discretization(&self) -> Option<usize> {
        self.discretization
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn sorted(&self) -> Vec<f64> {
        let mut s = self.values.clone();
        s.sort_by(f64::total_cmp);
        s
    }
}

/// Strictly increasing quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl QuantileGrid {
    pub const DEFAULT_LEVELS: usize = 100;

    pub fn new(levels: Vec<f64>) -> Result<Self, DiagnosticsError> {
        let in_range = levels.iter().all(|&a| a > 0.0 && a < 1.0);
        let increasing = levels.windows(2).all(|w| w[0] < w[1]);
        if levels.is_empty() || !in_range || !increasing {
            return Err(DiagnosticsError::InvalidGrid);
        }
        Ok(Self { levels })
    }

    /// `j / (m + 1)` for `j = 1..=m`.
    pub fn uniform(m: usize) -> Self {
        assert!(m >= 1, "grid needs at least one level");
        Self {
            levels: (1..=m).map(|j| j as f64 / (m + 1) as f64).collect(),
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl Default for QuantileGrid {
    fn default() -> Self {
        Self::uniform(Self::DEFAULT_LEVELS)
    }
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = DiagnosticsError;

    fn try_from(levels: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(levels)
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(g: QuantileGrid) -> Vec<f64> {
        g.levels
    }
}

/// `(1/N) Σ 1{Z_i ≤ α}`.
pub fn empirical_cdf(pits: &PitSample, alpha: f64) -> f64 {
    pits.values.iter().filter(|&&z| z <= alpha).count() as f64 / pits.len() as f64
}

fn cdf_on_grid(sorted: &[f64], grid: &QuantileGrid) -> Vec<f64> {
    let n = sorted.len() as f64;
    grid.levels
        .iter()
        .map(|&a| sorted.partition_point(|&z| z <= a) as f64 / n)
        .collect()
}

/// Probabilistic calibration error: mean over the grid of `|α_j − F̂_Z(α_j)|`.
pub fn pce(pits: &PitSample, grid: &QuantileGrid) -> f64 {
    pce_sorted(&pits.sorted(), grid)
}

fn pce_sorted(sorted: &[f64], grid: &QuantileGrid) -> f64 {
    let cdf = cdf_on_grid(sorted, grid);
    grid.levels
        .iter()
        .zip(&cdf)
        .map(|(a, f)| (a - f).abs())
        .sum::<f64>()
        / grid.len() as f64
}

/// Logistic-kernel CDF estimate `(1/N) Σ σ(τ(α − Z_i))`.
pub fn smoothed_cdf(pits: &[f64], alpha: f64, tau: f64) -> f64 {
    pits.iter().map(|&z| sigmoid(tau * (alpha - z))).sum::<f64>() / pits.len() as f64
}

/// Differentiable calibration penalty: mean over the grid of `|α_j − Φ(α_j)|^p`.
pub fn pce_kde(pits: &[f64], grid: &QuantileGrid, tau: f64, p: f64) -> Result<f64, DiagnosticsError> {
    check_kde_args(pits, tau, p)?;
    Ok(grid
        .levels
        .iter()
        .map(|&a| (a - smoothed_cdf(pits, a, tau)).abs().powf(p))
        .sum::<f64>()
        / grid.len() as f64)
}

fn check_kde_args(pits: &[f64], tau: f64, p: f64) -> Result<(), DiagnosticsError> {
    if pits.is_empty() {
        return Err(DiagnosticsError::EmptySampleSet);
    }
    if !(tau > 0.0) {
        return Err(DiagnosticsError::InvalidTemperature(tau));
    }
    if !(p >= 1.0) {
        return Err(DiagnosticsError::InvalidExponent(p));
    }
    Ok(())
}

/// [`pce_kde`] on the tape, differentiable in every PIT value.
pub fn pce_kde_tape(t: &mut Tape, pits: &[Var], grid: &QuantileGrid, tau: f64, p: f64) -> Var {
    let terms: Vec<Var> = grid
        .levels
        .iter()
        .map(|&a| {
            let sig: Vec<Var> = pits
                .iter()
                .map(|&z| {
                    let arg = t.affine(&[z], &[-tau], tau * a);
                    t.sigmoid(arg)
                })
                .collect();
            let phi = t.mean(&sig);
            let gap = t.affine(&[phi], &[-1.0], a);
            let abs = t.abs(gap);
            t.powf(abs, p)
        })
        .collect();
    t.mean(&terms)
}

/// Value and gradient of [`pce_kde`] with respect to each PIT value.
pub fn pce_kde_with_grad(
    pits: &[f64],
    grid: &QuantileGrid,
    tau: f64,
    p: f64,
) -> Result<(f64, Vec<f64>), DiagnosticsError> {
    check_kde_args(pits, tau, p)?;
    let mut t = Tape::with_capacity(pits.len() * grid.len() * 2 + 8, pits.len() * grid.len() * 2);
    let z = t.vars(pits);
    let out = pce_kde_tape(&mut t, &z, grid, tau, p);
    let adj = t.backward(out);
    Ok((t.value(out), z.iter().map(|v| adj[v.index()]).collect()))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Empirical energy score `(1/G)Σ‖Ŷ_i − y‖ − (1/(2G²))ΣΣ‖Ŷ_i − Ŷ_j‖`.
pub fn energy_score(y: &[f64], samples: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    if samples.is_empty() {
        return Err(DiagnosticsError::EmptySampleSet);
    }
    let g = samples.len() as f64;
    let first: f64 = samples.iter().map(|s| euclid(s, y)).sum::<f64>() / g;
    let mut pair = 0.0;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            pair += euclid(&samples[i], &samples[j]);
        }
    }
    // each unordered pair counted twice in the double sum
    Ok(first - pair / (g * g))
}

/// Monte-Carlo law of the PCE statistic under exact calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullDistribution {
    statistics: Vec<f64>,
    n: usize,
    grid: QuantileGrid,
    discretization: Option<usize>,
}

impl NullDistribution {
    pub fn statistics(&self) -> &[f64] {
        &self.statistics
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn replicates(&self) -> usize {
        self.statistics.len()
    }

    pub fn discretization(&self) -> Option<usize> {
        self.discretization
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    /// Nearest-rank quantile: the smallest statistic with at least `level·B` values at or below it.
    pub fn quantile(&self, level: f64) -> f64 {
        let b = self.statistics.len();
        let rank = (level * b as f64).ceil() as usize;
        self.statistics[rank.clamp(1, b) - 1]
    }

    pub fn mean(&self) -> f64 {
        self.statistics.iter().sum::<f64>() / self.statistics.len() as f64
    }
}

/// Simulates `replicates` PCE values of `n` uniform PITs (discrete on
/// `{0, 1/M, …, 1}` when `discretization = Some(M)`).
///
/// Replicate `b` draws from its own stream, so the result does not depend on
/// the number of worker threads. Use [`null_distribution`] for gating; this
/// variant also accepts fewer than [`MIN_NULL_REPLICATES`] replicates.
pub fn simulate_null(
    n: usize,
    grid: &QuantileGrid,
    replicates: usize,
    discretization: Option<usize>,
    seed: u64,
) -> NullDistribution {
    assert!(n >= 1 && replicates >= 1);
    let mut statistics: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::derive(seed, &[NULL_STREAM_TAG, n as u64, b as u64]);
            let mut u: Vec<f64> = match discretization {
                Some(m) => (0..n).map(|_| rng.below(m + 1) as f64 / m as f64).collect(),
                None => (0..n).map(|_| rng.uniform()).collect(),
            };
            u.sort_by(f64::total_cmp);
            pce_sorted(&u, grid)
        })
        .collect();
    statistics.sort_by(f64::total_cmp);
    NullDistribution {
        statistics,
        n,
        grid: grid.clone(),
        discretization,
    }
}

pub fn null_distribution(
    n: usize,
    grid: &QuantileGrid,
    replicates: usize,
    discretization: Option<usize>,
    seed: u64,
) -> Result<NullDistribution, DiagnosticsError> {
    if n == 0 {
        return Err(DiagnosticsError::EmptySampleSet);
    }
    if replicates < MIN_NULL_REPLICATES {
        return Err(DiagnosticsError::TooFewReplicates {
            need: MIN_NULL_REPLICATES,
            got: replicates,
        });
    }
    Ok(simulate_null(n, grid, replicates, discretization, seed))
}

/// Points `(α_j, F̂_Z(α_j))` of the reliability diagram.
pub fn reliability_curve(pits: &PitSample, grid: &QuantileGrid) -> Vec<(f64, f64)> {
    let cdf = cdf_on_grid(&pits.sorted(), grid);
    grid.levels.iter().copied().zip(cdf).collect()
}

/// Calibration summary of one pre-rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreRankReport {
    pub prerank: String,
    pub pce: f64,
    pub null_q95: f64,
    pub null_q99: f64,
    /// `pce <= null_q95`.
    pub pass: bool,
    pub reliability: Vec<[f64; 2]>,
}

impl PreRankReport {
    pub fn new(prerank: impl Into<String>, pits: &PitSample, grid: &QuantileGrid, null: &NullDistribution) -> Self {
        let pce = pce(pits, grid);
        let null_q95 = null.quantile(0.95);
        Self {
            prerank: prerank.into(),
            pce,
            null_q95,
            null_q99: null.quantile(0.99),
            pass: pce <= null_q95,
            reliability: reliability_curve(pits, grid)
                .into_iter()
                .map(|(a, f)| [a, f])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub preranks: Vec<PreRankReport>,
    pub nll: f64,
    pub energy_score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pits(v: &[f64]) -> PitSample {
        PitSample::new(v.to_vec(), None).unwrap()
    }

    fn grid3() -> QuantileGrid {
        QuantileGrid::new(vec![0.25, 0.5, 0.75]).unwrap()
    }

    #[test]
    fn hard_pit_examples() {
        let s = [0.1, 0.3, 0.7, 0.9];
        assert_eq!(projected_pit(0.5, &s, PitMode::Hard).unwrap(), 0.5);
        assert_eq!(projected_pit(0.0, &s, PitMode::Hard).unwrap(), 0.0);
        assert_eq!(projected_pit(1.0, &s, PitMode::Hard).unwrap(), 1.0);
        assert_eq!(projected_pit(0.3, &s, PitMode::Hard).unwrap(), 0.5);
        assert_eq!(
            projected_pit(0.0, &[], PitMode::Hard).unwrap_err(),
            DiagnosticsError::EmptySampleSet
        );
    }

    #[test]
    fn randomized_pit_stays_in_its_cell() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..100 {
            let z = projected_pit(0.5, &[0.1, 0.5, 0.9], PitMode::Randomized(&mut rng)).unwrap();
            // one below, one tie: (1 + V·2)/4 ∈ [0.25, 0.75)
            assert!((0.25..0.75).contains(&z));
        }
    }

    #[test]
    fn empirical_cdf_examples() {
        assert_eq!(empirical_cdf(&pits(&[0.5]), 0.5), 1.0);
        assert_eq!(empirical_cdf(&pits(&[0.5]), 0.25), 0.0);
        assert!((empirical_cdf(&pits(&[0.25, 0.5, 0.75]), 0.5) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pce_examples() {
        assert!((pce(&pits(&[0.5]), &grid3()) - 1.0 / 3.0).abs() < 1e-15);
        assert!((pce(&pits(&[0.25, 0.5, 0.75]), &grid3()) - 1.0 / 6.0).abs() < 1e-15);
        let n = 20_000;
        let dense: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!(pce(&pits(&dense), &QuantileGrid::default()) < 2.0 / n as f64);
    }

    #[test]
    fn smoothed_cdf_examples() {
        for tau in [1.0, 10.0, 100.0] {
            assert_eq!(smoothed_cdf(&[0.5], 0.5, tau), 0.5);
        }
        assert!((smoothed_cdf(&[0.25], 0.75, 100.0) - 1.0).abs() < 1e-15);
        let z = [0.1, 0.33, 0.62];
        for a in [0.2, 0.5, 0.9] {
            let exact = empirical_cdf(&pits(&z), a);
            assert!((smoothed_cdf(&z, a, 1e6) - exact).abs() < 1e-6);
        }
    }

    #[test]
    fn pce_kde_examples() {
        let v = pce_kde(&[0.5], &grid3(), 100.0, 1.0).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-9, "{v}");
        assert!(pce_kde(&[], &grid3(), 100.0, 1.0).is_err());
        assert!(pce_kde(&[0.5], &grid3(), 100.0, 0.5).is_err());
    }

    #[test]
    fn pce_kde_tape_matches_direct() {
        let z = [0.12, 0.4, 0.41, 0.93];
        let g = QuantileGrid::uniform(9);
        for p in [1.0, 2.0] {
            let (v, grad) = pce_kde_with_grad(&z, &g, 30.0, p).unwrap();
            assert!((v - pce_kde(&z, &g, 30.0, p).unwrap()).abs() < 1e-15);
            assert_eq!(grad.len(), 4);
        }
    }

    #[test]
    fn energy_score_examples() {
        let y = vec![1.0, -2.0];
        assert_eq!(energy_score(&y, &[y.clone(), y.clone(), y.clone()]).unwrap(), 0.0);
        assert_eq!(energy_score(&[1.0], &[vec![0.0], vec![2.0]]).unwrap(), 0.5);
        assert_eq!(energy_score(&[0.0, 0.0], &[vec![3.0, 4.0]]).unwrap(), 5.0);
    }

    #[test]
    fn null_with_single_replicate() {
        let null = simulate_null(10, &grid3(), 1, None, 1);
        let s = null.statistics()[0];
        for level in [0.01, 0.5, 0.95, 0.99, 1.0] {
            assert_eq!(null.quantile(level), s);
        }
    }

    #[test]
    fn null_requires_enough_replicates() {
        assert!(matches!(
            null_distribution(10, &grid3(), 999, None, 1),
            Err(DiagnosticsError::TooFewReplicates { .. })
        ));
    }

    #[test]
    fn discrete_null_values_lie_on_lattice() {
        let null = simulate_null(1, &QuantileGrid::uniform(4), 50, Some(2), 9);
        // a single PIT in {0, 0.5, 1} gives one of three PCE values
        let mut distinct: Vec<f64> = null.statistics().to_vec();
        distinct.dedup();
        assert!(distinct.len() <= 3);
    }

    #[test]
    fn reliability_examples() {
        let c = reliability_curve(&pits(&[0.25, 0.5, 0.75]), &grid3());
        let expect = [(0.25, 1.0 / 3.0), (0.5, 2.0 / 3.0), (0.75, 1.0)];
        for (got, want) in c.iter().zip(expect) {
            assert_eq!(got.0, want.0);
            assert!((got.1 - want.1).abs() < 1e-15);
        }
        let zeros = reliability_curve(&pits(&[0.0; 5]), &QuantileGrid::default());
        assert!(zeros.iter().all(|&(_, f)| f == 1.0));

        let n = 500;
        let order: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let c = reliability_curve(&pits(&order), &QuantileGrid::default());
        assert!(c.iter().all(|&(a, f)| (f - a).abs() <= 1.0 / n as f64));
    }

    #[test]
    fn pit_sample_rejects_out_of_range() {
        assert_eq!(
            PitSample::new(vec![0.2, 1.5], None).unwrap_err(),
            DiagnosticsError::PitOutOfRange(1.5)
        );
    }

    #[test]
    fn grid_validation() {
        assert!(QuantileGrid::new(vec![0.5, 0.5]).is_err());
        assert!(QuantileGrid::new(vec![0.0, 0.5]).is_err());
        assert_eq!(QuantileGrid::uniform(100).levels()[0], 1.0 / 101.0);
    }
}
