//! Dense linear algebra and seeded sampling.
//!
//! Everything here accumulates in `f64` with a fixed summation order so that
//! results are bitwise reproducible for identical inputs.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{stream_id, RngStream};

use thiserror::Error;

/// Tolerance used for symmetry checks on inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Cholesky pivots at or below this value are rejected.
pub const PIVOT_TOL: f64 = 1e-12;
/// Sweep cap for the cyclic Jacobi eigensolver.
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps")]
    NotConverged { sweeps: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Eigenpairs of a symmetric matrix, values sorted descending.
///
/// Column `j` of `vectors` pairs with `values[j]`. Each column is signed so
/// that its largest-magnitude entry (first one on ties) is positive.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenDecomposition {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j)
    }

    pub fn reconstruct(&self) -> Matrix {
        Matrix::congruence_diag(&self.vectors, &self.values)
    }
}

fn ensure_square(m: &Matrix) -> Result<(), NumericsError> {
    if m.is_square() {
        Ok(())
    } else {
        Err(NumericsError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        })
    }
}

/// Lower-triangular `L` with `L·Lᵀ = sigma`.
pub fn cholesky(sigma: &Matrix) -> Result<Matrix, NumericsError> {
    ensure_square(sigma)?;
    if !sigma.is_symmetric(SYMMETRY_TOL) {
        return Err(NumericsError::NotSymmetric);
    }
    let n = sigma.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = sigma[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot <= PIVOT_TOL || !pivot.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { index: j, pivot });
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut acc = sigma[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / diag;
        }
    }
    Ok(l)
}

/// Solves `L z = r` for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, r: &[f64]) -> Vec<f64> {
    let n = r.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut acc = r[i];
        for j in 0..i {
            acc -= l[(i, j)] * z[j];
        }
        z[i] = acc / l[(i, i)];
    }
    z
}

/// Log density of `N(mean, L·Lᵀ)` at `y`.
pub fn gaussian_log_pdf(y: &[f64], mean: &[f64], chol: &Matrix) -> f64 {
    let d = y.len();
    let resid: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    let z = forward_substitute(chol, &resid);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let log_det: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum();
    -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - log_det - 0.5 * quad
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigen(sigma: &Matrix) -> Result<EigenDecomposition, NumericsError> {
    ensure_square(sigma)?;
    if !sigma.is_symmetric(SYMMETRY_TOL) {
        return Err(NumericsError::NotSymmetric);
    }
    let n = sigma.rows();
    let mut a = sigma.clone();
    // symmetrize exactly so rotations see one value per pair
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    let mut converged = n < 2 || scale == 0.0;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * 1e-2 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // skip rotations that cannot change the diagonal in f64
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweep += 1;
    }
    if !converged {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off > 1e-12 * scale {
            return Err(NumericsError::NotConverged { sweeps: sweep });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut lead = 0;
        for k in 0..n {
            if v[(k, src)].abs() > v[(lead, src)].abs() {
                lead = k;
            }
        }
        let sign = if v[(lead, src)] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, dst)] = sign * v[(k, src)];
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Population (divide-by-M) covariance of `samples`.
///
/// Samples are visited in lexicographic order so the result does not depend
/// on their input order.
pub fn sample_covariance(samples: &[Vec<f64>]) -> Result<Matrix, NumericsError> {
    let m = samples.len();
    if m < 2 {
        return Err(NumericsError::TooFewSamples { need: 2, got: m });
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(NumericsError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| {
        samples[i]
            .iter()
            .zip(&samples[j])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut mean = vec![0.0; d];
    for &i in &order {
        for (acc, v) in mean.iter_mut().zip(&samples[i]) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    let mut dev = vec![0.0; d];
    for &i in &order {
        for ((out, v), mu) in dev.iter_mut().zip(&samples[i]).zip(&mean) {
            *out = v - mu;
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += dev[a] * dev[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / m as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// `mean + chol·eps` for a given noise vector.
pub fn mvn_transform(mean: &[f64], chol: &Matrix, eps: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let d = mean.len();
    if chol.rows() != d || chol.cols() != d || eps.len() != d {
        return Err(NumericsError::DimensionMismatch {
            expected: d,
            got: eps.len().min(chol.rows()),
        });
    }
    Ok((0..d)
        .map(|i| {
            let mut acc = mean[i];
            for j in 0..=i {
                acc += chol[(i, j)] * eps[j];
            }
            acc
        })
        .collect())
}

/// One draw from `N(mean, chol·cholᵀ)`.
pub fn mvn_sample(mean: &[f64], chol: &Matrix, rng: &mut RngStream) -> Result<Vec<f64>, NumericsError> {
    let mut eps = vec![0.0; mean.len()];
    rng.fill_standard_normal(&mut eps);
    mvn_transform(mean, chol, &eps)
}
