use prerank::numerics::{Matrix, RngStream};
use prerank::preranks::{copula, dependency, location, pca_prerank, scale, CopulaMode, PreRank};
use proptest::prelude::*;

fn vector(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..dim).map(|_| rng.standard_normal()).collect()
}

/// Samples with a clearly separated spectrum (axis variances 9, 4, 1, ...).
fn spread_samples(dim: usize, n: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|d| rng.standard_normal() * (3.0 - d as f64).max(0.3)).collect())
        .collect()
}

fn random_orthogonal(dim: usize, rng: &mut RngStream) -> Matrix {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < dim {
        let mut v = vector(dim, rng);
        for u in &q {
            let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&q).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn location_and_scale_ignore_permutation(dim in 2usize..12, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let y = vector(dim, &mut rng);
        let mut p = y.clone();
        p.reverse();
        p.rotate_left(dim / 2);
        prop_assert_eq!(location(&y), location(&p));
        prop_assert_eq!(scale(&y).to_bits(), scale(&p).to_bits());
    }

    #[test]
    fn dependency_symmetries(dim in 3usize..12, lag in 1usize..3, c in 0.1f64..5.0, shift in -5.0f64..5.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 1);
        let y = vector(dim, &mut rng);
        let base = dependency(&y, lag).unwrap();
        let rev: Vec<f64> = y.iter().rev().copied().collect();
        prop_assert!((dependency(&rev, lag).unwrap() - base).abs() <= 1e-12 * base.abs().max(1.0));
        let scaled: Vec<f64> = y.iter().map(|v| -c * v).collect();
        prop_assert!((dependency(&scaled, lag).unwrap() - base).abs() <= 1e-10 * base.abs().max(1.0));
        let shifted: Vec<f64> = y.iter().map(|v| v + shift).collect();
        prop_assert!((dependency(&shifted, lag).unwrap() - base).abs() <= 1e-10 * base.abs().max(1.0));
    }

    #[test]
    fn smooth_copula_is_monotone_and_interior(dim in 1usize..5, coord in 0usize..5, bump in 0.0f64..2.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 2);
        let samples: Vec<Vec<f64>> = (0..30).map(|_| vector(dim, &mut rng)).collect();
        let y = vector(dim, &mut rng);
        let mode = CopulaMode::Smooth { tau: 5.0 };
        let base = copula(&y, &samples, mode).unwrap();
        prop_assert!(base > 0.0 && base < 1.0);
        let mut up = y.clone();
        up[coord % dim] += bump;
        prop_assert!(copula(&up, &samples, mode).unwrap() >= base);
    }

    #[test]
    fn pca_projection_is_rotation_equivariant(dim in 2usize..5, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 3);
        let samples = spread_samples(dim, 200, &mut rng);
        let y = vector(dim, &mut rng);
        let q = random_orthogonal(dim, &mut rng);
        let rot = |v: &Vec<f64>| q.matvec(v).unwrap();
        let base = pca_prerank(&y, &samples, 1).unwrap();
        let turned = pca_prerank(&rot(&y), &samples.iter().map(rot).collect::<Vec<_>>(), 1).unwrap();
        prop_assert!((base.value.abs() - turned.value.abs()).abs() < 1e-8);
    }

    #[test]
    fn pca_projection_scales_linearly(dim in 2usize..5, c in 0.1f64..10.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 4);
        let samples = spread_samples(dim, 100, &mut rng);
        let y = vector(dim, &mut rng);
        let base = pca_prerank(&y, &samples, 1).unwrap().value;
        let scaled = pca_prerank(
            &y.iter().map(|v| c * v).collect::<Vec<_>>(),
            &samples.iter().map(|s| s.iter().map(|v| c * v).collect()).collect::<Vec<_>>(),
            1,
        )
        .unwrap()
        .value;
        prop_assert!((scaled - c * base).abs() < 1e-10 * (1.0 + c * base.abs()));
    }
}

#[test]
fn names_parse() {
    for (name, p) in [
        ("marg:3", PreRank::Marginal(3)),
        ("marg", PreRank::MarginalPooled),
        ("loc", PreRank::Location),
        ("scale", PreRank::Scale),
        ("dep:2", PreRank::Dependency(2)),
        ("hdr", PreRank::Hdr),
        ("copula", PreRank::Copula),
        ("pca:1", PreRank::Pca(1)),
    ] {
        assert_eq!(name.parse::<PreRank>().unwrap(), p);
        assert_eq!(p.to_string(), name);
    }
    assert!("dep:0".parse::<PreRank>().is_err());
    assert!("banana".parse::<PreRank>().is_err());
}

#[test]
fn index_bounds_are_validated() {
    assert!(PreRank::Marginal(4).validate(3, 10).is_err());
    assert!(PreRank::Dependency(3).validate(3, 10).is_err());
    assert!(PreRank::Pca(3).validate(5, 3).is_err());
    assert!(PreRank::Pca(2).validate(5, 3).is_ok());
}
