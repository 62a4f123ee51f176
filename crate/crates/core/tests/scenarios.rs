use prerank::diagnostics::empirical_cdf;
use prerank::numerics::{cholesky, sym_eigen, Matrix, RngStream};
use prerank::preranks::PreRank;
use prerank::scenarios::{
    build_cov, mean_direction_basis, pc_anisotropy_flip, pca_structure, run_simulation, spectrum_scramble,
    ExpCovSpec, Misspecification, SimulationSettings,
};
use proptest::prelude::*;

fn random_spd(dim: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 0);
    let mut b = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            b[(i, j)] = rng.standard_normal();
        }
    }
    let mut a = b.matmul(&b.transpose()).unwrap();
    for i in 0..dim {
        a[(i, i)] += 0.5;
    }
    for i in 0..dim {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
    a
}

fn quad(e: &[f64], s: &Matrix) -> f64 {
    let se = s.matvec(e).unwrap();
    e.iter().zip(&se).map(|(a, b)| a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exponential_covariances_are_spd(dim in 1usize..=25, rows in 1usize..=5, cols in 1usize..=5, sigma2 in 0.1f64..5.0, length in 0.1f64..5.0) {
        prop_assert!(cholesky(&build_cov(&ExpCovSpec::index(dim, sigma2, length)).unwrap()).is_ok());
        prop_assert!(cholesky(&build_cov(&ExpCovSpec::grid(rows, cols, sigma2, length)).unwrap()).is_ok());
    }

    #[test]
    fn scramble_keeps_eigenvectors(dim in 2usize..8, gamma in 0.0f64..=1.0, seed in any::<u64>()) {
        let sigma = random_spd(dim, seed);
        let before = sym_eigen(&sigma).unwrap();
        prop_assume!(before.values.windows(2).all(|w| w[0] - w[1] > 1e-3));
        let out = spectrum_scramble(&sigma, gamma).unwrap();
        prop_assert!((out.trace() - sigma.trace()).abs() < 1e-10 * sigma.trace());
        // each original eigenvector stays an eigenvector of the output
        for j in 0..dim {
            let v = before.vector(j);
            let w = out.matvec(&v).unwrap();
            let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            let resid = w.iter().zip(&v).map(|(a, b)| (a - lambda * b).abs()).fold(0.0, f64::max);
            prop_assert!(resid < 1e-8 * out.max_abs());
        }
    }

    #[test]
    fn pca_structure_keeps_mean_direction_variance(dim in 3usize..10, c in 1.1f64..4.0, seed in any::<u64>()) {
        let sigma = random_spd(dim, seed);
        let k = 1 + (seed as usize) % ((dim - 1) / 2);
        let out = pca_structure(&sigma, c, k).unwrap();
        let e = vec![1.0 / (dim as f64).sqrt(); dim];
        prop_assert!((quad(&e, &out) - quad(&e, &sigma)).abs() < 1e-10 * sigma.max_abs());
    }

    #[test]
    fn pca_structure_of_exponential_kernel_is_spd(dim in 3usize..=25, length in 0.3f64..3.0, c in 1.1f64..3.0) {
        let sigma = build_cov(&ExpCovSpec::index(dim, 1.0, length)).unwrap();
        let out = pca_structure(&sigma, c, (dim - 1) / 2).unwrap();
        prop_assert!(cholesky(&out).is_ok());
    }

    #[test]
    fn flip_preserves_trace(dim in 2usize..10, a in 1.1f64..4.0, rotate in any::<bool>(), seed in any::<u64>()) {
        let sigma = random_spd(dim, seed);
        let k = 1 + (seed as usize) % (dim / 2);
        let out = pc_anisotropy_flip(&sigma, a, k, rotate).unwrap();
        prop_assert!((out.trace() - sigma.trace()).abs() < 1e-10 * sigma.trace());
        prop_assert!(cholesky(&out).is_ok());
    }

    #[test]
    fn mean_basis_starts_with_constant_direction(dim in 1usize..30) {
        let v = mean_direction_basis(dim);
        let first = v.column(0);
        prop_assert!(first.iter().all(|x| (x - 1.0 / (dim as f64).sqrt()).abs() < 1e-14));
        let vtv = v.transpose().matmul(&v).unwrap();
        prop_assert!(vtv.sub(&Matrix::identity(dim)).unwrap().max_abs() < 1e-12);
    }
}

fn location_run(misspec: Misspecification) -> Vec<f64> {
    let settings = SimulationSettings {
        cases: 10_000,
        ensemble: 20,
        preranks: vec![PreRank::Location],
        context_samples: 2,
        seed: 31,
    };
    let run = run_simulation(&ExpCovSpec::index(10, 1.0, 1.0), &misspec, &settings).unwrap();
    run.pits_for(PreRank::Location).unwrap().values().to_vec()
}

#[test]
fn mean_bias_pushes_location_pits_left() {
    let pits = location_run(Misspecification::MeanBias { delta: 0.5 });
    let mean = pits.iter().sum::<f64>() / pits.len() as f64;
    assert!(mean < 0.4, "mean PIT {mean}");
}

#[test]
fn overdispersion_concentrates_location_pits() {
    let pits = location_run(Misspecification::VarianceScale { factor: 1.75 });
    let n = pits.len() as f64;
    let sample = prerank::diagnostics::PitSample::new(pits, Some(20)).unwrap();
    let f = empirical_cdf(&sample, 0.5);
    assert!(f > 0.5 + 3.0 * (0.25 / n).sqrt(), "ECDF(0.5) = {f}");
}

#[test]
fn simulation_is_identical_across_worker_counts() {
    let settings = SimulationSettings {
        cases: 300,
        ensemble: 10,
        preranks: vec![PreRank::MarginalPooled, PreRank::Copula, PreRank::Pca(1), PreRank::Hdr],
        context_samples: 40,
        seed: 5,
    };
    let truth = ExpCovSpec::grid(2, 3, 1.0, 1.5);
    let misspec = Misspecification::RangeChange { length: 0.5 };
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_simulation(&truth, &misspec, &settings).unwrap())
    };
    let (a, b) = (run_with(1), run_with(3));
    for p in &settings.preranks {
        assert_eq!(a.pits_for(*p).unwrap().values(), b.pits_for(*p).unwrap().values(), "{p}");
    }
    assert_eq!(a.draws, b.draws);
}
