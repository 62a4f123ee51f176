use prerank::numerics::{cholesky, mvn_sample, sample_covariance, sym_eigen, Matrix, RngStream};
use proptest::prelude::*;

fn lower_triangular(dim: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 1);
    let mut l = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..i {
            l[(i, j)] = rng.standard_normal();
        }
        l[(i, i)] = 0.5 + rng.uniform() * 2.0;
    }
    l
}

fn random_symmetric(dim: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 2);
    let mut a = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..=i {
            let v = rng.standard_normal();
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_inverts_gram_of_lower_factor(dim in 1usize..=20, seed in any::<u64>()) {
        let l = lower_triangular(dim, seed);
        let back = cholesky(&l.matmul(&l.transpose()).unwrap()).unwrap();
        prop_assert!(back.sub(&l).unwrap().max_abs() / l.max_abs() < 1e-10);
    }

    #[test]
    fn eigen_reconstructs_symmetric(dim in 1usize..=32, seed in any::<u64>()) {
        let a = random_symmetric(dim, seed);
        let eig = sym_eigen(&a).unwrap();
        prop_assert!(eig.reconstruct().relative_frobenius_distance(&a) < 1e-10);
        let vtv = eig.vectors.transpose().matmul(&eig.vectors).unwrap();
        prop_assert!(vtv.sub(&Matrix::identity(dim)).unwrap().max_abs() < 1e-10);
        prop_assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sample_covariance_ignores_order(n in 2usize..40, dim in 1usize..6, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 3);
        let mut samples: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.standard_normal()).collect()).collect();
        let a = sample_covariance(&samples).unwrap();
        samples.reverse();
        samples.rotate_left(n / 3);
        let b = sample_covariance(&samples).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn mvn_sample_mean_within_three_standard_errors() {
    let mean = vec![1.0, -2.0, 0.5];
    let cov = Matrix::from_rows(&[vec![2.0, 0.6, 0.0], vec![0.6, 1.0, 0.3], vec![0.0, 0.3, 0.5]]).unwrap();
    let chol = cholesky(&cov).unwrap();
    let mut rng = RngStream::new(7, 0);
    let m = 20_000;
    let mut acc = vec![0.0; 3];
    for _ in 0..m {
        let s = mvn_sample(&mean, &chol, &mut rng).unwrap();
        for (a, v) in acc.iter_mut().zip(&s) {
            *a += v;
        }
    }
    for d in 0..3 {
        let se = (cov[(d, d)] / m as f64).sqrt();
        assert!((acc[d] / m as f64 - mean[d]).abs() < 3.0 * se, "coordinate {d}");
    }
}

#[test]
fn streams_are_reproducible_across_threads() {
    let draw = |s: u64| {
        let mut r = RngStream::derive(42, &[3, s]);
        (0..8).map(|_| r.standard_normal()).collect::<Vec<_>>()
    };
    let serial: Vec<_> = (0..16).map(draw).collect();
    let threaded: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..16).map(|s| scope.spawn(move || draw(s))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, threaded);
}
