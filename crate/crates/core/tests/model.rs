use prerank::autodiff::{check_gradient, Tape};
use prerank::model::{Architecture, CovarianceKind, Hypernetwork, MixtureParams};
use prerank::numerics::{Matrix, RngStream};
use proptest::prelude::*;

fn arch(k: usize, d: usize, cov: CovarianceKind) -> Architecture {
    Architecture {
        input_dim: 3,
        output_dim: d,
        hidden: vec![8, 8, 8],
        components: k,
        covariance: cov,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heads_are_valid(k in 1usize..4, d in 1usize..4, full in any::<bool>(), seed in any::<u64>(), x in prop::array::uniform3(-3.0f64..3.0)) {
        let cov = if full { CovarianceKind::Full } else { CovarianceKind::Diagonal };
        let net = Hypernetwork::init(arch(k, d, cov), seed);
        let mix = net.forward(&x).unwrap();
        prop_assert_eq!(mix.components(), k);
        prop_assert_eq!(mix.dim(), d);
        prop_assert!(mix.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((mix.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for l in &mix.chols {
            prop_assert!(l.diagonal().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn far_observations_have_finite_log_density(y0 in -1000.0f64..1000.0, y1 in -1000.0f64..1000.0) {
        let net = Hypernetwork::init(arch(3, 2, CovarianceKind::Full), 4);
        let mix = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        prop_assert!(mix.log_density(&[y0, y1]).is_finite());
    }
}

#[test]
fn nll_gradient_matches_differences() {
    let net = Hypernetwork::init(arch(2, 2, CovarianceKind::Full), 9);
    let x = [0.5, -0.25, 1.0];
    let y = [0.3, -0.8];
    let err = check_gradient(
        |t: &mut Tape, p| {
            let mix = net.forward_tape(t, p, &x);
            let yv = t.constants(&y);
            let ld = mix.log_density_tape(t, &yv);
            t.neg(ld)
        },
        net.params(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn reparameterized_sample_mean_gradient() {
    let a = arch(2, 2, CovarianceKind::Full);
    let net = Hypernetwork::init(a, 21);
    let x = [0.2, 0.4, -0.6];
    let plain = net.forward(&x).unwrap();
    let noise = plain.draw_noise(50, &mut RngStream::new(3, 0));
    let mut t = Tape::new();
    let params = t.vars(net.params().values());
    let mix = net.forward_tape(&mut t, &params, &x);
    let samples = mix.samples_tape(&mut t, &noise);
    let coords: Vec<_> = samples.iter().map(|s| s[1]).collect();
    let mean = t.mean(&coords);
    let adj = t.backward(mean);
    let bias = net.params().segment("means.bias").unwrap().offset;
    for c in 0..2 {
        let count = noise.iter().filter(|n| n.component == c).count() as f64;
        let g = adj[params[bias + c * 2 + 1].index()];
        assert!((g - count / 50.0).abs() < 1e-6, "component {c}: {g}");
        assert_eq!(adj[params[bias + c * 2].index()], 0.0);
    }
}

#[test]
fn one_dimensional_samples_match_density() {
    let mix = MixtureParams {
        weights: vec![0.3, 0.7],
        means: vec![vec![-1.5], vec![1.0]],
        chols: vec![Matrix::from_diag(&[0.5]), Matrix::from_diag(&[0.8])],
    };
    let n = 100_000;
    let set = mix.sample(n, &mut RngStream::new(8, 0));
    let (lo, width, bins) = (-4.0, 0.25, 32);
    let mut counts = vec![0usize; bins];
    for s in &set.samples {
        let b = ((s[0] - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        }
    }
    for (b, &c) in counts.iter().enumerate() {
        let x0 = lo + b as f64 * width;
        let mass: f64 = (0..50).map(|i| mix.density(&[x0 + (i as f64 + 0.5) * width / 50.0])).sum::<f64>() * width / 50.0;
        let se = (mass * (1.0 - mass) / n as f64).sqrt();
        let observed = c as f64 / n as f64;
        assert!((observed - mass).abs() < 4.0 * se + 1e-4, "bin {b}: {observed} vs {mass}");
    }
}

#[test]
fn sample_covariance_matches_factor() {
    let mix = MixtureParams {
        weights: vec![1.0],
        means: vec![vec![0.0, 0.0]],
        chols: vec![Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2.0]]).unwrap()],
    };
    let set = mix.sample(100_000, &mut RngStream::new(2, 0));
    let cov = prerank::numerics::sample_covariance(&set.samples).unwrap();
    let want = [[4.0, 2.0], [2.0, 5.0]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((cov[(i, j)] - want[i][j]).abs() < 0.05, "{i},{j}: {}", cov[(i, j)]);
        }
    }
}

#[test]
fn density_integrates_to_one() {
    let net = Hypernetwork::init(arch(2, 2, CovarianceKind::Full), 6);
    let mix = net.forward(&[0.0, 0.5, -0.5]).unwrap();
    // box covering every component mean by six marginal standard deviations
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (m, l) in mix.means.iter().zip(&mix.chols) {
        let cov = l.matmul(&l.transpose()).unwrap();
        for d in 0..2 {
            let s = cov[(d, d)].sqrt();
            lo[d] = lo[d].min(m[d] - 6.0 * s);
            hi[d] = hi[d].max(m[d] + 6.0 * s);
        }
    }
    let n = 400;
    let (hx, hy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += mix.density(&[lo[0] + (i as f64 + 0.5) * hx, lo[1] + (j as f64 + 0.5) * hy]);
        }
    }
    assert!((total * hx * hy - 1.0).abs() < 0.01);
}

#[test]
fn checkpoint_json_round_trip() {
    let net = Hypernetwork::init(arch(2, 3, CovarianceKind::Diagonal), 1);
    let back = Hypernetwork::from_json(&net.to_json()).unwrap();
    assert_eq!(back.params().values(), net.params().values());
    assert_eq!(back.architecture(), net.architecture());
}
