use mpctune_bo::gp::{log_marginal_likelihood, KernelHyperparams, TrialDataset};
use mpctune_bo::nuts::{LogDensity, NutsConfig};
use mpctune_bo::saas::{sample_hyperparams, SaasPosterior, SaasPrior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TrialDataset {
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    let ys = xs.iter().map(|x| (4.0 * x[0]).sin() + x[1] * x[1]).collect();
    TrialDataset::new(xs, ys).unwrap()
}

#[test]
fn gradient_matches_central_differences_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = dataset(&mut rng, 15, 4);
    let post = SaasPosterior::new(&data, SaasPrior::default());
    let mut checked = 0;
    for _ in 0..60 {
        let z: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-2.0..1.5)).collect();
        let (lp, g) = post.logp_grad(&z);
        assert!(lp.is_finite());
        for i in 0..z.len() {
            let h = 1e-5;
            let mut a = z.clone();
            let mut b = z.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (post.logp_grad(&a).0 - post.logp_grad(&b).0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0), "coord {i}: fd {fd} vs {}", g[i]);
        }
        checked += 1;
    }
    assert!(checked >= 50);
}

#[test]
fn likelihood_is_invariant_to_joint_rescaling_of_distances_and_lengthscales() {
    let xs: Vec<Vec<f64>> = vec![vec![0.05, 0.1], vec![0.2, 0.4], vec![0.3, 0.15], vec![0.45, 0.35]];
    let ys = vec![0.2, -0.7, 1.1, 0.4];
    let near = TrialDataset::new(xs.clone(), ys.clone()).unwrap();
    let far = TrialDataset::new(xs.iter().map(|x| x.iter().map(|v| 2.0 * v).collect()).collect(), ys).unwrap();
    let a = log_marginal_likelihood(&near, &KernelHyperparams::new(1.4, vec![0.3, 0.8])).unwrap();
    let b = log_marginal_likelihood(&far, &KernelHyperparams::new(1.4, vec![0.6, 1.6])).unwrap();
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn retained_draws_follow_thinning_and_the_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = dataset(&mut rng, 12, 3);
    let cfg = NutsConfig {
        warmup: 64,
        samples: 128,
        thin: 16,
        ..NutsConfig::default()
    };
    let a = sample_hyperparams(&data, &SaasPrior::default(), &cfg, 3).unwrap();
    let b = sample_hyperparams(&data, &SaasPrior::default(), &cfg, 3).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    assert_eq!(NutsConfig::default().retained(), 64);
    for h in &a.hyperparams {
        h.validate(3).unwrap();
    }
}

/// Twelve inputs, only the first two of which matter.
pub fn sparse_function(x: &[f64]) -> f64 {
    (6.0 * x[0]).sin() + 2.0 * (x[1] - 0.4).powi(2)
}

#[test]
fn inactive_dimensions_get_longer_lengthscales() {
    let mut passes = 0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| (0..12).map(|_| rng.random::<f64>()).collect()).collect();
        let ys = xs.iter().map(|x| sparse_function(x)).collect();
        let data = TrialDataset::new(xs, ys).unwrap();
        let s = sample_hyperparams(&data, &SaasPrior::default(), &NutsConfig::default(), seed).unwrap();
        let med = s.median_lengthscales();
        let active_max = med[0].max(med[1]);
        let inactive_min = med[2..].iter().copied().fold(f64::INFINITY, f64::min);
        if inactive_min > active_max {
            passes += 1;
        }
    }
    assert!(passes >= 2, "signature held on {passes} of 3 seeds");
}
