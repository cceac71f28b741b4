use ndarray::Array2;
use swarm_core::rng;
use swarm_core::score::AnalyticGaussianScore;
use swarm_core::sde::{reverse_sample, LangevinConfig, NoiseSchedule};

#[test]
fn reverse_pass_matches_gaussian_target() {
    let n = 8;
    let runs = 2000;
    let mu = Array2::from_shape_fn((n, n), |(i, j)| (i as f64 - j as f64) * 0.3);
    let s2 = 0.25;
    let score = AnalyticGaussianScore::new(mu.clone(), s2).unwrap();
    let sched = NoiseSchedule::geometric(0.01, 20.0, 200).unwrap();
    let cfg = LangevinConfig::default();
    let mut sum = Array2::<f64>::zeros((n, n));
    let mut sum_sq = 0.0;
    for k in 0..runs {
        let x = reverse_sample((n, n), &score, &sched, &cfg, rng::derive(11, &[k]), false).unwrap();
        let d = x - &mu;
        sum_sq += d.iter().map(|v| v * v).sum::<f64>();
        sum += &d;
    }
    let total = (runs * (n * n) as u64) as f64;
    let mean = sum.sum() / total;
    let var = sum_sq / total - mean * mean;
    let se = (var / total).sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean offset {mean} vs se {se}");
    let target = (s2 + 0.01f64.powi(2)).sqrt();
    let rel = (var.sqrt() - target).abs() / target;
    assert!(rel <= 0.05, "std {} vs {target}", var.sqrt());
    // per-pixel means, each within 4 standard errors
    let px_se = (var / runs as f64).sqrt();
    for d in sum.iter() {
        assert!((d / runs as f64).abs() <= 4.0 * px_se);
    }
}
