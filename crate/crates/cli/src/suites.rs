//! Property suites run by `swarm check` and the acceptance tests.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use swarm_core::masks::{variance_inflation_check, MaskFamily, MaskSpec};
use swarm_core::phantom::{make_phantoms, PhantomKind, PhantomSpec};
use swarm_core::rng;
use swarm_core::score::AnalyticGaussianScore;
use swarm_core::sde::{reverse_sample, LangevinConfig, NoiseSchedule};
use swarm_core::tomo::{forward_project, Geometry};
use swarm_core::wavelet::{dwt2_matrix, idwt2_matrix};
use swarm_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Wavelet,
    Prop31,
    Sampler,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Wavelet, Suite::Prop31, Suite::Sampler];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Wavelet => "wavelet",
            Suite::Prop31 => "prop31",
            Suite::Sampler => "sampler",
        }
    }

    pub fn run(self, seed: u64) -> Result<SuiteReport> {
        match self {
            Suite::Wavelet => wavelet_round_trip(100, seed),
            Suite::Prop31 => variance_inflation(&Prop31Config::default(), seed),
            Suite::Sampler => sampler_oracle(&SamplerConfig::default(), seed),
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::argument(format!("unknown suite `{s}` (expected wavelet, prop31 or sampler)")))
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub details: Vec<String>,
    pub seconds: f64,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} ({:.1} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.details.join("; ")
        )
    }
}

/// Haar round trip and energy preservation on random even-sized matrices.
pub fn wavelet_round_trip(n_cases: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut worst_abs: f64 = 0.0;
    let mut worst_energy: f64 = 0.0;
    for case in 0..n_cases {
        let mut r = rng::stream(seed, &[rng::tag::NOISE, case as u64]);
        let rows = 2 * (1 + (rng::derive(seed, &[case as u64, 0]) % 48) as usize);
        let cols = 2 * (1 + (rng::derive(seed, &[case as u64, 1]) % 48) as usize);
        let x = rng::normal_matrix(&mut r, rows, cols) * 10.0;
        let bands = dwt2_matrix(x.view())?;
        let back = idwt2_matrix(&bands)?;
        let err = x.iter().zip(back.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let e = x.iter().map(|v| v * v).sum::<f64>();
        worst_abs = worst_abs.max(err);
        worst_energy = worst_energy.max((bands.energy() - e).abs() / e);
    }
    Ok(SuiteReport {
        name: "wavelet",
        passed: worst_abs <= 1e-10 && worst_energy <= 1e-9,
        details: vec![
            format!("{n_cases} cases"),
            format!("max abs error {worst_abs:.2e}"),
            format!("max relative energy error {worst_energy:.2e}"),
        ],
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct Prop31Config {
    pub n_samples: usize,
    pub n_masks: usize,
    pub repetitions: usize,
    pub image_size: usize,
    pub n_angles: usize,
}

impl Default for Prop31Config {
    fn default() -> Self {
        Prop31Config {
            n_samples: 200,
            n_masks: 500,
            repetitions: 100,
            image_size: 16,
            n_angles: 8,
        }
    }
}

/// Mask variance inflation on corpora of small phantom sinograms.
///
/// Binary masks from the training family are checked for
/// `E[var(x~)] >= var(x)`. The cross term is checked with symmetric
/// +/-1 masks, for which its expectation is zero.
pub fn variance_inflation(cfg: &Prop31Config, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let geo = Geometry::for_image(cfg.image_size, cfg.n_angles)?;
    let spec = MaskSpec {
        sparse_counts: vec![1, 2, 4, 8],
        circle_radius: cfg.n_angles as f64 / 2.0,
        ..MaskSpec::default()
    };
    let mut inflated = 0usize;
    let mut cross = Vec::with_capacity(cfg.repetitions);
    let mut cross_var = 0.0;
    for rep in 0..cfg.repetitions {
        let phantoms = make_phantoms(&PhantomSpec {
            kind: PhantomKind::RandomEllipses,
            size: cfg.image_size,
            seed: rng::derive(seed, &[rng::tag::PHANTOM, rep as u64]),
            count: cfg.n_samples,
        })?;
        let samples = phantoms
            .iter()
            .map(|p| forward_project(p, &geo).map(|s| s.into_data()))
            .collect::<Result<Vec<Array2<f64>>>>()?;
        let mask_seed = rng::derive(seed, &[rng::tag::MASK, rep as u64]);
        let binary = variance_inflation_check(&samples, &MaskFamily::Binary(spec.clone()), cfg.n_masks, mask_seed)?;
        if binary.inflated {
            inflated += 1;
        }
        let sym = variance_inflation_check(&samples, &MaskFamily::Symmetric, cfg.n_masks, mask_seed ^ 1)?;
        cross.push(sym.cross_term_mean);
        cross_var += (sym.cross_term_se * sym.cross_term_se) / cfg.repetitions.pow(2) as f64;
    }
    let cross_mean = cross.iter().sum::<f64>() / cross.len().max(1) as f64;
    let cross_se = cross_var.sqrt();
    let frac = inflated as f64 / cfg.repetitions.max(1) as f64;
    Ok(SuiteReport {
        name: "prop31",
        passed: frac >= 0.99 && cross_mean.abs() <= 3.0 * cross_se,
        details: vec![
            format!("inflated in {inflated}/{} repetitions", cfg.repetitions),
            format!("cross term {cross_mean:.3e} (se {cross_se:.3e})"),
        ],
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub size: usize,
    pub n_steps: usize,
    pub trajectories: usize,
    pub variance: f64,
    pub sigma_max: f64,
    pub langevin: LangevinConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            size: 16,
            n_steps: 200,
            trajectories: 2000,
            variance: 1.0,
            sigma_max: 50.0,
            langevin: LangevinConfig::default(),
        }
    }
}

/// Outcome of reverse sampling against a Gaussian target.
#[derive(Clone, Copy, Debug)]
pub struct SamplerStats {
    /// Mean of `x - mu` over trajectories and pixels.
    pub mean_error: f64,
    pub mean_se: f64,
    /// Pooled per-pixel standard deviation against the target's.
    pub std: f64,
    pub target_std: f64,
}

impl SamplerStats {
    pub fn std_rel_error(&self) -> f64 {
        (self.std - self.target_std).abs() / self.target_std
    }

    pub fn passes(&self) -> bool {
        self.mean_error.abs() <= 3.0 * self.mean_se && self.std_rel_error() <= 0.05
    }
}

pub fn sampler_stats(cfg: &SamplerConfig, seed: u64) -> Result<SamplerStats> {
    let n = cfg.size;
    let mu = Array2::from_shape_fn((n, n), |(i, j)| ((i as f64) * 0.4).sin() + 0.05 * j as f64);
    let score = AnalyticGaussianScore::new(mu.clone(), cfg.variance)?;
    let sched = NoiseSchedule::geometric(0.01, cfg.sigma_max, cfg.n_steps)?;
    let mut sum = Array2::<f64>::zeros((n, n));
    let mut sum_sq = Array2::<f64>::zeros((n, n));
    for k in 0..cfg.trajectories {
        let x = reverse_sample((n, n), &score, &sched, &cfg.langevin, rng::derive(seed, &[k as u64]), false)?;
        let d = x - &mu;
        sum_sq += &(&d * &d);
        sum += &d;
    }
    let m = cfg.trajectories as f64;
    let p = (n * n) as f64;
    let mean_px = &sum / m;
    let var_px = (&sum_sq - &(&mean_px * &sum)) / (m - 1.0);
    let pooled_var = var_px.sum() / p;
    Ok(SamplerStats {
        mean_error: mean_px.sum() / p,
        mean_se: (pooled_var / (m * p)).sqrt(),
        std: pooled_var.sqrt(),
        target_std: (cfg.variance + sched.sigma_min().powi(2)).sqrt(),
    })
}

/// Full predictor-corrector pass against the analytic Gaussian score.
pub fn sampler_oracle(cfg: &SamplerConfig, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let s = sampler_stats(cfg, seed)?;
    Ok(SuiteReport {
        name: "sampler",
        passed: s.passes(),
        details: vec![
            format!("{} trajectories, T = {}", cfg.trajectories, cfg.n_steps),
            format!("mean error {:.2e} (se {:.2e})", s.mean_error, s.mean_se),
            format!("std {:.4} vs {:.4} ({:.2}%)", s.std, s.target_std, 100.0 * s.std_rel_error()),
        ],
        seconds: start.elapsed().as_secs_f64(),
    })
}
