//! Variance-exploding SDE: noise schedule, forward perturbation,
//! reverse-diffusion predictor, Langevin corrector and the two
//! data-consistency projections.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::rng::{self, NoiseSource};
use crate::score::ScoreFunction;
use crate::tomo::{SamplingOperator, Sinogram};
use crate::wavelet::{extract_hf, HighFrequencySet};

/// Geometric grid `sigma_t = sigma_min * (sigma_max / sigma_min)^(t / (T-1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn geometric(sigma_min: f64, sigma_max: f64, n_steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        if n_steps < 2 {
            return Err(Error::config("noise schedule needs at least 2 steps"));
        }
        let ratio = sigma_max / sigma_min;
        let last = (n_steps - 1) as f64;
        let mut sigmas: Vec<f64> = (0..n_steps)
            .map(|t| sigma_min * ratio.powf(t as f64 / last))
            .collect();
        sigmas[0] = sigma_min;
        sigmas[n_steps - 1] = sigma_max;
        Ok(NoiseSchedule {
            sigma_min,
            sigma_max,
            sigmas,
        })
    }

    /// Default desk-scale schedule: `sigma_min = 0.01`,
    /// `sigma_max = 50 * max|data|`.
    pub fn for_data(max_abs: f64, n_steps: usize) -> Result<Self> {
        Self::geometric(0.01, 50.0 * max_abs.max(0.01), n_steps)
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn n_steps(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.sigmas.len() {
            return Err(Error::argument(format!(
                "step {t} outside schedule of {} steps",
                self.sigmas.len()
            )));
        }
        Ok(())
    }
}

/// Langevin corrector settings. The step size follows
/// `eps = 2 * (snr * |z| / |s|)^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LangevinConfig {
    pub snr: f64,
    pub n_corrector_steps: usize,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            snr: 0.16,
            n_corrector_steps: 1,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::config(format!("snr must be finite and non-negative, got {}", self.snr)));
        }
        Ok(())
    }
}

fn norm(x: ArrayView2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn checked_score(score: &dyn ScoreFunction, x: ArrayView2<f64>, sigma: f64, what: &str, t: usize) -> Result<Array2<f64>> {
    let s = score.evaluate(x, sigma)?;
    if s.dim() != x.dim() {
        return Err(Error::numeric(format!("{what} at step {t}: score shape {:?} != {:?}", s.dim(), x.dim())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{what} at step {t}: non-finite score")));
    }
    Ok(s)
}

/// Sample of the forward kernel `N(x0, sigma_t^2 I)`.
pub fn perturb(x0: ArrayView2<f64>, t: usize, sched: &NoiseSchedule, seed: u64) -> Result<Array2<f64>> {
    sched.check(t)?;
    let (r, c) = x0.dim();
    let z = rng::normal_matrix(&mut rng::stream(seed, &[rng::tag::PERTURB, t as u64]), r, c);
    Ok(&x0 + &(z * sched.sigma(t)))
}

/// One reverse-diffusion step from level `t` to `t - 1`:
/// `x + (s_t^2 - s_{t-1}^2) score(x, s_t) + sqrt(s_t^2 - s_{t-1}^2) z`.
pub fn predictor_step(
    x: ArrayView2<f64>,
    t: usize,
    score: &dyn ScoreFunction,
    sched: &NoiseSchedule,
    noise: NoiseSource,
) -> Result<Array2<f64>> {
    sched.check(t)?;
    if t == 0 {
        return Err(Error::argument("predictor needs t >= 1"));
    }
    let (hi, lo) = (sched.sigma(t), sched.sigma(t - 1));
    let dvar = hi * hi - lo * lo;
    let s = checked_score(score, x, hi, "predictor", t)?;
    let z = noise.draw(x.nrows(), x.ncols());
    let sd = dvar.sqrt();
    let mut out = x.to_owned();
    Zip::from(&mut out).and(&s).and(&z).for_each(|o, &sv, &zv| {
        *o += dvar * sv + sd * zv;
    });
    Ok(out)
}

/// One Langevin step at noise level `t`.
pub fn corrector_step(
    x: ArrayView2<f64>,
    t: usize,
    score: &dyn ScoreFunction,
    sched: &NoiseSchedule,
    cfg: &LangevinConfig,
    noise: NoiseSource,
) -> Result<Array2<f64>> {
    sched.check(t)?;
    cfg.validate()?;
    let s = checked_score(score, x, sched.sigma(t), "corrector", t)?;
    let z = noise.draw(x.nrows(), x.ncols());
    let (s_norm, z_norm) = (norm(s.view()), norm(z.view()));
    let eps = if s_norm > 0.0 {
        2.0 * (cfg.snr * z_norm / s_norm).powi(2)
    } else {
        0.0
    };
    if !eps.is_finite() {
        return Err(Error::numeric(format!("corrector at step {t}: non-finite step size")));
    }
    let sd = (2.0 * eps).sqrt();
    let mut out = x.to_owned();
    Zip::from(&mut out).and(&s).and(&z).for_each(|o, &sv, &zv| {
        *o += eps * sv + sd * zv;
    });
    Ok(out)
}

/// `cfg.n_corrector_steps` Langevin steps at level `t`, each with its own
/// noise stream.
pub fn correct(
    x: ArrayView2<f64>,
    t: usize,
    score: &dyn ScoreFunction,
    sched: &NoiseSchedule,
    cfg: &LangevinConfig,
    noise: NoiseSource,
) -> Result<Array2<f64>> {
    let mut cur = x.to_owned();
    for k in 0..cfg.n_corrector_steps {
        cur = corrector_step(cur.view(), t, score, sched, cfg, noise.child(&[k as u64]))?;
    }
    Ok(cur)
}

/// Unconditional predictor-corrector pass from `N(0, sigma_max^2)` down
/// to level 0. With `denoise_last` the result is the posterior-mean
/// estimate `x + sigma_0^2 score(x, sigma_0)` instead of the final noisy
/// sample.
pub fn reverse_sample(
    shape: (usize, usize),
    score: &dyn ScoreFunction,
    sched: &NoiseSchedule,
    cfg: &LangevinConfig,
    seed: u64,
    denoise_last: bool,
) -> Result<Array2<f64>> {
    let top = sched.n_steps() - 1;
    let mut x = rng::normal_matrix(&mut rng::stream(seed, &[rng::tag::INIT]), shape.0, shape.1) * sched.sigma_max();
    for t in (1..=top).rev() {
        x = predictor_step(
            x.view(),
            t,
            score,
            sched,
            NoiseSource::Seeded(rng::derive(seed, &[rng::tag::PREDICTOR, t as u64])),
        )?;
        x = correct(
            x.view(),
            t - 1,
            score,
            sched,
            cfg,
            NoiseSource::Seeded(rng::derive(seed, &[rng::tag::CORRECTOR, t as u64])),
        )?;
    }
    if denoise_last {
        let s0 = sched.sigma(0);
        let s = checked_score(score, x.view(), s0, "denoise", 0)?;
        x = x + s * (s0 * s0);
    }
    Ok(x)
}

fn check_dc(x: &Sinogram, y_sparse: &Sinogram, op: &SamplingOperator) -> Result<()> {
    if x.data().dim() != y_sparse.data().dim() {
        return Err(Error::argument(format!(
            "data consistency shape mismatch: estimate {:?}, measurement {:?}",
            x.data().dim(),
            y_sparse.data().dim()
        )));
    }
    if x.data().nrows() != op.full_angles() {
        return Err(Error::argument(format!(
            "sampling operator covers {} angles, sinogram has {}",
            op.full_angles(),
            x.data().nrows()
        )));
    }
    Ok(())
}

/// Replace measured rows of the estimate by the measurement.
/// `y_sparse` is in row-mask form (full-view shape).
pub fn dc_rows(x: &mut Array2<f64>, y_sparse: ArrayView2<f64>, op: &SamplingOperator) {
    for &k in op.kept() {
        x.row_mut(k).assign(&y_sparse.row(k));
    }
}

pub fn dc_sinogram(x: &Sinogram, y_sparse: &Sinogram, op: &SamplingOperator) -> Result<Sinogram> {
    check_dc(x, y_sparse, op)?;
    let mut data = x.data().clone();
    dc_rows(&mut data, y_sparse.data().view(), op);
    x.with_data(data)
}

/// Detail bands of the row-consistent sinogram.
pub fn dc_wavelet_hf(x_s_half: &Sinogram, y_sparse: &Sinogram, op: &SamplingOperator) -> Result<HighFrequencySet> {
    extract_hf(&dc_sinogram(x_s_half, y_sparse, op)?)
}

/// Largest absolute deviation of kept rows from the measurement.
pub fn kept_row_residual(x: ArrayView2<f64>, y_sparse: ArrayView2<f64>, op: &SamplingOperator) -> f64 {
    op.kept()
        .iter()
        .flat_map(|&k| x.row(k).into_iter().zip(y_sparse.row(k)).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}
