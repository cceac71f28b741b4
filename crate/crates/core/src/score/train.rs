//! Denoising score matching and the two training loops.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;

use super::network::Tensor;
use super::{build_score_network, ArchSpec, Family, Preconditioning, ScoreModelParams, Scaling};
use crate::error::{Error, Result};
use crate::masks::{fill_mask, MaskKind, MaskSpec};
use crate::rng;
use crate::sde::NoiseSchedule;
use crate::tomo::Sinogram;
use crate::wavelet::{extract_hf, select_random_hf, HighFrequencySet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_iterations: usize,
    pub seed: u64,
    pub ema_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            n_iterations: 1000,
            seed: 0,
            ema_decay: 0.99,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, weights: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((w, g), m), v) in weights.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Weighted DSM term for one sample given score values `s` at `xt`:
/// `mean((sigma s - sigma target)^2)` with `target = (x0 - xt) / sigma^2`.
/// Returns the loss and its gradient with respect to `s`.
pub fn dsm_term(s: ArrayView2<f64>, x0: ArrayView2<f64>, xt: ArrayView2<f64>, sigma: f64) -> (f64, Array2<f64>) {
    let n = s.len() as f64;
    let s2 = sigma * sigma;
    let mut grad = Array2::zeros(s.dim());
    let mut loss = 0.0;
    Zip::from(&mut grad).and(&s).and(&x0).and(&xt).for_each(|g, &sv, &a, &b| {
        let diff = sv - (a - b) / s2;
        loss += s2 * diff * diff;
        *g = 2.0 * s2 * diff / n;
    });
    (loss / n, grad)
}

/// Batch-mean DSM loss and its exact gradient with respect to the weights.
/// Each element draws its own noise level uniformly over the schedule.
pub fn dsm_loss(
    params: &ScoreModelParams,
    batch: &[ArrayView2<f64>],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::argument("dsm_loss needs a non-empty batch"));
    }
    params.validate()?;
    let net = params.network()?;
    let mut grad = vec![0.0; params.weights.len()];
    let mut total = 0.0;
    let nb = batch.len() as f64;
    for (b, x0) in batch.iter().enumerate() {
        let mut r = rng::stream(seed, &[rng::tag::TRAIN, b as u64]);
        let t = r.gen_range(0..sched.n_steps());
        let sigma = sched.sigma(t);
        let (rows, cols) = x0.dim();
        let z = rng::normal_matrix(&mut r, rows, cols);
        let xt = x0 + &(z * sigma);
        let (s, trace) = params.score_with_trace(&net, xt.view(), sigma);
        let (loss, ds) = dsm_term(s.view(), *x0, xt.view(), sigma);
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite dsm loss at t = {t} (sigma {sigma})")));
        }
        total += loss / nb;
        let scale = Scaling::new(&params.precond, sigma);
        let a = params.arch.alignment();
        let (h, w) = (rows.div_ceil(a) * a, cols.div_ceil(a) * a);
        let mut dout = Tensor::zeros(1, h, w);
        for ((i, j), &g) in ds.indexed_iter() {
            dout.data[i * w + j] = g * scale.c_out / nb;
        }
        net.backward(&trace, &dout, &mut grad);
    }
    Ok((total, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogTag {
    Masks(Vec<MaskKind>),
    Bands(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub tag: LogTag,
    pub wall_ms: f64,
}

impl LogEntry {
    /// `iteration loss tag wall_ms` as one whitespace-separated line.
    pub fn to_line(&self) -> String {
        let tag = match &self.tag {
            LogTag::Masks(k) => k.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            LogTag::Bands(b) => b
                .iter()
                .map(|&i| crate::wavelet::BAND_NAMES[i])
                .collect::<Vec<_>>()
                .join(","),
        };
        format!("{} {:.6e} {} {:.1}", self.iteration, self.loss, tag, self.wall_ms)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// EMA weights.
    pub params: ScoreModelParams,
    pub log: Vec<LogEntry>,
}

fn check_dataset(dataset: &[Sinogram]) -> Result<(usize, usize)> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::argument("training dataset is empty"))?
        .data()
        .dim();
    if dataset.iter().any(|s| s.data().dim() != first) {
        return Err(Error::argument("training sinograms must share one shape"));
    }
    Ok(first)
}

fn grad_norm_clip(grad: &mut [f64], clip: Option<f64>) {
    if let Some(c) = clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > c {
            let k = c / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// Shared optimizer loop; `draw` fills the batch for an iteration and
/// returns its log tag.
fn optimize(
    mut params: ScoreModelParams,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut draw: impl FnMut(usize, &mut Vec<Array2<f64>>) -> Result<LogTag>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut adam = Adam::new(params.weights.len(), cfg.learning_rate);
    let mut ema = params.weights.clone();
    let mut log = Vec::with_capacity(cfg.n_iterations);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for it in 0..cfg.n_iterations {
        batch.clear();
        let tag = draw(it, &mut batch)?;
        let views: Vec<_> = batch.iter().map(|b| b.view()).collect();
        let seed = rng::derive(cfg.seed, &[rng::tag::NOISE, it as u64]);
        let (loss, mut grad) = dsm_loss(&params, &views, sched, seed)?;
        grad_norm_clip(&mut grad, cfg.grad_clip);
        adam.update(&mut params.weights, &grad);
        for (e, w) in ema.iter_mut().zip(&params.weights) {
            *e = cfg.ema_decay * *e + (1.0 - cfg.ema_decay) * w;
        }
        log.push(LogEntry {
            iteration: it,
            loss,
            tag,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    params.weights = ema;
    params.meta.iterations = cfg.n_iterations as u64;
    params.meta.final_loss = log.last().map_or(f64::NAN, |e| e.loss);
    Ok(TrainOutcome { params, log })
}

fn base_params(arch: ArchSpec, family: Family, sched: &NoiseSchedule, cfg: &TrainConfig, shape: (usize, usize)) -> Result<ScoreModelParams> {
    cfg.validate()?;
    let mut params = build_score_network(arch, family, cfg.seed)?;
    params.meta.input_shape = shape;
    params.meta.sigma_min = sched.sigma_min();
    params.meta.sigma_max = sched.sigma_max();
    params.meta.n_steps = sched.n_steps();
    Ok(params)
}

/// Sinogram score model: each batch element is a randomly drawn training
/// sinogram corrupted by a freshly generated mask.
pub fn train_srm(
    dataset: &[Sinogram],
    masks: &MaskSpec,
    sched: &NoiseSchedule,
    arch: ArchSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let shape = check_dataset(dataset)?;
    let mut params = base_params(arch, Family::Srm, sched, cfg, shape)?;
    params.precond = Preconditioning::from_data(dataset.iter().map(|s| s.data().view()));
    let mut mask = Array2::zeros(shape);
    optimize(params, sched, cfg, |it, batch| {
        let mut kinds = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let seed = rng::derive(cfg.seed, &[rng::tag::TRAIN, it as u64, b as u64]);
            let idx = rng::stream(seed, &[]).gen_range(0..dataset.len());
            kinds.push(fill_mask(masks, seed, mask.view_mut())?);
            batch.push(dataset[idx].data() * &mask);
        }
        Ok(LogTag::Masks(kinds))
    })
}

/// High-frequency score model: one network shared by the three detail
/// bands, each batch element a uniformly chosen band of a random sinogram.
pub fn train_shd(dataset: &[Sinogram], sched: &NoiseSchedule, arch: ArchSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_dataset(dataset)?;
    let bands: Vec<HighFrequencySet> = dataset.iter().map(extract_hf).collect::<Result<_>>()?;
    let shape = bands[0].lh.dim();
    let mut params = base_params(arch, Family::Shd, sched, cfg, shape)?;
    params.precond = Preconditioning::from_data(bands.iter().flat_map(|h| [h.lh.view(), h.hl.view(), h.hh.view()]));
    optimize(params, sched, cfg, |it, batch| {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let seed = rng::derive(cfg.seed, &[rng::tag::TRAIN, it as u64, b as u64]);
            let idx = rng::stream(seed, &[]).gen_range(0..dataset.len());
            let (band, data) = select_random_hf(&bands[idx], seed);
            picks.push(band);
            batch.push(data.clone());
        }
        Ok(LogTag::Bands(picks))
    })
}
