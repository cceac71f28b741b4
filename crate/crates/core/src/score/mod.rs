//! Score functions: the evaluation contract used by the samplers, closed-form
//! oracles, and the trainable noise-conditioned network.

mod checkpoint;
mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{kaiming_init, noise_features, ArchSpec, ConvSpec, Network, Tensor, EMB_DIM};
pub use train::{
    dsm_loss, dsm_term, train_shd, train_srm, Adam, LogEntry, LogTag, TrainConfig, TrainOutcome,
};

/// `d log p_sigma(x) / dx` at noise level `sigma`.
pub trait ScoreFunction {
    fn evaluate(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>>;
}

impl<T: ScoreFunction + ?Sized> ScoreFunction for &T {
    fn evaluate(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        (**self).evaluate(x, sigma)
    }
}

/// Score of a flat density.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroScore;

impl ScoreFunction for ZeroScore {
    fn evaluate(&self, x: ArrayView2<f64>, _sigma: f64) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.dim()))
    }
}

/// Exact score of `N(mu, s2 I)` convolved with `N(0, sigma^2 I)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianScore {
    mu: Array2<f64>,
    s2: f64,
}

impl AnalyticGaussianScore {
    pub fn new(mu: Array2<f64>, s2: f64) -> Result<Self> {
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::argument(format!("gaussian variance must be positive, got {s2}")));
        }
        Ok(AnalyticGaussianScore { mu, s2 })
    }

    pub fn mean(&self) -> &Array2<f64> {
        &self.mu
    }

    pub fn variance(&self) -> f64 {
        self.s2
    }

    /// `log p_sigma(x)` up to an additive constant.
    pub fn log_density(&self, x: ArrayView2<f64>, sigma: f64) -> f64 {
        let v = self.s2 + sigma * sigma;
        -0.5 * x.iter().zip(self.mu.iter()).map(|(a, m)| (a - m).powi(2)).sum::<f64>() / v
    }
}

impl ScoreFunction for AnalyticGaussianScore {
    fn evaluate(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        if x.dim() != self.mu.dim() {
            return Err(Error::argument(format!(
                "analytic score built for {:?}, evaluated at {:?}",
                self.mu.dim(),
                x.dim()
            )));
        }
        let v = self.s2 + sigma * sigma;
        let mut out = self.mu.clone();
        Zip::from(&mut out).and(&x).for_each(|o, &xv| *o = (*o - xv) / v);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Full sinograms, trained under random masks.
    Srm,
    /// Single high-frequency wavelet bands.
    Shd,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Srm => "srm",
            Family::Shd => "shd",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srm" => Ok(Family::Srm),
            "shd" => Ok(Family::Shd),
            other => Err(Error::config(format!("unknown score family `{other}` (expected srm or shd)"))),
        }
    }
}

/// Data statistics used to scale the network's input and output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub mean: f64,
    pub sigma_data: f64,
}

impl Default for Preconditioning {
    fn default() -> Self {
        Preconditioning {
            mean: 0.0,
            sigma_data: 1.0,
        }
    }
}

impl Preconditioning {
    /// Mean and standard deviation over every entry, with the deviation
    /// floored so constant data stays well conditioned.
    pub fn from_data<'a>(data: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Self {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for view in data {
            for &v in view.iter() {
                n += 1.0;
                let d = v - mean;
                mean += d / n;
                m2 += d * (v - mean);
            }
        }
        if n == 0.0 {
            return Preconditioning::default();
        }
        let std = (m2 / n).sqrt();
        Preconditioning {
            mean,
            sigma_data: std.max(1e-3 * mean.abs()).max(1e-6),
        }
    }
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingMeta {
    pub input_shape: (usize, usize),
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
    pub iterations: u64,
    pub seed: u64,
    pub final_loss: f64,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        TrainingMeta {
            input_shape: (0, 0),
            sigma_min: 0.0,
            sigma_max: 0.0,
            n_steps: 0,
            iterations: 0,
            seed: 0,
            final_loss: f64::NAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModelParams {
    pub arch: ArchSpec,
    pub family: Family,
    pub precond: Preconditioning,
    pub weights: Vec<f64>,
    pub meta: TrainingMeta,
}

/// Fresh network with Kaiming-normal weights drawn from `seed`.
pub fn build_score_network(arch: ArchSpec, family: Family, seed: u64) -> Result<ScoreModelParams> {
    Ok(ScoreModelParams {
        weights: kaiming_init(&arch, seed)?,
        arch,
        family,
        precond: Preconditioning::default(),
        meta: TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
    })
}

/// Scalars mapping between the raw input and the network's normalized
/// domain at noise level `sigma`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Scaling {
    pub mean: f64,
    /// `1 / sqrt(sigma^2 + sigma_data^2)`
    pub c_in: f64,
    /// `1 / (sigma^2 + sigma_data^2)`
    pub c_skip: f64,
    /// `sigma_data / (sigma sqrt(sigma^2 + sigma_data^2))`
    pub c_out: f64,
}

impl Scaling {
    pub fn new(p: &Preconditioning, sigma: f64) -> Self {
        let v = sigma * sigma + p.sigma_data * p.sigma_data;
        Scaling {
            mean: p.mean,
            c_in: 1.0 / v.sqrt(),
            c_skip: 1.0 / v,
            c_out: p.sigma_data / (sigma * v.sqrt()),
        }
    }
}

impl ScoreModelParams {
    pub fn n_weights(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.weights.len() != self.arch.n_weights() {
            return Err(Error::config(format!(
                "{} checkpoint carries {} weights, its architecture needs {}",
                self.family,
                self.weights.len(),
                self.arch.n_weights()
            )));
        }
        if !(self.precond.sigma_data > 0.0 && self.precond.sigma_data.is_finite() && self.precond.mean.is_finite()) {
            return Err(Error::config("invalid preconditioning statistics"));
        }
        Ok(())
    }

    pub(crate) fn network(&self) -> Result<Network<'_>> {
        Network::new(self.arch, &self.weights)
    }

    /// Normalized, zero-padded single-channel network input.
    pub(crate) fn prepare_input(&self, x: ArrayView2<f64>, scale: &Scaling) -> Tensor {
        let a = self.arch.alignment();
        let (r, c) = x.dim();
        let (h, w) = (r.div_ceil(a) * a, c.div_ceil(a) * a);
        let mut t = Tensor::zeros(1, h, w);
        for ((i, j), &v) in x.indexed_iter() {
            t.data[i * w + j] = (v - scale.mean) * scale.c_in;
        }
        t
    }

    /// Forward pass returning the score and, for training, the trace.
    pub(crate) fn score_with_trace(
        &self,
        net: &Network<'_>,
        x: ArrayView2<f64>,
        sigma: f64,
    ) -> (Array2<f64>, network::Trace) {
        let scale = Scaling::new(&self.precond, sigma);
        let input = self.prepare_input(x, &scale);
        let w = input.w;
        let (out, trace) = net.forward(input, sigma);
        let s = Array2::from_shape_fn(x.dim(), |(i, j)| {
            -(x[[i, j]] - scale.mean) * scale.c_skip + scale.c_out * out.data[i * w + j]
        });
        (s, trace)
    }
}

impl ScoreFunction for ScoreModelParams {
    fn evaluate(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::argument(format!("noise level must be positive, got {sigma}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("score network input contains non-finite values"));
        }
        let net = self.network()?;
        let (s, _) = self.score_with_trace(&net, x, sigma);
        Ok(s)
    }
}
