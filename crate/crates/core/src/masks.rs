//! Random sinogram masks and the variance-inflation Monte Carlo check.

use ndarray::{Array2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tomo::Sinogram;

/// Kept-view counts a sparse-view mask draws from (clamped to the grid).
pub const SPARSE_VIEW_COUNTS: [usize; 8] = [10, 20, 30, 60, 90, 120, 180, 720];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    SparseView,
    Circles,
    Strip,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::SparseView, MaskKind::Circles, MaskKind::Strip];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::SparseView => "sparse_view",
            MaskKind::Circles => "circles",
            MaskKind::Strip => "strip",
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse_view" => Ok(MaskKind::SparseView),
            "circles" => Ok(MaskKind::Circles),
            "strip" => Ok(MaskKind::Strip),
            other => Err(Error::argument(format!("unknown mask kind '{other}'"))),
        }
    }
}

/// Parameters of the mask family. `kind == None` draws the kind
/// uniformly per mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub kind: Option<MaskKind>,
    pub sparse_counts: Vec<usize>,
    pub circle_count: usize,
    /// Pixels.
    pub circle_radius: f64,
    /// Strip width is `floor(width / strip_divisor)` columns.
    pub strip_divisor: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            kind: None,
            sparse_counts: SPARSE_VIEW_COUNTS.to_vec(),
            circle_count: 3,
            circle_radius: 48.0,
            strip_divisor: 5,
        }
    }
}

impl MaskSpec {
    pub fn of_kind(kind: MaskKind) -> Self {
        MaskSpec {
            kind: Some(kind),
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sparse_counts.is_empty() || self.sparse_counts.contains(&0) {
            return Err(Error::argument("sparse-view counts must be non-empty and positive"));
        }
        if !(self.circle_radius > 0.0) || self.strip_divisor == 0 {
            return Err(Error::argument("circle radius and strip divisor must be positive"));
        }
        Ok(())
    }
}

/// Binary mask: 1 keeps a sinogram entry, 0 removes it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub kind: MaskKind,
    pub data: Array2<f64>,
}

fn fill_sparse_view(spec: &MaskSpec, rng: &mut ChaCha8Rng, mut out: ArrayViewMut2<f64>) {
    let rows = out.nrows();
    let count = spec.sparse_counts[rng.gen_range(0..spec.sparse_counts.len())].clamp(1, rows);
    let spacing = rows / count;
    let offset = if spacing > 1 { rng.gen_range(0..spacing) } else { 0 };
    out.fill(0.0);
    for k in 0..count {
        out.row_mut(k * rows / count + offset).fill(1.0);
    }
}

fn fill_circles(spec: &MaskSpec, rng: &mut ChaCha8Rng, mut out: ArrayViewMut2<f64>) {
    let (rows, cols) = out.dim();
    out.fill(1.0);
    let r2 = spec.circle_radius * spec.circle_radius;
    for _ in 0..spec.circle_count {
        let cy = rng.gen_range(0.0..rows as f64);
        let cx = rng.gen_range(0.0..cols as f64);
        let r_lo = (cy - spec.circle_radius).floor().max(0.0) as usize;
        let r_hi = ((cy + spec.circle_radius).ceil() as usize).min(rows - 1);
        let c_lo = (cx - spec.circle_radius).floor().max(0.0) as usize;
        let c_hi = ((cx + spec.circle_radius).ceil() as usize).min(cols - 1);
        for i in r_lo..=r_hi {
            for j in c_lo..=c_hi {
                let dy = i as f64 + 0.5 - cy;
                let dx = j as f64 + 0.5 - cx;
                if dx * dx + dy * dy < r2 {
                    out[[i, j]] = 0.0;
                }
            }
        }
    }
}

fn fill_strip(spec: &MaskSpec, rng: &mut ChaCha8Rng, mut out: ArrayViewMut2<f64>) {
    let cols = out.ncols();
    let width = cols / spec.strip_divisor;
    let start = rng.gen_range(0..=cols - width);
    out.fill(1.0);
    for j in start..start + width {
        out.column_mut(j).fill(0.0);
    }
}

/// Draw a mask into `out`, returning the kind used.
pub fn fill_mask(spec: &MaskSpec, seed: u64, out: ArrayViewMut2<f64>) -> Result<MaskKind> {
    spec.validate()?;
    if out.is_empty() {
        return Err(Error::argument("mask shape must be positive"));
    }
    Ok(draw_mask(spec, &mut rng::stream(seed, &[rng::tag::MASK]), out))
}

/// Unchecked core of [`fill_mask`]: `spec` is valid and `out` non-empty.
fn draw_mask(spec: &MaskSpec, rng: &mut ChaCha8Rng, out: ArrayViewMut2<f64>) -> MaskKind {
    let kind = match spec.kind {
        Some(k) => k,
        None => MaskKind::ALL[rng.gen_range(0..3)],
    };
    match kind {
        MaskKind::SparseView => fill_sparse_view(spec, rng, out),
        MaskKind::Circles => fill_circles(spec, rng, out),
        MaskKind::Strip => fill_strip(spec, rng, out),
    }
    kind
}

pub fn generate_mask(spec: &MaskSpec, shape: (usize, usize), seed: u64) -> Result<Mask> {
    let mut data = Array2::zeros(shape);
    let kind = fill_mask(spec, seed, data.view_mut())?;
    Ok(Mask { kind, data })
}

pub fn apply_mask(sino: &Sinogram, mask: &Mask) -> Result<Sinogram> {
    if sino.data().dim() != mask.data.dim() {
        return Err(Error::argument(format!(
            "mask shape {:?} does not match sinogram {:?}",
            mask.data.dim(),
            sino.data().dim()
        )));
    }
    sino.with_data(sino.data() * &mask.data)
}

/// Distribution of the per-sample multipliers `m_i` in the
/// variance-inflation check.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskFamily {
    /// Binary masks from [`generate_mask`].
    Binary(MaskSpec),
    /// Independent +1/-1 entries with probability one half each.
    Symmetric,
    /// Independent entries uniform on `(low, high)`.
    Uniform { low: f64, high: f64 },
    /// Every entry equal to the given value.
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InflationReport {
    /// Pixel-averaged variance of the raw samples.
    pub var_raw: f64,
    /// Mean over trials of the variance of `x + x*m`.
    pub var_perturbed: f64,
    pub var_perturbed_se: f64,
    /// Mean and standard error over trials of the cross term
    /// `(2/n) sum_i (x_i - mu)(x_i m_i - mu_M)`.
    pub cross_term_mean: f64,
    pub cross_term_se: f64,
    /// Mean over trials of the masked-data variance.
    pub mask_term_mean: f64,
    pub trials: usize,
    /// `var_perturbed >= var_raw` up to three standard errors.
    pub inflated: bool,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // Running mean: exact when all values coincide.
    let mean = values
        .iter()
        .enumerate()
        .fold(0.0, |m, (k, v)| m + (v - m) / (k + 1) as f64);
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimate of the variance of mask-perturbed data
/// `x~_i = x_i + x_i * m_i` against the variance of `x`.
///
/// Variances are taken across samples per entry and averaged over
/// entries. Each trial draws one fresh multiplier matrix per sample.
pub fn variance_inflation_check(
    samples: &[Array2<f64>],
    family: &MaskFamily,
    trials: usize,
    seed: u64,
) -> Result<InflationReport> {
    let first = samples
        .first()
        .ok_or_else(|| Error::argument("variance check needs at least one sample"))?;
    if trials == 0 {
        return Err(Error::argument("variance check needs at least one trial"));
    }
    let shape = first.dim();
    if samples.iter().any(|s| s.dim() != shape) {
        return Err(Error::argument("all samples must share one shape"));
    }
    if let MaskFamily::Binary(spec) = family {
        spec.validate()?;
        if first.is_empty() {
            return Err(Error::argument("mask shape must be positive"));
        }
    }
    let n = samples.len();
    let p = first.len();
    let nf = n as f64;

    let flat: Vec<f64> = samples.iter().flat_map(|s| s.iter().cloned()).collect();
    // Running means throughout, so identical samples give exactly zero spread.
    let mut mu = vec![0.0; p];
    for i in 0..n {
        let w = 1.0 / (i + 1) as f64;
        for (m, x) in mu.iter_mut().zip(&flat[i * p..(i + 1) * p]) {
            *m += (x - *m) * w;
        }
    }
    let centered: Vec<f64> = (0..n * p).map(|k| flat[k] - mu[k % p]).collect();
    let norm = 1.0 / (nf * p as f64);
    let var_raw = centered.iter().map(|d| d * d).sum::<f64>() * norm;

    let mut masked = vec![0.0; n * p];
    let mut mask_buf = Array2::<f64>::zeros(shape);
    let mut mu_m = vec![0.0; p];
    let mut per_trial_var = Vec::with_capacity(trials);
    let mut per_trial_cross = Vec::with_capacity(trials);
    let mut per_trial_mask = Vec::with_capacity(trials);

    for trial in 0..trials {
        let mut rng = rng::stream(seed, &[rng::tag::MASK, trial as u64]);
        mu_m.iter_mut().for_each(|m| *m = 0.0);
        for i in 0..n {
            let x = &flat[i * p..(i + 1) * p];
            let dst = &mut masked[i * p..(i + 1) * p];
            match family {
                MaskFamily::Binary(spec) => {
                    draw_mask(spec, &mut rng, mask_buf.view_mut());
                    for ((d, &xv), &m) in dst.iter_mut().zip(x).zip(mask_buf.iter()) {
                        *d = xv * m;
                    }
                }
                MaskFamily::Symmetric => {
                    let mut bits = 0u64;
                    for (k, (d, &xv)) in dst.iter_mut().zip(x).enumerate() {
                        if k % 64 == 0 {
                            bits = rng.gen();
                        }
                        // sign flip without a data-dependent branch
                        *d = f64::from_bits(xv.to_bits() ^ ((!bits & 1) << 63));
                        bits >>= 1;
                    }
                }
                MaskFamily::Uniform { low, high } => {
                    for (d, &xv) in dst.iter_mut().zip(x) {
                        *d = xv * rng.gen_range(*low..*high);
                    }
                }
                MaskFamily::Constant(c) => {
                    for (d, &xv) in dst.iter_mut().zip(x) {
                        *d = xv * c;
                    }
                }
            }
            let w = 1.0 / (i + 1) as f64;
            for (m, &d) in mu_m.iter_mut().zip(dst.iter()) {
                *m += (d - *m) * w;
            }
        }

        let (mut acc_var, mut acc_cross, mut acc_mask) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let dx = &centered[i * p..(i + 1) * p];
            let xm = &masked[i * p..(i + 1) * p];
            for k in 0..p {
                let dm = xm[k] - mu_m[k];
                let d = dx[k] + dm;
                acc_var += d * d;
                acc_cross += dx[k] * dm;
                acc_mask += dm * dm;
            }
        }
        per_trial_var.push(acc_var * norm);
        per_trial_cross.push(2.0 * acc_cross * norm);
        per_trial_mask.push(acc_mask * norm);
    }

    let (var_perturbed, var_perturbed_se) = mean_se(&per_trial_var);
    let (cross_term_mean, cross_term_se) = mean_se(&per_trial_cross);
    let (mask_term_mean, _) = mean_se(&per_trial_mask);
    Ok(InflationReport {
        var_raw,
        var_perturbed,
        var_perturbed_se,
        cross_term_mean,
        cross_term_se,
        mask_term_mean,
        trials,
        inflated: var_perturbed + 3.0 * var_perturbed_se >= var_raw,
    })
}
