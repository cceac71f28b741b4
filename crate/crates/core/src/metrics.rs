//! Image quality metrics and profile lines.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tomo::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// dB; `f64::INFINITY` when the images are identical.
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

/// Mean squared error over pixels where `region` is true.
pub fn mse_in_region(a: ArrayView2<f64>, b: ArrayView2<f64>, region: ArrayView2<bool>) -> f64 {
    let (sum, count) = a
        .iter()
        .zip(b.iter())
        .zip(region.iter())
        .filter(|(_, &inside)| inside)
        .fold((0.0, 0usize), |(s, n), ((x, y), _)| (s + (x - y).powi(2), n + 1));
    sum / count.max(1) as f64
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

pub fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering: output shrinks by `len - 1` in each axis.
fn filter_valid(img: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (h, wd) = img.dim();
    let k = w.len();
    let mut tmp = Array2::<f64>::zeros((h, wd - k + 1));
    for r in 0..h {
        for c in 0..wd - k + 1 {
            tmp[[r, c]] = (0..k).map(|i| w[i] * img[[r, c + i]]).sum();
        }
    }
    let mut out = Array2::zeros((h - k + 1, wd - k + 1));
    for r in 0..h - k + 1 {
        for c in 0..wd - k + 1 {
            out[[r, c]] = (0..k).map(|i| w[i] * tmp[[r + i, c]]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over all
/// positions where the window fits entirely inside the image.
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!("ssim shape mismatch {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::argument(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let a = a.to_owned();
    let b = b.to_owned();
    let mu_a = filter_valid(&a, &win);
    let mu_b = filter_valid(&b, &win);
    let aa = filter_valid(&(&a * &a), &win);
    let bb = filter_valid(&(&b * &b), &win);
    let ab = filter_valid(&(&a * &b), &win);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

pub fn evaluate(recon: &Image, reference: &Image, data_range: f64) -> Result<MetricReport> {
    if recon.size() != reference.size() {
        return Err(Error::argument(format!(
            "cannot compare {0}x{0} with {1}x{1}",
            recon.size(),
            reference.size()
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::argument("data_range must be positive"));
    }
    let mse = mse(recon.data().view(), reference.data().view());
    Ok(MetricReport {
        psnr: psnr_from_mse(mse, data_range),
        ssim: ssim(recon.data().view(), reference.data().view(), data_range)?,
        mse,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Line {
    Row(usize),
    Col(usize),
}

pub fn profile_line(img: &Image, line: Line) -> Result<Array1<f64>> {
    let n = img.size();
    match line {
        Line::Row(i) if i < n => Ok(img.data().row(i).to_owned()),
        Line::Col(j) if j < n => Ok(img.data().column(j).to_owned()),
        _ => Err(Error::argument(format!("{line:?} out of range for {n}x{n} image"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;

    /// Direct per-window SSIM with explicit 2-D weights.
    fn ssim_brute(a: &Array2<f64>, b: &Array2<f64>, l: f64) -> f64 {
        let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        let (h, w) = a.dim();
        let k = SSIM_WINDOW;
        let (c1, c2) = ((K1 * l).powi(2), (K2 * l).powi(2));
        let mut total = 0.0;
        let mut count = 0.0;
        for r in 0..=h - k {
            for c in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        ma += g[i] * g[j] * a[[r + i, c + j]];
                        mb += g[i] * g[j] * b[[r + i, c + j]];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j];
                        let da = a[[r + i, c + j]] - ma;
                        let db = b[[r + i, c + j]] - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    fn random(size: usize, seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, &[]);
        Array2::from_shape_simple_fn((size, size), || rng.gen::<f64>())
    }

    #[test]
    fn identical_images() {
        let img = phantom::shepp_logan(32);
        let rep = evaluate(&img, &img, 1.0).unwrap();
        assert_eq!(rep.mse, 0.0);
        assert_eq!(rep.ssim, 1.0);
        assert!(rep.psnr.is_infinite() && rep.psnr > 0.0);
    }

    #[test]
    fn constant_offset_closed_form() {
        let zero = Image::zeros(16);
        let tenth = Image::new(Array2::from_elem((16, 16), 0.1)).unwrap();
        let rep = evaluate(&tenth, &zero, 1.0).unwrap();
        assert!((rep.mse - 0.01).abs() < 1e-15);
        assert!((rep.psnr - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_brute_force() {
        for seed in 0..3 {
            let a = random(24, seed);
            let b = &a * 0.7 + random(24, seed + 100) * 0.3;
            let fast = ssim(a.view(), b.view(), 1.0).unwrap();
            let slow = ssim_brute(&a, &b, 1.0);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let a = random(20, 1);
        let b = random(20, 2);
        let ab = ssim(a.view(), b.view(), 1.0).unwrap();
        let ba = ssim(b.view(), a.view(), 1.0).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
        assert!(ab <= 1.0);
    }

    #[test]
    fn psnr_consistent_with_mse() {
        let a = Image::new(random(16, 3)).unwrap();
        let b = Image::new(random(16, 4)).unwrap();
        let rep = evaluate(&a, &b, 1.0).unwrap();
        assert!((rep.psnr - 10.0 * (1.0 / rep.mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn mse_is_permutation_invariant() {
        let a = random(12, 5);
        let b = random(12, 6);
        let pa: Vec<f64> = a.iter().cloned().collect::<Vec<_>>().into_iter().rev().collect();
        let pb: Vec<f64> = b.iter().cloned().collect::<Vec<_>>().into_iter().rev().collect();
        let pa = Array2::from_shape_vec((12, 12), pa).unwrap();
        let pb = Array2::from_shape_vec((12, 12), pb).unwrap();
        assert!((mse(a.view(), b.view()) - mse(pa.view(), pb.view())).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(evaluate(&Image::zeros(16), &Image::zeros(17), 1.0).is_err());
        assert!(evaluate(&Image::zeros(16), &Image::zeros(16), 0.0).is_err());
        assert!(profile_line(&Image::zeros(8), Line::Row(8)).is_err());
        assert!(profile_line(&Image::zeros(8), Line::Col(9)).is_err());
    }

    #[test]
    fn profile_lines() {
        let c = Image::new(Array2::from_elem((10, 10), 0.25)).unwrap();
        assert!(profile_line(&c, Line::Row(3)).unwrap().iter().all(|&v| v == 0.25));
        let img = phantom::shepp_logan(32);
        assert_eq!(
            profile_line(&img, Line::Col(7)).unwrap(),
            profile_line(&img.clone(), Line::Col(7)).unwrap()
        );
    }

    #[test]
    fn disk_profile_plateau_matches_diameter() {
        let radius = 12.0;
        let img = phantom::disk(64, radius, 1.0);
        // Row 31 is the pixel row closest to the centre of an even grid.
        let prof = profile_line(&img, Line::Row(31)).unwrap();
        let width = prof.iter().filter(|&&v| v > 0.5).count() as f64;
        assert!((width - 2.0 * radius).abs() <= 1.0, "plateau {width}");
    }
}
