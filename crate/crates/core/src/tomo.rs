//! Parallel-beam tomography: ray-driven projection, its exact adjoint,
//! angular subsampling and filtered back-projection.
//!
//! Coordinates: pixel `(r, c)` of an `N x N` image has its centre at
//! `x = c - (N-1)/2`, `y = (N-1)/2 - r` (unit pixels, y pointing up).
//! The ray for angle `theta` and detector offset `s` is the line
//! `x cos(theta) + y sin(theta) = s`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::rng;

/// Square attenuation map.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Array2<f64>,
}

impl Image {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h != w || h == 0 {
            return Err(Error::argument(format!("image must be square and non-empty, got {h}x{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("image contains non-finite values"));
        }
        Ok(Image { data })
    }

    pub fn zeros(size: usize) -> Self {
        Image {
            data: Array2::zeros((size, size)),
        }
    }

    pub fn size(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Pixel centre coordinates `(x, y)` for `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let half = (self.size() as f64 - 1.0) / 2.0;
        (col as f64 - half, half - row as f64)
    }
}

/// Parallel-beam acquisition geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    angles: Vec<f64>,
    n_detectors: usize,
    detector_spacing: f64,
}

impl Geometry {
    /// `n_angles` views evenly spaced over `[0, pi)`.
    pub fn parallel(n_angles: usize, n_detectors: usize) -> Result<Self> {
        if n_angles == 0 {
            return Err(Error::config("n_angles must be >= 1"));
        }
        let step = PI / n_angles as f64;
        Self::with_angles((0..n_angles).map(|k| k as f64 * step).collect(), n_detectors, 1.0)
    }

    /// Full-view geometry whose detector spans the diagonal of an
    /// `image_size` grid. The bin count is rounded up to an even number.
    pub fn for_image(image_size: usize, n_angles: usize) -> Result<Self> {
        Self::parallel(n_angles, default_detector_count(image_size))
    }

    /// As [`Geometry::for_image`] with a custom bin pitch (pixels per bin).
    pub fn for_image_with_spacing(image_size: usize, n_angles: usize, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::config("detector_spacing must be positive"));
        }
        let n = (image_size as f64 * std::f64::consts::SQRT_2 / spacing).ceil() as usize;
        let step = PI / n_angles.max(1) as f64;
        Self::with_angles((0..n_angles).map(|k| k as f64 * step).collect(), n + n % 2, spacing)
    }

    pub fn with_angles(angles: Vec<f64>, n_detectors: usize, detector_spacing: f64) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::config("geometry needs at least one angle"));
        }
        if n_detectors == 0 {
            return Err(Error::config("n_detectors must be >= 1"));
        }
        if !(detector_spacing > 0.0 && detector_spacing.is_finite()) {
            return Err(Error::config("detector_spacing must be positive"));
        }
        if angles.iter().any(|a| !a.is_finite()) || angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("angles must be finite and strictly increasing"));
        }
        Ok(Geometry {
            angles,
            n_detectors,
            detector_spacing,
        })
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Offset of detector bin `j` from the rotation centre.
    pub fn detector_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    pub fn span(&self) -> f64 {
        self.n_detectors as f64 * self.detector_spacing
    }
}

/// Smallest even bin count whose unit-spaced span covers the image diagonal.
pub fn default_detector_count(image_size: usize) -> usize {
    let n = (image_size as f64 * std::f64::consts::SQRT_2).ceil() as usize;
    n + n % 2
}

/// Line integrals indexed by (angle, detector).
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    geometry: Geometry,
    data: Array2<f64>,
}

impl Sinogram {
    pub fn new(geometry: Geometry, data: Array2<f64>) -> Result<Self> {
        if data.dim() != (geometry.n_angles(), geometry.n_detectors()) {
            return Err(Error::argument(format!(
                "sinogram data {:?} does not match geometry {}x{}",
                data.dim(),
                geometry.n_angles(),
                geometry.n_detectors()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("sinogram contains non-finite values"));
        }
        Ok(Sinogram { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let data = Array2::zeros((geometry.n_angles(), geometry.n_detectors()));
        Sinogram { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        Sinogram::new(self.geometry.clone(), data)
    }
}

/// The angular sampling operator: which rows of a full-view sinogram
/// were actually measured.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingOperator {
    full_angles: usize,
    kept: Vec<usize>,
}

impl SamplingOperator {
    pub fn new(full_angles: usize, kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::argument("sampling operator must keep at least one angle"));
        }
        if kept.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::argument("kept indices must be strictly increasing"));
        }
        if let Some(&last) = kept.last() {
            if last >= full_angles {
                return Err(Error::argument(format!(
                    "kept index {last} out of range for {full_angles} angles"
                )));
            }
        }
        Ok(SamplingOperator { full_angles, kept })
    }

    /// Keep `n_kept` evenly spaced views, starting at view 0.
    pub fn uniform(full_angles: usize, n_kept: usize) -> Result<Self> {
        if n_kept == 0 || n_kept > full_angles {
            return Err(Error::argument(format!(
                "cannot keep {n_kept} of {full_angles} views"
            )));
        }
        let kept = (0..n_kept).map(|k| k * full_angles / n_kept).collect();
        Self::new(full_angles, kept)
    }

    pub fn full(full_angles: usize) -> Result<Self> {
        Self::uniform(full_angles, full_angles)
    }

    pub fn full_angles(&self) -> usize {
        self.full_angles
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn is_kept(&self, row: usize) -> bool {
        self.kept.binary_search(&row).is_ok()
    }

    fn check(&self, sino: &Sinogram) -> Result<()> {
        if sino.geometry().n_angles() != self.full_angles {
            return Err(Error::argument(format!(
                "sampling operator expects {} angles, sinogram has {}",
                self.full_angles,
                sino.geometry().n_angles()
            )));
        }
        Ok(())
    }

    /// Compact form: only the kept rows, with their angles.
    pub fn subsample(&self, sino: &Sinogram) -> Result<Sinogram> {
        self.check(sino)?;
        let geo = sino.geometry();
        let angles = self.kept.iter().map(|&k| geo.angles()[k]).collect();
        let geometry = Geometry::with_angles(angles, geo.n_detectors(), geo.detector_spacing())?;
        let data = sino.data().select(Axis(0), &self.kept);
        Sinogram::new(geometry, data)
    }

    /// Row-mask form: same shape, non-kept rows zeroed.
    pub fn mask_rows(&self, sino: &Sinogram) -> Result<Sinogram> {
        self.check(sino)?;
        let mut data = Array2::zeros(sino.data().dim());
        for &k in &self.kept {
            data.row_mut(k).assign(&sino.data().row(k));
        }
        sino.with_data(data)
    }

    /// Place a compact measurement back on the full-view grid (zeros elsewhere).
    pub fn embed(&self, compact: &Sinogram, full_geometry: &Geometry) -> Result<Sinogram> {
        if full_geometry.n_angles() != self.full_angles {
            return Err(Error::argument("full geometry does not match sampling operator"));
        }
        if compact.data().nrows() != self.kept.len()
            || compact.geometry().n_detectors() != full_geometry.n_detectors()
        {
            return Err(Error::argument(format!(
                "compact sinogram {:?} does not match {} kept views x {} detectors",
                compact.data().dim(),
                self.kept.len(),
                full_geometry.n_detectors()
            )));
        }
        let mut data = Array2::zeros((self.full_angles, full_geometry.n_detectors()));
        for (i, &k) in self.kept.iter().enumerate() {
            data.row_mut(k).assign(&compact.data().row(i));
        }
        Sinogram::new(full_geometry.clone(), data)
    }
}

/// One sample along a ray: the two pixels straddling it and their weights.
struct RaySampler {
    n: usize,
    half: f64,
}

impl RaySampler {
    /// Calls `visit(row, col, weight)` for every pixel contribution to the
    /// ray `(theta, s)`. Joseph's scheme: step one pixel at a time along the
    /// dominant axis and interpolate linearly across the other.
    #[inline]
    fn trace(&self, cos_t: f64, sin_t: f64, s: f64, mut visit: impl FnMut(usize, usize, f64)) {
        let n = self.n as isize;
        if sin_t.abs() >= cos_t.abs() {
            let step = 1.0 / sin_t.abs();
            for c in 0..self.n {
                let x = c as f64 - self.half;
                let y = (s - x * cos_t) / sin_t;
                let fr = self.half - y;
                let r0 = fr.floor();
                let w1 = fr - r0;
                let r0 = r0 as isize;
                if r0 >= 0 && r0 < n {
                    visit(r0 as usize, c, (1.0 - w1) * step);
                }
                if r0 + 1 >= 0 && r0 + 1 < n {
                    visit((r0 + 1) as usize, c, w1 * step);
                }
            }
        } else {
            let step = 1.0 / cos_t.abs();
            for r in 0..self.n {
                let y = self.half - r as f64;
                let x = (s - y * sin_t) / cos_t;
                let fc = x + self.half;
                let c0 = fc.floor();
                let w1 = fc - c0;
                let c0 = c0 as isize;
                if c0 >= 0 && c0 < n {
                    visit(r, c0 as usize, (1.0 - w1) * step);
                }
                if c0 + 1 >= 0 && c0 + 1 < n {
                    visit(r, (c0 + 1) as usize, w1 * step);
                }
            }
        }
    }
}

fn check_span(size: usize, geo: &Geometry) -> Result<()> {
    let diagonal = size as f64 * std::f64::consts::SQRT_2;
    if geo.span() + geo.detector_spacing() < diagonal {
        return Err(Error::config(format!(
            "detector span {:.2} does not cover the image diagonal {:.2}",
            geo.span(),
            diagonal
        )));
    }
    Ok(())
}

/// Noiseless projection `A x`.
pub fn forward_project(img: &Image, geo: &Geometry) -> Result<Sinogram> {
    check_span(img.size(), geo)?;
    let sampler = RaySampler {
        n: img.size(),
        half: (img.size() as f64 - 1.0) / 2.0,
    };
    let pixels = img.data();
    let mut data = Array2::zeros((geo.n_angles(), geo.n_detectors()));
    for (a, &theta) in geo.angles().iter().enumerate() {
        let (sin_t, cos_t) = theta.sin_cos();
        for j in 0..geo.n_detectors() {
            let mut acc = 0.0;
            sampler.trace(cos_t, sin_t, geo.detector_offset(j), |r, c, w| {
                acc += w * pixels[[r, c]];
            });
            data[[a, j]] = acc;
        }
    }
    Sinogram::new(geo.clone(), data)
}

/// Unfiltered back-projection `A^T y`, the exact transpose of
/// [`forward_project`].
pub fn back_project(sino: &Sinogram, size: usize) -> Result<Image> {
    let geo = sino.geometry();
    check_span(size, geo)?;
    let sampler = RaySampler {
        n: size,
        half: (size as f64 - 1.0) / 2.0,
    };
    let mut out = Array2::zeros((size, size));
    for (a, &theta) in geo.angles().iter().enumerate() {
        let (sin_t, cos_t) = theta.sin_cos();
        for j in 0..geo.n_detectors() {
            let v = sino.data()[[a, j]];
            if v == 0.0 {
                continue;
            }
            sampler.trace(cos_t, sin_t, geo.detector_offset(j), |r, c, w| {
                out[[r, c]] += w * v;
            });
        }
    }
    Image::new(out)
}

/// Additive white Gaussian measurement noise.
pub fn add_noise(sino: &Sinogram, sigma: f64, seed: u64) -> Result<Sinogram> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::argument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(sino.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(Error::argument)?;
    let mut rng = rng::stream(seed, &[rng::tag::NOISE]);
    let data = sino.data().mapv(|v| v + normal.sample(&mut rng));
    sino.with_data(data)
}

/// Frequency window applied on top of the ramp.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Filter {
    #[default]
    RamLak,
    SheppLogan,
    Hann,
}

impl std::str::FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ram-lak" | "ramlak" => Ok(Filter::RamLak),
            "shepp-logan" => Ok(Filter::SheppLogan),
            "hann" => Ok(Filter::Hann),
            other => Err(Error::argument(format!("unknown filter '{other}'"))),
        }
    }
}

/// Frequency response of the band-limited ramp, sampled for an FFT of
/// length `len`. Built from the spatial-domain ramp kernel so the DC bin
/// is not forced to zero.
fn ramp_response(len: usize, spacing: f64, filter: Filter) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 1.0 / (4.0 * spacing * spacing);
    for n in (1..len / 2).step_by(2) {
        let v = -1.0 / ((n * n) as f64 * PI * PI * spacing * spacing);
        kernel[n].re = v;
        kernel[len - n].re = v;
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut kernel);
    (0..len)
        .map(|k| {
            let f = k.min(len - k) as f64 / len as f64;
            let window = match filter {
                Filter::RamLak => 1.0,
                Filter::SheppLogan => {
                    if f == 0.0 {
                        1.0
                    } else {
                        (PI * f).sin() / (PI * f)
                    }
                }
                Filter::Hann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
            };
            kernel[k].re * window * spacing
        })
        .collect()
}

/// Ramp-filter every projection row.
pub fn filter_projections(sino: &Sinogram, filter: Filter) -> Result<Array2<f64>> {
    let geo = sino.geometry();
    let n_det = geo.n_detectors();
    if n_det < 2 {
        return Err(Error::config("filtered back-projection needs at least 2 detectors"));
    }
    let len = (2 * n_det).next_power_of_two();
    let response = ramp_response(len, geo.detector_spacing(), filter);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Array2::zeros(sino.data().dim());
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for (row, mut dst) in sino.data().outer_iter().zip(out.outer_iter_mut()) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(response.iter()) {
            *b *= h;
        }
        inv.process(&mut buf);
        for (d, b) in dst.iter_mut().zip(buf.iter()) {
            *d = b.re / len as f64;
        }
    }
    Ok(out)
}

/// Zero everything outside the inscribed circle.
pub fn circle_mask(size: usize) -> Array2<bool> {
    let half = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 / 2.0;
    Array2::from_shape_fn((size, size), |(r, c)| {
        let x = c as f64 - half;
        let y = half - r as f64;
        x * x + y * y <= radius * radius
    })
}

/// Filtered back-projection onto a `size x size` grid.
///
/// Pixel-driven back-projection with linear interpolation between
/// detector bins; each view is weighted by `pi / n_angles`.
pub fn fbp(sino: &Sinogram, size: usize, filter: Filter) -> Result<Image> {
    let filtered = filter_projections(sino, filter)?;
    let geo = sino.geometry();
    let n_det = geo.n_detectors();
    let half = (size as f64 - 1.0) / 2.0;
    let det_center = (n_det as f64 - 1.0) / 2.0;
    let inv_spacing = 1.0 / geo.detector_spacing();
    let mut out = Array2::<f64>::zeros((size, size));
    let xs: Array1<f64> = (0..size).map(|c| c as f64 - half).collect();
    for (a, &theta) in geo.angles().iter().enumerate() {
        let (sin_t, cos_t) = theta.sin_cos();
        let proj = filtered.row(a);
        for r in 0..size {
            let y = half - r as f64;
            let base = y * sin_t;
            let mut dst = out.row_mut(r);
            for (d, &x) in dst.iter_mut().zip(xs.iter()) {
                let f = (x * cos_t + base) * inv_spacing + det_center;
                let j0 = f.floor();
                let w1 = f - j0;
                let j0 = j0 as isize;
                if j0 >= 0 && (j0 as usize) + 1 < n_det {
                    let j = j0 as usize;
                    *d += (1.0 - w1) * proj[j] + w1 * proj[j + 1];
                } else if j0 >= 0 && (j0 as usize) < n_det {
                    *d += (1.0 - w1) * proj[j0 as usize];
                } else if j0 == -1 {
                    *d += w1 * proj[0];
                }
            }
        }
    }
    let scale = PI / geo.n_angles() as f64;
    let mask = circle_mask(size);
    out.zip_mut_with(&mask, |v, &inside| {
        *v = if inside { *v * scale } else { 0.0 };
    });
    Image::new(out)
}

/// Frobenius inner product.
pub fn inner(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = rng::stream(seed, &[]);
        Image::new(Array2::from_shape_simple_fn((size, size), || rng.gen::<f64>())).unwrap()
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let geo = Geometry::for_image(64, 45).unwrap();
        let sino = forward_project(&Image::zeros(64), &geo).unwrap();
        assert!(sino.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_scales_linearly() {
        let img = random_image(24, 3);
        let geo = Geometry::for_image(24, 17).unwrap();
        let a = forward_project(&img, &geo).unwrap();
        let b = forward_project(&Image::new(img.data() * 2.0).unwrap(), &geo).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn detector_too_narrow_is_a_config_error() {
        let geo = Geometry::parallel(10, 40).unwrap();
        assert!(matches!(forward_project(&Image::zeros(64), &geo), Err(Error::Config(_))));
    }

    #[test]
    fn default_detector_count_is_even_and_covers_diagonal() {
        for n in [16, 32, 63, 64, 128] {
            let d = default_detector_count(n);
            assert_eq!(d % 2, 0);
            assert!(d as f64 >= n as f64 * std::f64::consts::SQRT_2);
        }
    }

    #[test]
    fn noise_rejects_negative_sigma_and_is_identity_at_zero() {
        let geo = Geometry::for_image(16, 8).unwrap();
        let sino = forward_project(&random_image(16, 1), &geo).unwrap();
        assert!(matches!(add_noise(&sino, -0.1, 0), Err(Error::Argument(_))));
        assert_eq!(add_noise(&sino, 0.0, 9).unwrap(), sino);
        assert_eq!(add_noise(&sino, 0.3, 9).unwrap(), add_noise(&sino, 0.3, 9).unwrap());
        assert_ne!(add_noise(&sino, 0.3, 9).unwrap(), add_noise(&sino, 0.3, 10).unwrap());
    }

    #[test]
    fn sampling_operator_validation() {
        assert!(SamplingOperator::new(10, vec![]).is_err());
        assert!(SamplingOperator::new(10, vec![3, 3]).is_err());
        assert!(SamplingOperator::new(10, vec![2, 10]).is_err());
        let op = SamplingOperator::uniform(720, 120).unwrap();
        assert_eq!(op.kept().len(), 120);
        assert!(op.kept().iter().enumerate().all(|(i, &k)| k == 6 * i));
    }

    #[test]
    fn subsample_shapes_and_identity() {
        let geo = Geometry::for_image(16, 720).unwrap();
        let sino = forward_project(&random_image(16, 4), &geo).unwrap();
        let full = SamplingOperator::full(720).unwrap();
        assert_eq!(full.subsample(&sino).unwrap(), sino);
        assert_eq!(full.mask_rows(&sino).unwrap(), sino);

        let op = SamplingOperator::uniform(720, 120).unwrap();
        let compact = op.subsample(&sino).unwrap();
        assert_eq!(compact.data().nrows(), 120);
        let masked = op.mask_rows(&sino).unwrap();
        let zero_rows = masked
            .data()
            .outer_iter()
            .filter(|r| r.iter().all(|&v| v == 0.0))
            .count();
        assert_eq!(zero_rows, 600);
        assert_eq!(op.mask_rows(&masked).unwrap(), masked);
        assert_eq!(op.embed(&compact, &geo).unwrap(), masked);

        let wrong = SamplingOperator::uniform(90, 30).unwrap();
        assert!(wrong.subsample(&sino).is_err());
    }

    #[test]
    fn fbp_needs_two_detectors_and_maps_zero_to_zero() {
        let geo = Geometry::parallel(8, 1).unwrap();
        assert!(matches!(fbp(&Sinogram::zeros(geo), 4, Filter::RamLak), Err(Error::Config(_))));
        let geo = Geometry::for_image(32, 30).unwrap();
        let img = fbp(&Sinogram::zeros(geo), 32, Filter::Hann).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filter_names_parse() {
        assert_eq!("ram-lak".parse::<Filter>().unwrap(), Filter::RamLak);
        assert_eq!("shepp-logan".parse::<Filter>().unwrap(), Filter::SheppLogan);
        assert_eq!("hann".parse::<Filter>().unwrap(), Filter::Hann);
        assert!("butterworth".parse::<Filter>().is_err());
    }
}
