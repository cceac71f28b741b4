//! Single-level separable 2-D wavelet analysis and synthesis.
//!
//! Orientation: the first letter of a band name is the filter applied
//! along each row (horizontal direction), the second the filter applied
//! along each column. `lh` is low-pass along rows and high-pass down
//! columns, so horizontal edges land in `lh` and vertical edges in `hl`.
//! Odd dimensions are padded by repeating the last row/column and cropped
//! again on synthesis.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tomo::{Geometry, Sinogram};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WaveletFamily {
    /// Orthonormal Haar.
    #[default]
    Haar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub ll: Array2<f64>,
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
    pub parent_shape: (usize, usize),
    pub family: WaveletFamily,
}

/// The three detail bands, indexed 0 = lh, 1 = hl, 2 = hh.
#[derive(Clone, Debug, PartialEq)]
pub struct HighFrequencySet {
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
}

pub const BAND_NAMES: [&str; 3] = ["lh", "hl", "hh"];

impl HighFrequencySet {
    pub fn band(&self, i: usize) -> &Array2<f64> {
        match i {
            0 => &self.lh,
            1 => &self.hl,
            2 => &self.hh,
            _ => panic!("high-frequency band index {i} out of range"),
        }
    }

    pub fn band_mut(&mut self, i: usize) -> &mut Array2<f64> {
        match i {
            0 => &mut self.lh,
            1 => &mut self.hl,
            2 => &mut self.hh,
            _ => panic!("high-frequency band index {i} out of range"),
        }
    }

    pub fn from_bands(bands: [Array2<f64>; 3]) -> Self {
        let [lh, hl, hh] = bands;
        HighFrequencySet { lh, hl, hh }
    }
}

impl WaveletBands {
    pub fn band_shape(&self) -> (usize, usize) {
        self.ll.dim()
    }

    pub fn high_frequency(&self) -> HighFrequencySet {
        HighFrequencySet {
            lh: self.lh.clone(),
            hl: self.hl.clone(),
            hh: self.hh.clone(),
        }
    }

    /// Replace the detail bands, keeping `ll`.
    pub fn with_high_frequency(&self, hf: &HighFrequencySet) -> Result<Self> {
        let shape = self.band_shape();
        if [&hf.lh, &hf.hl, &hf.hh].iter().any(|b| b.dim() != shape) {
            return Err(Error::argument("high-frequency bands do not match the LL band"));
        }
        Ok(WaveletBands {
            ll: self.ll.clone(),
            lh: hf.lh.clone(),
            hl: hf.hl.clone(),
            hh: hf.hh.clone(),
            parent_shape: self.parent_shape,
            family: self.family,
        })
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

pub fn band_shape_for(parent: (usize, usize)) -> (usize, usize) {
    (parent.0.div_ceil(2), parent.1.div_ceil(2))
}

/// Forward transform of a bare matrix.
pub fn dwt2_matrix(x: ArrayView2<f64>) -> Result<WaveletBands> {
    let (rows, cols) = x.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::argument("cannot transform an empty matrix"));
    }
    let (br, bc) = band_shape_for((rows, cols));
    let at = |r: usize, c: usize| x[[r.min(rows - 1), c.min(cols - 1)]];
    let mut ll = Array2::zeros((br, bc));
    let mut lh = Array2::zeros((br, bc));
    let mut hl = Array2::zeros((br, bc));
    let mut hh = Array2::zeros((br, bc));
    for i in 0..br {
        for j in 0..bc {
            let a = at(2 * i, 2 * j);
            let b = at(2 * i, 2 * j + 1);
            let c = at(2 * i + 1, 2 * j);
            let d = at(2 * i + 1, 2 * j + 1);
            ll[[i, j]] = 0.5 * ((a + b) + (c + d));
            lh[[i, j]] = 0.5 * ((a + b) - (c + d));
            hl[[i, j]] = 0.5 * ((a - b) + (c - d));
            hh[[i, j]] = 0.5 * ((a - b) - (c - d));
        }
    }
    Ok(WaveletBands {
        ll,
        lh,
        hl,
        hh,
        parent_shape: (rows, cols),
        family: WaveletFamily::Haar,
    })
}

/// Inverse transform, cropped to the parent shape.
pub fn idwt2_matrix(bands: &WaveletBands) -> Result<Array2<f64>> {
    let shape = bands.ll.dim();
    if [&bands.lh, &bands.hl, &bands.hh].iter().any(|b| b.dim() != shape)
        || band_shape_for(bands.parent_shape) != shape
    {
        return Err(Error::argument(format!(
            "inconsistent band shapes for parent {:?}",
            bands.parent_shape
        )));
    }
    let (rows, cols) = bands.parent_shape;
    let mut out = Array2::zeros((2 * shape.0, 2 * shape.1));
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            let (s, v, h, d) = (bands.ll[[i, j]], bands.lh[[i, j]], bands.hl[[i, j]], bands.hh[[i, j]]);
            out[[2 * i, 2 * j]] = 0.5 * ((s + v) + (h + d));
            out[[2 * i, 2 * j + 1]] = 0.5 * ((s + v) - (h + d));
            out[[2 * i + 1, 2 * j]] = 0.5 * ((s - v) + (h - d));
            out[[2 * i + 1, 2 * j + 1]] = 0.5 * ((s - v) - (h - d));
        }
    }
    if out.dim() != (rows, cols) {
        out = out.slice(ndarray::s![..rows, ..cols]).to_owned();
    }
    Ok(out)
}

pub fn dwt2(sino: &Sinogram) -> Result<WaveletBands> {
    dwt2_matrix(sino.data().view())
}

pub fn idwt2(bands: &WaveletBands, geometry: &Geometry) -> Result<Sinogram> {
    Sinogram::new(geometry.clone(), idwt2_matrix(bands)?)
}

pub fn extract_hf_matrix(x: ArrayView2<f64>) -> Result<HighFrequencySet> {
    let WaveletBands { lh, hl, hh, .. } = dwt2_matrix(x)?;
    Ok(HighFrequencySet { lh, hl, hh })
}

/// Detail bands of the sinogram; the caller keeps the LL band itself.
pub fn extract_hf(sino: &Sinogram) -> Result<HighFrequencySet> {
    extract_hf_matrix(sino.data().view())
}

/// Pick one detail band uniformly at random. Returns its index too.
pub fn select_random_hf(hfs: &HighFrequencySet, seed: u64) -> (usize, &Array2<f64>) {
    let i = rng::stream(seed, &[rng::tag::HF_SELECT]).gen_range(0..3);
    (i, hfs.band(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        rng::normal_matrix(&mut rng::stream(seed, &[]), rows, cols)
    }

    /// Orthonormal Haar analysis as an explicit matrix acting on the
    /// flattened 2x2 block `[a, b, c, d]`.
    fn brute_block(block: [f64; 4]) -> [f64; 4] {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let lo = [h, h];
        let hi = [h, -h];
        let filt = |row: [f64; 2], col: [f64; 2]| {
            let mut acc = 0.0;
            for (r, wr) in col.iter().enumerate() {
                for (c, wc) in row.iter().enumerate() {
                    acc += wr * wc * block[2 * r + c];
                }
            }
            acc
        };
        [filt(lo, lo), filt(lo, hi), filt(hi, lo), filt(hi, hi)]
    }

    #[test]
    fn two_by_two_block_matches_explicit_filters() {
        let (a, b, c, d) = (1.5, -2.0, 0.25, 4.0);
        let bands = dwt2_matrix(ndarray::arr2(&[[a, b], [c, d]]).view()).unwrap();
        let expect = brute_block([a, b, c, d]);
        let got = [bands.ll[[0, 0]], bands.lh[[0, 0]], bands.hl[[0, 0]], bands.hh[[0, 0]]];
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-14);
        }
        assert!((got[0] - (a + b + c + d) / 2.0).abs() < 1e-14);
        assert!((got[1] - ((a + b) - (c + d)) / 2.0).abs() < 1e-14);
        assert!((got[2] - ((a - b) + (c - d)) / 2.0).abs() < 1e-14);
        assert!((got[3] - (a - b - c + d) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn constant_has_no_detail() {
        let bands = dwt2_matrix(Array2::from_elem((8, 6), 3.0).view()).unwrap();
        assert!(bands.ll.iter().all(|&v| v == 6.0));
        for b in [&bands.lh, &bands.hl, &bands.hh] {
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_and_inconsistent_inputs_fail() {
        assert!(dwt2_matrix(Array2::<f64>::zeros((0, 4)).view()).is_err());
        let mut bands = dwt2_matrix(random(8, 8, 1).view()).unwrap();
        bands.hh = Array2::zeros((3, 4));
        assert!(idwt2_matrix(&bands).is_err());
    }

    #[test]
    fn odd_shapes_round_trip_on_original_support() {
        let x = random(9, 7, 2);
        let bands = dwt2_matrix(x.view()).unwrap();
        assert_eq!(bands.band_shape(), (5, 4));
        let y = idwt2_matrix(&bands).unwrap();
        assert_eq!(y.dim(), (9, 7));
        assert!((&x - &y).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_bands_give_zero() {
        let bands = dwt2_matrix(Array2::zeros((6, 6)).view()).unwrap();
        assert!(idwt2_matrix(&bands).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_lands_in_hl() {
        // Step at an odd column so it falls inside a Haar pair.
        let x = Array2::from_shape_fn((32, 32), |(_, c)| if c >= 15 { 1.0 } else { 0.0 });
        let hf = extract_hf_matrix(x.view()).unwrap();
        let norm = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm(&hf.hl) > 10.0 * norm(&hf.lh).max(1e-12));
        assert!(norm(&hf.hl) > 0.0);
    }

    #[test]
    fn extract_hf_is_dwt_detail() {
        let x = random(10, 12, 3);
        let bands = dwt2_matrix(x.view()).unwrap();
        let hf = extract_hf_matrix(x.view()).unwrap();
        assert_eq!(hf.lh, bands.lh);
        assert_eq!(hf.hl, bands.hl);
        assert_eq!(hf.hh, bands.hh);
    }

    #[test]
    fn zeroing_one_band_leaves_the_others() {
        let x = random(16, 16, 4);
        let mut bands = dwt2_matrix(x.view()).unwrap();
        bands.hh.fill(0.0);
        let y = idwt2_matrix(&bands).unwrap();
        let again = dwt2_matrix(y.view()).unwrap();
        assert!(again.hh.iter().all(|v| v.abs() < 1e-10));
        for (a, b) in [(&again.ll, &bands.ll), (&again.lh, &bands.lh), (&again.hl, &bands.hl)] {
            assert!((a - b).iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn band_selection_is_uniform_and_reproducible() {
        let hfs = extract_hf_matrix(random(8, 8, 5).view()).unwrap();
        assert_eq!(select_random_hf(&hfs, 42).0, select_random_hf(&hfs, 42).0);
        let draws = 300_000;
        let mut counts = [0usize; 3];
        for s in 0..draws {
            counts[select_random_hf(&hfs, s).0] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn identical_bands_make_selection_irrelevant() {
        let b = random(4, 4, 6);
        let hfs = HighFrequencySet::from_bands([b.clone(), b.clone(), b.clone()]);
        for s in 0..10 {
            assert_eq!(select_random_hf(&hfs, s).1, &b);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn perfect_reconstruction_and_parseval(
                half_rows in 1usize..12, half_cols in 1usize..12, seed in any::<u64>()
            ) {
                let x = random(2 * half_rows, 2 * half_cols, seed);
                let bands = dwt2_matrix(x.view()).unwrap();
                let y = idwt2_matrix(&bands).unwrap();
                prop_assert!((&x - &y).iter().all(|v| v.abs() <= 1e-10));
                let energy: f64 = x.iter().map(|v| v * v).sum();
                prop_assert!((bands.energy() - energy).abs() <= 1e-9 * energy);
            }

            #[test]
            fn analysis_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0) {
                let x = random(6, 8, seed);
                let y = random(6, 8, seed ^ 0xff);
                let combo = dwt2_matrix((&x * alpha + &y).view()).unwrap();
                let bx = dwt2_matrix(x.view()).unwrap();
                let by = dwt2_matrix(y.view()).unwrap();
                let lin = &bx.hh * alpha + &by.hh;
                prop_assert!((&combo.hh - &lin).iter().all(|v| v.abs() < 1e-12));
                let lin = &bx.ll * alpha + &by.ll;
                prop_assert!((&combo.ll - &lin).iter().all(|v| v.abs() < 1e-12));
            }
        }
    }
}
