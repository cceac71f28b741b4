//! File formats: raw little-endian f32 matrices with a `key: value` text
//! header beside them, and portable graymap exports for inspection.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tomo::{Geometry, Image, Sinogram};
use crate::wavelet::HighFrequencySet;

/// Ordered `key: value` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Header::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("header is missing `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::config(format!("header value `{key}: {raw}` is malformed")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut h = Header::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::config(format!("header line {} has no `key: value`", n + 1)))?;
            h.set(k.trim(), v.trim());
        }
        Ok(h)
    }
}

/// Write bytes to a temporary sibling, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn header_path(raw: &Path) -> PathBuf {
    raw.with_extension("hdr")
}

/// `<path>` gets the f32 data, `<path>.hdr` (extension replaced) the header
/// with `rows`, `cols` and `dtype` added.
pub fn write_raw(path: &Path, data: ArrayView2<f64>, header: &Header) -> Result<()> {
    let mut h = header.clone();
    h.set("dtype", "f32le").set("rows", data.nrows()).set("cols", data.ncols());
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    write_atomic(&header_path(path), h.to_text().as_bytes())
}

pub fn read_raw(path: &Path) -> Result<(Array2<f64>, Header)> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(format!("reading {}", hp.display()), e))?;
    let h = Header::from_text(&text)?;
    if h.require("dtype")? != "f32le" {
        return Err(Error::config(format!("{}: unsupported dtype", hp.display())));
    }
    let rows: usize = h.parse("rows")?;
    let cols: usize = h.parse("cols")?;
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::config(format!(
            "{}: expected {} bytes for {rows}x{cols}, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values).expect("length checked");
    Ok((data, h))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut h = Header::new();
    h.set("kind", "image").set("width", img.size()).set("height", img.size());
    write_raw(path, img.data().view(), &h)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (data, h) = read_raw(path)?;
    if h.get("kind").is_some_and(|k| k != "image") {
        return Err(Error::config(format!("{} does not hold an image", path.display())));
    }
    Image::new(data)
}

fn join_f64(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad entry `{v}` in header list `{key}`")))
        })
        .collect()
}

/// Sinogram with its geometry; `extra` adds keys such as `kept`.
pub fn write_sinogram(path: &Path, sino: &Sinogram, extra: &Header) -> Result<()> {
    let geo = sino.geometry();
    let mut h = extra.clone();
    h.set("kind", "sinogram")
        .set("n_angles", geo.n_angles())
        .set("n_detectors", geo.n_detectors())
        .set("detector_spacing", format!("{:?}", geo.detector_spacing()))
        .set("angles", join_f64(geo.angles().iter().copied()));
    write_raw(path, sino.data().view(), &h)
}

pub fn read_sinogram(path: &Path) -> Result<(Sinogram, Header)> {
    let (data, h) = read_raw(path)?;
    if h.get("kind").is_some_and(|k| k != "sinogram") {
        return Err(Error::config(format!("{} does not hold a sinogram", path.display())));
    }
    let angles: Vec<f64> = parse_list(h.require("angles")?, "angles")?;
    let n_det: usize = h.parse("n_detectors")?;
    if angles.len() != h.parse::<usize>("n_angles")? {
        return Err(Error::config(format!("{}: angle list length disagrees with n_angles", path.display())));
    }
    let geo = Geometry::with_angles(angles, n_det, h.parse("detector_spacing")?)?;
    Ok((Sinogram::new(geo, data)?, h))
}

/// Comma-separated kept-row indices from a header, if present.
pub fn kept_rows(h: &Header) -> Result<Option<Vec<usize>>> {
    h.get("kept").map(|raw| parse_list(raw, "kept")).transpose()
}

pub fn format_kept(kept: &[usize]) -> String {
    kept.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut h = Header::new();
    h.set("kind", "mask").set("mask_kind", mask.kind.name());
    write_raw(path, mask.data.view(), &h)
}

/// Binary PGM (`P5`). `maxval > 255` selects 16-bit big-endian samples.
fn pgm_bytes(data: ArrayView2<f64>, lo: f64, hi: f64, maxval: u16) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let mut out = format!("P5\n{cols} {rows}\n{maxval}\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for &v in data.iter() {
        let q = (((v - lo) / span).clamp(0.0, 1.0) * maxval as f64).round() as u16;
        if maxval > 255 {
            out.extend_from_slice(&q.to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    out
}

/// 16-bit graymap; values are mapped linearly from `[lo, hi]`.
pub fn write_pgm16(path: &Path, data: ArrayView2<f64>, lo: f64, hi: f64) -> Result<()> {
    write_atomic(path, &pgm_bytes(data, lo, hi, u16::MAX))
}

/// 16-bit graymap scaled to the data's own range.
pub fn write_pgm16_auto(path: &Path, data: ArrayView2<f64>) -> Result<()> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    write_pgm16(path, data, lo, hi)
}

/// 8-bit graymap of a binary mask (0 or 255).
pub fn write_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write_atomic(path, &pgm_bytes(mask.data.view(), 0.0, 1.0, 255))
}

/// The three detail bands side by side, each scaled symmetrically by its
/// own largest magnitude so zero maps to mid-gray.
pub fn band_triptych(hf: &HighFrequencySet) -> Array2<f64> {
    let (r, c) = hf.lh.dim();
    let gap = 2;
    let mut out = Array2::from_elem((r, 3 * c + 2 * gap), 0.5);
    for i in 0..3 {
        let band = hf.band(i);
        let m = band.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let off = i * (c + gap);
        for ((y, x), &v) in band.indexed_iter() {
            out[[y, off + x]] = if m > 0.0 { 0.5 + 0.5 * v / m } else { 0.5 };
        }
    }
    out
}

pub fn write_band_triptych(path: &Path, hf: &HighFrequencySet) -> Result<()> {
    write_pgm16(path, band_triptych(hf).view(), 0.0, 1.0)
}
