//! Synthetic phantoms: Shepp-Logan, random ellipse composites and disks.
//!
//! Ellipses are specified in normalized coordinates where the inscribed
//! circle of the image has radius 1.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tomo::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub value: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Rotation, radians counter-clockwise.
    pub angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        let u = (dx * c + dy * s) / self.semi_x;
        let v = (-dx * s + dy * c) / self.semi_y;
        u * u + v * v <= 1.0
    }
}

/// Modified Shepp-Logan head (Toft's contrast-enhanced intensities).
pub fn shepp_logan_ellipses() -> Vec<Ellipse> {
    const TABLE: [[f64; 6]; 10] = [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
        [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
        [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
        [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
        [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
        [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
        [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
        [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
        [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
    ];
    TABLE
        .iter()
        .map(|&[value, semi_x, semi_y, center_x, center_y, deg]| Ellipse {
            value,
            semi_x,
            semi_y,
            center_x,
            center_y,
            angle: deg.to_radians(),
        })
        .collect()
}

/// Rasterize a sum of ellipses, sampling each pixel on a
/// `supersample x supersample` sub-grid, then clip to `[0, 1]`.
pub fn render(ellipses: &[Ellipse], size: usize, supersample: usize) -> Image {
    let ss = supersample.max(1);
    let scale = 2.0 / size as f64;
    let half = size as f64 / 2.0;
    let data = Array2::from_shape_fn((size, size), |(r, c)| {
        let mut acc = 0.0;
        for i in 0..ss {
            for j in 0..ss {
                let px = c as f64 + (j as f64 + 0.5) / ss as f64 - half;
                let py = half - (r as f64 + (i as f64 + 0.5) / ss as f64);
                let (x, y) = (px * scale, py * scale);
                acc += ellipses
                    .iter()
                    .filter(|e| e.contains(x, y))
                    .map(|e| e.value)
                    .sum::<f64>();
            }
        }
        (acc / (ss * ss) as f64).clamp(0.0, 1.0)
    });
    Image::new(data).expect("rendered phantom is square and finite")
}

pub fn shepp_logan(size: usize) -> Image {
    render(&shepp_logan_ellipses(), size, 1)
}

/// Centred disk of the given radius in pixels.
pub fn disk(size: usize, radius: f64, value: f64) -> Image {
    let half = (size as f64 - 1.0) / 2.0;
    let data = Array2::from_shape_fn((size, size), |(r, c)| {
        let x = c as f64 - half;
        let y = half - r as f64;
        if x * x + y * y <= radius * radius {
            value
        } else {
            0.0
        }
    });
    Image::new(data).expect("disk is square and finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
    Disks,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp_logan" => Ok(PhantomKind::SheppLogan),
            "random_ellipses" => Ok(PhantomKind::RandomEllipses),
            "disks" => Ok(PhantomKind::Disks),
            other => Err(Error::argument(format!("unknown phantom kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: usize,
    pub seed: u64,
    pub count: usize,
}

fn random_ellipses(rng: &mut impl Rng) -> Vec<Ellipse> {
    let n_inner = rng.gen_range(3..=7);
    let mut out = Vec::with_capacity(n_inner + 1);
    // Body outline; stays inside the reconstruction circle.
    out.push(Ellipse {
        value: rng.gen_range(0.5..1.0),
        semi_x: rng.gen_range(0.55..0.85),
        semi_y: rng.gen_range(0.55..0.85),
        center_x: rng.gen_range(-0.1..0.1),
        center_y: rng.gen_range(-0.1..0.1),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    });
    for _ in 0..n_inner {
        let radius = rng.gen_range(0.0..0.45);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        out.push(Ellipse {
            value: rng.gen_range(-0.4..0.4),
            semi_x: rng.gen_range(0.04..0.3),
            semi_y: rng.gen_range(0.04..0.3),
            center_x: radius * phi.cos(),
            center_y: radius * phi.sin(),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        });
    }
    out
}

fn random_disks(rng: &mut impl Rng) -> Vec<Ellipse> {
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| {
            let r = rng.gen_range(0.1..0.4);
            let reach = 0.9 - r;
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = rng.gen_range(0.0..reach);
            Ellipse {
                value: rng.gen_range(0.3..1.0),
                semi_x: r,
                semi_y: r,
                center_x: dist * phi.cos(),
                center_y: dist * phi.sin(),
                angle: 0.0,
            }
        })
        .collect()
}

/// Deterministic phantom corpus.
pub fn make_phantoms(spec: &PhantomSpec) -> Result<Vec<Image>> {
    if spec.size < 16 {
        return Err(Error::argument(format!("phantom size must be >= 16, got {}", spec.size)));
    }
    Ok((0..spec.count)
        .map(|i| {
            let mut rng = rng::stream(spec.seed, &[rng::tag::PHANTOM, i as u64]);
            match spec.kind {
                PhantomKind::SheppLogan => shepp_logan(spec.size),
                PhantomKind::RandomEllipses => render(&random_ellipses(&mut rng), spec.size, 2),
                PhantomKind::Disks => render(&random_disks(&mut rng), spec.size, 2),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tomo::circle_mask;

    #[test]
    fn shepp_logan_range_and_background() {
        let img = shepp_logan(64);
        let max = img.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!(max > 0.0 && max <= 1.0);
        let skull = &shepp_logan_ellipses()[0];
        for r in 0..64 {
            for c in 0..64 {
                let (x, y) = img.pixel_center(r, c);
                if !skull.contains(x / 32.0, y / 32.0) {
                    assert_eq!(img.data()[[r, c]], 0.0);
                }
            }
        }
    }

    #[test]
    fn corpus_is_reproducible_and_distinct() {
        let spec = PhantomSpec {
            kind: PhantomKind::RandomEllipses,
            size: 32,
            seed: 11,
            count: 40,
        };
        let a = make_phantoms(&spec).unwrap();
        assert_eq!(a, make_phantoms(&spec).unwrap());
        for i in 0..a.len() {
            assert!(a[i].data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for j in i + 1..a.len() {
                let diff = (a[i].data() - a[j].data()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(diff > 0.0, "phantoms {i} and {j} collide");
            }
        }
    }

    #[test]
    fn phantoms_stay_inside_reconstruction_circle() {
        for kind in [PhantomKind::RandomEllipses, PhantomKind::Disks, PhantomKind::SheppLogan] {
            let spec = PhantomSpec {
                kind,
                size: 48,
                seed: 5,
                count: 10,
            };
            let mask = circle_mask(48);
            for img in make_phantoms(&spec).unwrap() {
                for (v, &inside) in img.data().iter().zip(mask.iter()) {
                    assert!(inside || *v == 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_tiny_phantoms() {
        let spec = PhantomSpec {
            kind: PhantomKind::Disks,
            size: 8,
            seed: 0,
            count: 1,
        };
        assert!(make_phantoms(&spec).is_err());
    }
}
