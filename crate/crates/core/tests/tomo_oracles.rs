use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use swarm_core::metrics::{mse_in_region, psnr_from_mse};
use swarm_core::tomo::{self, Filter, Geometry, Image};
use swarm_core::{phantom, rng};

fn random_image(size: usize, seed: u64) -> Image {
    let mut r = rng::stream(seed, &[]);
    Image::new(Array2::from_shape_simple_fn((size, size), || r.gen::<f64>())).unwrap()
}

/// Chord of a disk of radius `r` at offset `s` from its centre.
fn chord(r: f64, s: f64) -> f64 {
    2.0 * (r * r - s * s).max(0.0).sqrt()
}

#[test]
// Central bins sit at s = +-0.5 on the even detector grid.
fn disk_projection_matches_chord_lengths() {
    let radius = 20.0;
    let img = phantom::disk(64, radius, 1.0);
    let geo = Geometry::for_image(64, 36).unwrap();
    let sino = tomo::forward_project(&img, &geo).unwrap();
    for a in 0..geo.n_angles() {
        for j in 0..geo.n_detectors() {
            let s = geo.detector_offset(j);
            if s.abs() > 1.0 {
                continue;
            }
            let expect = chord(radius, s);
            let got = sino.data()[[a, j]];
            assert!((got - expect).abs() <= 0.02 * expect, "angle {a} bin {j}: {got} vs {expect}");
        }
    }
}

#[test]
fn adjoint_consistency() {
    for seed in 0..4 {
        let img = random_image(32, seed);
        let geo = Geometry::for_image(32, 23).unwrap();
        let y = rng::normal_matrix(&mut rng::stream(seed, &[9]), geo.n_angles(), geo.n_detectors());
        let y = tomo::Sinogram::new(geo.clone(), y).unwrap();
        let ax = tomo::forward_project(&img, &geo).unwrap();
        let aty = tomo::back_project(&y, 32).unwrap();
        let lhs = tomo::inner(ax.data().view(), y.data().view());
        let rhs = tomo::inner(img.data().view(), aty.data().view());
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }
}

fn round_trip_psnr(img: &Image, views: usize) -> f64 {
    let n = img.size();
    let geo = Geometry::for_image_with_spacing(n, views, 0.5).unwrap();
    let sino = tomo::forward_project(img, &geo).unwrap();
    let rec = tomo::fbp(&sino, n, Filter::RamLak).unwrap();
    let mask = tomo::circle_mask(n);
    psnr_from_mse(mse_in_region(rec.data().view(), img.data().view(), mask.view()), 1.0)
}

#[test]
fn fbp_round_trip_quality_and_view_monotonicity() {
    let img = phantom::shepp_logan(128);
    let psnrs: Vec<f64> = [30, 60, 90, 120, 720].iter().map(|&v| round_trip_psnr(&img, v)).collect();
    assert!(psnrs[4] >= 30.0, "720-view PSNR {:.2}", psnrs[4]);
    assert!(psnrs.windows(2).all(|w| w[0] < w[1]), "{psnrs:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn projection_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x1 = random_image(12, seed);
        let x2 = random_image(12, seed.wrapping_add(1));
        let geo = Geometry::for_image(12, 9).unwrap();
        let combo = Image::new(x1.data() * a + x2.data() * b).unwrap();
        let lhs = tomo::forward_project(&combo, &geo).unwrap();
        let p1 = tomo::forward_project(&x1, &geo).unwrap();
        let p2 = tomo::forward_project(&x2, &geo).unwrap();
        let rhs = p1.data() * a + p2.data() * b;
        let scale = rhs.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        for (l, r) in lhs.data().iter().zip(rhs.iter()) {
            prop_assert!((l - r).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn row_mask_idempotent_and_homogeneous(seed in any::<u64>(), c in -3.0f64..3.0, kept in 1usize..12) {
        let geo = Geometry::for_image(8, 12).unwrap();
        let y = rng::normal_matrix(&mut rng::stream(seed, &[]), 12, geo.n_detectors());
        let y = tomo::Sinogram::new(geo, y).unwrap();
        let op = tomo::SamplingOperator::uniform(12, kept).unwrap();
        let once = op.mask_rows(&y).unwrap();
        prop_assert_eq!(op.mask_rows(&once).unwrap(), once.clone());
        let scaled = y.with_data(y.data() * c).unwrap();
        let lhs = op.mask_rows(&scaled).unwrap();
        prop_assert_eq!(lhs.data(), &(once.data() * c));
    }
}

#[test]
fn noise_standard_deviation() {
    let geo = Geometry::parallel(100, 1000).unwrap();
    let clean = tomo::Sinogram::zeros(geo);
    let noisy = tomo::add_noise(&clean, 0.1, 77).unwrap();
    let n = noisy.data().len() as f64;
    let mean = noisy.data().sum() / n;
    let sd = (noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 0.1).abs() <= 0.001, "{sd}");
}
