use std::collections::HashSet;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use swarm_core::masks::{MaskKind, MaskSpec};
use swarm_core::phantom::{make_phantoms, PhantomKind, PhantomSpec};
use swarm_core::score::{
    build_score_network, dsm_loss, train_shd, train_srm, ArchSpec, Family, LogTag, ScoreModelParams, TrainConfig,
};
use swarm_core::sde::{reverse_sample, LangevinConfig, NoiseSchedule};
use swarm_core::tomo::{forward_project, Geometry, Sinogram};

fn corpus(count: usize, image: usize, angles: usize, seed: u64) -> Vec<Sinogram> {
    let geo = Geometry::for_image(image, angles).unwrap();
    make_phantoms(&PhantomSpec {
        kind: PhantomKind::RandomEllipses,
        size: image,
        seed,
        count,
    })
    .unwrap()
    .iter()
    .map(|p| forward_project(p, &geo).unwrap())
    .collect()
}

fn schedule(data: &[Sinogram], n: usize) -> NoiseSchedule {
    let m = data.iter().flat_map(|s| s.data().iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    NoiseSchedule::for_data(m, n).unwrap()
}

/// Mean DSM loss over the corpus for a fixed set of noise seeds.
fn eval_loss(params: &ScoreModelParams, data: &[Sinogram], sched: &NoiseSchedule) -> f64 {
    let views: Vec<ArrayView2<f64>> = data.iter().map(|s| s.data().view()).collect();
    (0..8).map(|k| dsm_loss(params, &views, sched, 1000 + k).unwrap().0).sum::<f64>() / 8.0
}

fn identity_masks(rows: usize) -> MaskSpec {
    MaskSpec {
        kind: Some(MaskKind::SparseView),
        sparse_counts: vec![rows],
        ..MaskSpec::default()
    }
}

#[test]
fn smoke_training_halves_the_loss() {
    let data = corpus(10, 22, 32, 5);
    assert_eq!(data[0].data().dim(), (32, 32));
    let sched = schedule(&data, 100);
    let arch = ArchSpec {
        base_channels: 8,
        levels: 3,
    };
    let cfg = TrainConfig {
        n_iterations: 200,
        batch_size: 4,
        ema_decay: 0.9,
        seed: 1,
        ..TrainConfig::default()
    };
    let init = build_score_network(arch, Family::Srm, cfg.seed).unwrap();
    let out = train_srm(&data, &identity_masks(32), &sched, arch, &cfg).unwrap();
    let mut init_p = init;
    init_p.precond = out.params.precond;
    let before = eval_loss(&init_p, &data, &sched);
    let after = eval_loss(&out.params, &data, &sched);
    assert!(after <= 0.5 * before, "loss {before} -> {after}");
}

#[test]
fn every_mask_kind_is_logged_early() {
    let data = corpus(4, 16, 16, 2);
    let sched = schedule(&data, 20);
    let cfg = TrainConfig {
        n_iterations: 100,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let masks = MaskSpec {
        circle_radius: 3.0,
        ..MaskSpec::default()
    };
    let out = train_srm(&data, &masks, &sched, ArchSpec { base_channels: 1, levels: 1 }, &cfg).unwrap();
    let seen: HashSet<MaskKind> = out
        .log
        .iter()
        .flat_map(|e| match &e.tag {
            LogTag::Masks(k) => k.clone(),
            LogTag::Bands(_) => panic!("srm log tagged with bands"),
        })
        .collect();
    assert_eq!(seen.len(), 3);
}

#[test]
fn band_selection_frequencies_are_uniform() {
    let data = corpus(3, 16, 8, 3);
    let sched = schedule(&data, 20);
    let cfg = TrainConfig {
        n_iterations: 3000,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let out = train_shd(&data, &sched, ArchSpec { base_channels: 1, levels: 1 }, &cfg).unwrap();
    let mut counts = [0usize; 3];
    for e in &out.log {
        match &e.tag {
            LogTag::Bands(b) => b.iter().for_each(|&i| counts[i] += 1),
            LogTag::Masks(_) => panic!("shd log tagged with masks"),
        }
    }
    for c in counts {
        let f = c as f64 / 3000.0;
        assert!((f - 1.0 / 3.0).abs() <= 0.03, "{counts:?}");
    }
}

#[test]
fn zero_iterations_return_the_initialization() {
    let data = corpus(3, 16, 8, 4);
    let sched = schedule(&data, 10);
    let arch = ArchSpec { base_channels: 2, levels: 2 };
    let cfg = TrainConfig {
        n_iterations: 0,
        seed: 9,
        ..TrainConfig::default()
    };
    let init = build_score_network(arch, Family::Srm, 9).unwrap();
    let srm = train_srm(&data, &MaskSpec::default(), &sched, arch, &cfg).unwrap();
    assert_eq!(srm.params.weights, init.weights);
    assert!(srm.log.is_empty());
    let shd = train_shd(&data, &sched, arch, &cfg).unwrap();
    assert_eq!(shd.params.weights, build_score_network(arch, Family::Shd, 9).unwrap().weights);
}

#[test]
fn constant_data_drives_hf_samples_to_zero() {
    let geo = Geometry::parallel(16, 16).unwrap();
    let data: Vec<Sinogram> = (0..4)
        .map(|k| Sinogram::new(geo.clone(), Array2::from_elem((16, 16), 1.0 + k as f64)).unwrap())
        .collect();
    for s in &data {
        let hf = swarm_core::wavelet::extract_hf(s).unwrap();
        assert!((0..3).all(|i| hf.band(i).iter().all(|&v| v == 0.0)));
    }
    let sched = NoiseSchedule::geometric(0.01, 10.0, 50).unwrap();
    let cfg = TrainConfig {
        n_iterations: 50,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train_shd(&data, &sched, ArchSpec { base_channels: 2, levels: 2 }, &cfg).unwrap();
    let x = reverse_sample((8, 8), &out.params, &sched, &LangevinConfig::default(), 3, true).unwrap();
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
    assert!(mean_abs <= 0.05 * sched.sigma_min(), "mean |x| = {mean_abs}");
}

#[test]
fn desk_run_lowers_the_loss_within_budget() {
    let data = corpus(40, 46, 64, 6);
    assert_eq!(data[0].data().dim(), (64, 66));
    let sched = schedule(&data, 100);
    let arch = ArchSpec::default();
    let cfg = TrainConfig {
        n_iterations: 500,
        batch_size: 2,
        seed: 2,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train_srm(&data, &MaskSpec { circle_radius: 6.0, ..MaskSpec::default() }, &sched, arch, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "500 iterations took {secs:.0} s");
    let mut init = build_score_network(arch, Family::Srm, cfg.seed).unwrap();
    init.precond = out.params.precond;
    let subset = &data[..8];
    let before = eval_loss(&init, subset, &sched);
    let after = eval_loss(&out.params, subset, &sched);
    assert!(after < before, "loss {before} -> {after}");
}
