//! Two-stage sinogram diffusion reconstruction and its ablations.
//!
//! Stage one runs predictor and corrector steps of the sinogram score model
//! on the full sinogram. Stage two runs the high-frequency score model on
//! each wavelet detail band of the stage-one estimate. Every update is
//! followed by hard data consistency on the measured rows. The low band of
//! stage one and the refined detail bands are merged by the inverse
//! wavelet transform and reconstructed with FBP.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::{self, NoiseSource};
use crate::score::{Family, ScoreFunction, ScoreModelParams};
use crate::sde::{correct, dc_rows, kept_row_residual, predictor_step, LangevinConfig, NoiseSchedule};
use crate::tomo::{fbp, Filter, Image, SamplingOperator, Sinogram};
use crate::wavelet::{band_shape_for, dwt2_matrix, idwt2_matrix, HighFrequencySet, WaveletBands};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Swarm,
    SrmOnly,
    ShdOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Swarm, Mode::SrmOnly, Mode::ShdOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Swarm => "swarm",
            Mode::SrmOnly => "srm_only",
            Mode::ShdOnly => "shd_only",
        }
    }

    fn uses_srm(self) -> bool {
        matches!(self, Mode::Swarm | Mode::SrmOnly)
    }

    fn uses_shd(self) -> bool {
        matches!(self, Mode::Swarm | Mode::ShdOnly)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}` (expected swarm, srm_only or shd_only)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub schedule: NoiseSchedule,
    pub langevin: LangevinConfig,
    pub sampling: SamplingOperator,
    pub image_size: usize,
    pub seed: u64,
    /// Keep a copy of the sinogram estimate every this many iterations
    /// (0 disables snapshots).
    pub snapshot_every: usize,
    pub mode: Mode,
    /// Merge the refined detail bands back into the sinogram estimate after
    /// every iteration instead of once at the end.
    pub merge_every_step: bool,
    pub filter: Filter,
}

impl ReconConfig {
    pub fn new(schedule: NoiseSchedule, sampling: SamplingOperator, image_size: usize) -> Self {
        ReconConfig {
            schedule,
            langevin: LangevinConfig::default(),
            sampling,
            image_size,
            seed: 0,
            snapshot_every: 0,
            mode: Mode::Swarm,
            merge_every_step: true,
            filter: Filter::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    SinoPred,
    SinoCorr,
    HfPred(usize),
    HfCorr(usize),
    Merge,
}

impl Stage {
    pub fn is_sinogram(self) -> bool {
        matches!(self, Stage::SinoPred | Stage::SinoCorr)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::SinoPred => f.write_str("sino_pred"),
            Stage::SinoCorr => f.write_str("sino_corr"),
            Stage::HfPred(i) => write!(f, "hf_pred_{}", i + 1),
            Stage::HfCorr(i) => write!(f, "hf_corr_{}", i + 1),
            Stage::Merge => f.write_str("merge"),
        }
    }
}

/// One data-consistency application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub stage: Stage,
    /// Largest kept-row deviation from the measurement before DC.
    pub residual_before: f64,
    /// The same after DC; zero by construction.
    pub residual_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconTrace {
    pub records: Vec<TraceRecord>,
    /// `(t, sinogram estimate)` pairs at the snapshot cadence.
    pub snapshots: Vec<(usize, Array2<f64>)>,
}

impl ReconTrace {
    /// One line per record: `t stage residual_before residual_after`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# t stage residual_before residual_after\n");
        for r in &self.records {
            out.push_str(&format!(
                "{} {} {:e} {:e}\n",
                r.t, r.stage, r.residual_before, r.residual_after
            ));
        }
        out
    }

    pub fn all_consistent(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.residual_after == 0.0 && r.residual_before.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct ReconOutput {
    pub image: Image,
    pub sinogram: Sinogram,
    pub trace: ReconTrace,
}

/// The score models a reconstruction may use.
#[derive(Clone, Copy, Default)]
pub struct Models<'a> {
    pub srm: Option<&'a dyn ScoreFunction>,
    pub shd: Option<&'a dyn ScoreFunction>,
}

/// Check trained checkpoints against the sinogram they will be applied to.
pub fn check_checkpoints(
    sino_shape: (usize, usize),
    srm: Option<&ScoreModelParams>,
    shd: Option<&ScoreModelParams>,
) -> Result<()> {
    let check = |p: &ScoreModelParams, family: Family, shape: (usize, usize)| -> Result<()> {
        p.validate()?;
        if p.family != family {
            return Err(Error::config(format!("expected a {family} checkpoint, got {}", p.family)));
        }
        if p.meta.input_shape != (0, 0) && p.meta.input_shape != shape {
            return Err(Error::config(format!(
                "{family} checkpoint was trained on {:?} inputs, reconstruction needs {:?}",
                p.meta.input_shape, shape
            )));
        }
        Ok(())
    };
    if let Some(p) = srm {
        check(p, Family::Srm, sino_shape)?;
    }
    if let Some(p) = shd {
        check(p, Family::Shd, band_shape_for(sino_shape))?;
    }
    Ok(())
}

fn check_finite(x: &Array2<f64>, t: usize, stage: Stage) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite state after {stage} at t = {t}")))
    }
}

fn validate(y_sparse: &Sinogram, cfg: &ReconConfig, models: &Models<'_>) -> Result<()> {
    let (rows, _) = y_sparse.data().dim();
    if cfg.sampling.full_angles() != rows {
        return Err(Error::config(format!(
            "sampling operator covers {} angles, measurement has {rows} rows",
            cfg.sampling.full_angles()
        )));
    }
    for r in 0..rows {
        if !cfg.sampling.is_kept(r) && y_sparse.data().row(r).iter().any(|&v| v != 0.0) {
            return Err(Error::argument(format!("measurement row {r} is not sampled but non-zero")));
        }
    }
    if y_sparse.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("measurement contains non-finite values"));
    }
    cfg.langevin.validate()?;
    if cfg.image_size == 0 {
        return Err(Error::config("image_size must be positive"));
    }
    if cfg.mode.uses_srm() && models.srm.is_none() {
        return Err(Error::config(format!("mode {} needs an SRM model", cfg.mode.name())));
    }
    if cfg.mode.uses_shd() && models.shd.is_none() {
        return Err(Error::config(format!("mode {} needs an SHD model", cfg.mode.name())));
    }
    Ok(())
}

/// Synthesize from the low band of `ll_source` and the detail bands `hf`.
pub fn merge_bands(ll_source: &WaveletBands, hf: &HighFrequencySet) -> Result<Array2<f64>> {
    idwt2_matrix(&ll_source.with_high_frequency(hf)?)
}

struct Runner<'a> {
    cfg: &'a ReconConfig,
    y: ArrayView2<'a, f64>,
    trace: ReconTrace,
}

impl Runner<'_> {
    fn noise(&self, t: usize, tag: u64, band: u64) -> NoiseSource {
        NoiseSource::Seeded(rng::derive(self.cfg.seed, &[tag, t as u64, band]))
    }

    /// DC on a full sinogram, recording the residuals.
    fn dc(&mut self, x: &mut Array2<f64>, t: usize, stage: Stage) -> Result<()> {
        check_finite(x, t, stage)?;
        let before = kept_row_residual(x.view(), self.y, &self.cfg.sampling);
        dc_rows(x, self.y, &self.cfg.sampling);
        let after = kept_row_residual(x.view(), self.y, &self.cfg.sampling);
        self.trace.records.push(TraceRecord {
            t,
            stage,
            residual_before: before,
            residual_after: after,
        });
        Ok(())
    }

    /// DC for one detail band: synthesize with the stage-one low band and
    /// the other bands held fixed, replace measured rows, re-analyse.
    fn dc_band(
        &mut self,
        stage_one: &WaveletBands,
        others: &HighFrequencySet,
        band: usize,
        value: Array2<f64>,
        t: usize,
        stage: Stage,
    ) -> Result<Array2<f64>> {
        let mut hf = others.clone();
        *hf.band_mut(band) = value;
        let mut composed = merge_bands(stage_one, &hf)?;
        self.dc(&mut composed, t, stage)?;
        let bands = dwt2_matrix(composed.view())?;
        Ok(bands.high_frequency().band(band).clone())
    }

    fn sinogram_stage(&mut self, x: Array2<f64>, t: usize, srm: &dyn ScoreFunction) -> Result<Array2<f64>> {
        let sched = &self.cfg.schedule;
        let mut x = predictor_step(x.view(), t, srm, sched, self.noise(t, rng::tag::PREDICTOR, 0))?;
        self.dc(&mut x, t, Stage::SinoPred)?;
        let mut x = correct(x.view(), t - 1, srm, sched, &self.cfg.langevin, self.noise(t, rng::tag::CORRECTOR, 0))?;
        self.dc(&mut x, t, Stage::SinoCorr)?;
        Ok(x)
    }

    fn hf_stage(
        &mut self,
        stage_one: &WaveletBands,
        hf_in: &HighFrequencySet,
        t: usize,
        shd: &dyn ScoreFunction,
    ) -> Result<HighFrequencySet> {
        let sched = &self.cfg.schedule;
        let mut out = hf_in.clone();
        for i in 0..3 {
            let band = i as u64 + 1;
            let h = predictor_step(hf_in.band(i).view(), t, shd, sched, self.noise(t, rng::tag::PREDICTOR, band))?;
            let h = self.dc_band(stage_one, hf_in, i, h, t, Stage::HfPred(i))?;
            let h = correct(h.view(), t - 1, shd, sched, &self.cfg.langevin, self.noise(t, rng::tag::CORRECTOR, band))?;
            *out.band_mut(i) = self.dc_band(stage_one, hf_in, i, h, t, Stage::HfCorr(i))?;
        }
        Ok(out)
    }
}

/// Run the configured reconstruction. `y_sparse` is the full-view-shaped
/// measurement with unmeasured rows set to zero.
pub fn reconstruct(y_sparse: &Sinogram, cfg: &ReconConfig, models: Models<'_>) -> Result<ReconOutput> {
    validate(y_sparse, cfg, &models)?;
    let shape = y_sparse.data().dim();
    let top = cfg.schedule.n_steps() - 1;
    let sigma_max = cfg.schedule.sigma_max();
    let mut runner = Runner {
        cfg,
        y: y_sparse.data().view(),
        trace: ReconTrace::default(),
    };
    let init = |band: u64, dims: (usize, usize)| {
        rng::normal_matrix(&mut rng::stream(cfg.seed, &[rng::tag::INIT, band]), dims.0, dims.1) * sigma_max
    };
    let mut ys = init(0, shape);
    if !cfg.mode.uses_srm() {
        dc_rows(&mut ys, runner.y, &cfg.sampling);
    }
    let band_dims = band_shape_for(shape);
    let mut hf = HighFrequencySet::from_bands([init(1, band_dims), init(2, band_dims), init(3, band_dims)]);
    let mut merged_once = false;

    for t in (1..=top).rev() {
        if let Some(srm) = models.srm.filter(|_| cfg.mode.uses_srm()) {
            ys = runner.sinogram_stage(ys, t, srm)?;
        }
        if let Some(shd) = models.shd.filter(|_| cfg.mode.uses_shd()) {
            let stage_one = dwt2_matrix(ys.view())?;
            let hf_in = if t == top { hf.clone() } else { stage_one.high_frequency() };
            hf = runner.hf_stage(&stage_one, &hf_in, t, shd)?;
            if cfg.merge_every_step {
                ys = merge_bands(&stage_one, &hf)?;
                runner.dc(&mut ys, t, Stage::Merge)?;
                merged_once = true;
            }
        }
        if cfg.snapshot_every > 0 && (top - t) % cfg.snapshot_every == 0 {
            runner.trace.snapshots.push((t, ys.clone()));
        }
    }
    if cfg.mode.uses_shd() && !merged_once {
        let stage_one = dwt2_matrix(ys.view())?;
        ys = merge_bands(&stage_one, &hf)?;
        runner.dc(&mut ys, 0, Stage::Merge)?;
    }
    let sinogram = y_sparse.with_data(ys)?;
    let image = fbp(&sinogram, cfg.image_size, cfg.filter)?;
    Ok(ReconOutput {
        image,
        sinogram,
        trace: runner.trace,
    })
}

pub fn swarm_reconstruct(y_sparse: &Sinogram, cfg: &ReconConfig, models: Models<'_>) -> Result<ReconOutput> {
    reconstruct(y_sparse, &ReconConfig { mode: Mode::Swarm, ..cfg.clone() }, models)
}

pub fn srm_only_reconstruct(y_sparse: &Sinogram, cfg: &ReconConfig, models: Models<'_>) -> Result<ReconOutput> {
    reconstruct(y_sparse, &ReconConfig { mode: Mode::SrmOnly, ..cfg.clone() }, models)
}

pub fn shd_only_reconstruct(y_sparse: &Sinogram, cfg: &ReconConfig, models: Models<'_>) -> Result<ReconOutput> {
    reconstruct(y_sparse, &ReconConfig { mode: Mode::ShdOnly, ..cfg.clone() }, models)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;
    use crate::score::AnalyticGaussianScore;
    use crate::tomo::{forward_project, Geometry};
    use crate::wavelet::extract_hf_matrix;
    use std::collections::HashSet;

    struct Setup {
        y_full: Sinogram,
        srm: AnalyticGaussianScore,
        shd: AnalyticGaussianScore,
    }

    fn setup() -> Setup {
        let img = phantom::shepp_logan(24);
        let geo = Geometry::for_image(24, 12).unwrap();
        let y_full = forward_project(&img, &geo).unwrap();
        let mean = y_full.data().mean().unwrap();
        let shape = y_full.data().dim();
        let srm = AnalyticGaussianScore::new(Array2::from_elem(shape, mean), 4.0).unwrap();
        let shd = AnalyticGaussianScore::new(Array2::zeros(band_shape_for(shape)), 0.5).unwrap();
        Setup { y_full, srm, shd }
    }

    fn cfg(op: SamplingOperator) -> ReconConfig {
        ReconConfig {
            seed: 5,
            ..ReconConfig::new(NoiseSchedule::geometric(0.01, 30.0, 8).unwrap(), op, 24)
        }
    }

    fn models(s: &Setup) -> Models<'_> {
        Models {
            srm: Some(&s.srm),
            shd: Some(&s.shd),
        }
    }

    #[test]
    fn full_view_is_a_fixed_point() {
        let s = setup();
        let op = SamplingOperator::full(12).unwrap();
        let reference = fbp(&s.y_full, 24, Filter::RamLak).unwrap();
        for mode in Mode::ALL {
            for every in [false, true] {
                let c = ReconConfig {
                    mode,
                    merge_every_step: every,
                    ..cfg(op.clone())
                };
                let out = reconstruct(&s.y_full, &c, models(&s)).unwrap();
                assert_eq!(out.sinogram.data(), s.y_full.data(), "{mode:?}");
                let diff = (out.image.data() - reference.data()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(diff <= 1e-6);
            }
        }
    }

    #[test]
    fn trace_invariants_and_mode_partition() {
        let s = setup();
        let op = SamplingOperator::uniform(12, 4).unwrap();
        let y = op.mask_rows(&s.y_full).unwrap();
        let stages = |mode| -> HashSet<Stage> {
            let out = reconstruct(&y, &ReconConfig { mode, ..cfg(op.clone()) }, models(&s)).unwrap();
            assert!(out.trace.all_consistent());
            for &k in op.kept() {
                assert_eq!(out.sinogram.data().row(k), y.data().row(k));
            }
            out.trace.records.iter().map(|r| r.stage).collect()
        };
        let swarm = stages(Mode::Swarm);
        let srm = stages(Mode::SrmOnly);
        let shd = stages(Mode::ShdOnly);
        assert!(srm.iter().all(|st| st.is_sinogram()));
        assert!(shd.iter().all(|st| !st.is_sinogram()));
        assert!(srm.is_disjoint(&shd));
        assert_eq!(srm.union(&shd).cloned().collect::<HashSet<_>>(), swarm);
        assert_eq!(swarm.len(), 2 + 6 + 1);
    }

    #[test]
    fn deterministic() {
        let s = setup();
        let op = SamplingOperator::uniform(12, 3).unwrap();
        let y = op.mask_rows(&s.y_full).unwrap();
        let c = ReconConfig {
            snapshot_every: 2,
            ..cfg(op)
        };
        let a = reconstruct(&y, &c, models(&s)).unwrap();
        let b = reconstruct(&y, &c, models(&s)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.sinogram, b.sinogram);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.snapshots.len(), 4);
        let other = reconstruct(&y, &ReconConfig { seed: 6, ..c }, models(&s)).unwrap();
        assert_ne!(other.sinogram, a.sinogram);
    }

    #[test]
    fn merge_keeps_the_low_band() {
        let s = setup();
        let stage_one = dwt2_matrix(s.y_full.data().view()).unwrap();
        let other = extract_hf_matrix((s.y_full.data() * 0.3).view()).unwrap();
        let merged = merge_bands(&stage_one, &other).unwrap();
        let back = dwt2_matrix(merged.view()).unwrap();
        let err = (&back.ll - &stage_one.ll).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-10);
    }

    #[test]
    fn config_errors() {
        let s = setup();
        let op = SamplingOperator::uniform(12, 4).unwrap();
        let y = op.mask_rows(&s.y_full).unwrap();
        let only_srm = Models {
            srm: Some(&s.srm),
            shd: None,
        };
        assert!(reconstruct(&y, &cfg(op.clone()), only_srm).is_err());
        assert!(srm_only_reconstruct(&y, &cfg(op.clone()), only_srm).is_ok());
        // Unmeasured rows must be empty.
        assert!(reconstruct(&s.y_full, &cfg(op.clone()), models(&s)).is_err());
        let wrong = SamplingOperator::uniform(10, 2).unwrap();
        assert!(reconstruct(&y, &cfg(wrong), models(&s)).is_err());
        assert!("nope".parse::<Mode>().is_err());
        assert_eq!("shd_only".parse::<Mode>().unwrap(), Mode::ShdOnly);
    }

    #[test]
    fn checkpoint_shape_checks() {
        use crate::score::{build_score_network, ArchSpec};
        let arch = ArchSpec {
            base_channels: 2,
            levels: 2,
        };
        let mut srm = build_score_network(arch, Family::Srm, 0).unwrap();
        let mut shd = build_score_network(arch, Family::Shd, 0).unwrap();
        srm.meta.input_shape = (12, 36);
        shd.meta.input_shape = (6, 18);
        assert!(check_checkpoints((12, 36), Some(&srm), Some(&shd)).is_ok());
        assert!(check_checkpoints((14, 36), Some(&srm), None).is_err());
        assert!(check_checkpoints((12, 36), Some(&shd), None).is_err());
        shd.meta.input_shape = (7, 18);
        assert!(check_checkpoints((12, 36), None, Some(&shd)).is_err());
    }
}
