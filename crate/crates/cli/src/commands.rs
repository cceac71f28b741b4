//! The five subcommands. Every file is written atomically and every
//! random draw is derived from the root seed in the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use swarm_core::io::{self, Header};
use swarm_core::masks::generate_mask;
use swarm_core::metrics::{self, profile_line, Line};
use swarm_core::phantom::{make_phantoms, PhantomSpec};
use swarm_core::recon::{check_checkpoints, reconstruct, Mode, Models, ReconConfig};
use swarm_core::rng;
use swarm_core::score::{load_checkpoint, save_checkpoint, train_shd, train_srm, Family, ScoreModelParams};
use swarm_core::sde::NoiseSchedule;
use swarm_core::tomo::{fbp, forward_project, Geometry, Image, SamplingOperator, Sinogram};
use swarm_core::{Error, Result};

use crate::config::{Method, RunConfig};
use crate::suites::{Suite, SuiteReport};

const SPLIT_TRAIN: u64 = 1;
const SPLIT_EVAL: u64 = 2;

pub fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("corpus")
}

pub fn manifest_path(cfg: &RunConfig) -> PathBuf {
    corpus_dir(cfg).join("manifest.txt")
}

pub fn checkpoint_path(cfg: &RunConfig, family: Family) -> PathBuf {
    cfg.out.join("models").join(format!("{}.ckpt", family.name()))
}

pub fn train_log_path(cfg: &RunConfig, family: Family) -> PathBuf {
    cfg.out.join("models").join(format!("{}_log.txt", family.name()))
}

pub fn recon_dir(cfg: &RunConfig, mode: Mode, views: usize) -> PathBuf {
    cfg.out.join("recon").join(mode.name()).join(format!("v{views}"))
}

pub fn recon_image_path(cfg: &RunConfig, mode: Mode, views: usize, index: usize) -> PathBuf {
    recon_dir(cfg, mode, views).join(format!("{index:04}_image.raw"))
}

pub fn eval_table_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("eval").join("table.csv")
}

/// One line of a manifest: `split index kind path seed`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    pub index: usize,
    pub kind: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!("{} {} {} {} {}", self.split, self.index, self.kind, self.path, self.seed)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::config(format!("malformed manifest line `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(ManifestEntry {
            split: f[0].to_string(),
            index: f[1].parse().map_err(|_| bad())?,
            kind: f[2].to_string(),
            path: f[3].to_string(),
            seed: f[4].parse().map_err(|_| bad())?,
        })
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text: String = entries.iter().map(|e| e.to_line() + "\n").collect();
    io::write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(ManifestEntry::parse).collect()
}

/// Ordered map over `items`, split across `threads` scoped workers.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

pub fn full_geometry(cfg: &RunConfig) -> Result<Geometry> {
    let g = &cfg.geometry;
    Geometry::for_image_with_spacing(g.image_size, g.n_angles, g.detector_spacing)
}

fn split_name(split: u64) -> &'static str {
    if split == SPLIT_TRAIN {
        "train"
    } else {
        "eval"
    }
}

/// Phantoms, full-view sinograms, sparse-view sinograms for every
/// configured view count, and one training mask per item.
pub fn simulate(cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
    let geo = full_geometry(cfg)?;
    let dir = corpus_dir(cfg);
    let mut entries = Vec::new();
    for (split, count) in [(SPLIT_TRAIN, cfg.phantoms.count), (SPLIT_EVAL, cfg.phantoms.eval_count)] {
        let spec = PhantomSpec {
            kind: cfg.phantoms.kind,
            size: cfg.geometry.image_size,
            seed: rng::derive(cfg.seed, &[rng::tag::PHANTOM, split]),
            count,
        };
        let phantoms = make_phantoms(&spec)?;
        let name = split_name(split);
        let items: Vec<(usize, &Image)> = phantoms.iter().enumerate().collect();
        let per_item = par_map(&items, cfg.threads, |&(i, img)| {
            let mut out = Vec::new();
            let phantom_seed = rng::derive(spec.seed, &[rng::tag::PHANTOM, i as u64]);
            let mut push = |kind: String, seed: u64| {
                let rel = format!("{name}/{i:04}_{kind}.raw");
                out.push(ManifestEntry {
                    split: name.to_string(),
                    index: i,
                    kind,
                    path: rel.clone(),
                    seed,
                });
                dir.join(rel)
            };
            io::write_image(&push("phantom".into(), phantom_seed), img)?;
            let full = forward_project(img, &geo)?;
            io::write_sinogram(&push("full".into(), phantom_seed), &full, &Header::new())?;
            for &v in &cfg.views {
                let op = SamplingOperator::uniform(geo.n_angles(), v)?;
                let mut h = Header::new();
                h.set("kept", io::format_kept(op.kept()));
                io::write_sinogram(&push(format!("sparse{v}"), phantom_seed), &op.mask_rows(&full)?, &h)?;
            }
            let mask_seed = rng::derive(cfg.seed, &[rng::tag::MASK, split, i as u64]);
            let mask = generate_mask(&cfg.masks, full.data().dim(), mask_seed)?;
            io::write_mask(&push("mask".into(), mask_seed), &mask)?;
            Ok(out)
        })?;
        entries.extend(per_item.into_iter().flatten());
    }
    write_manifest(&manifest_path(cfg), &entries)?;
    Ok(entries)
}

fn corpus_files(cfg: &RunConfig, split: &str, kind: &str) -> Result<Vec<(usize, PathBuf)>> {
    let dir = corpus_dir(cfg);
    let mut files: Vec<_> = read_manifest(&manifest_path(cfg))?
        .into_iter()
        .filter(|e| e.split == split && e.kind == kind)
        .map(|e| (e.index, dir.join(e.path)))
        .collect();
    files.sort();
    Ok(files)
}

fn load_sinograms(files: &[(usize, PathBuf)]) -> Result<Vec<Sinogram>> {
    files.iter().map(|(_, p)| io::read_sinogram(p).map(|(s, _)| s)).collect()
}

/// Noise schedule for training, from the config or the data magnitude.
pub fn training_schedule(cfg: &RunConfig, data: &[Sinogram]) -> Result<NoiseSchedule> {
    let sigma_max = match cfg.schedule.sigma_max {
        Some(s) => s,
        None => {
            let max_abs = data
                .iter()
                .flat_map(|s| s.data().iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            50.0 * max_abs
        }
    };
    NoiseSchedule::geometric(cfg.schedule.sigma_min, sigma_max, cfg.schedule.n_steps)
}

pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss: f64,
}

/// Train one model family on the training split and write its checkpoint
/// and per-iteration metrics log.
pub fn train(cfg: &RunConfig, family: Family) -> Result<TrainReport> {
    let files = corpus_files(cfg, "train", "full")?;
    if files.is_empty() {
        return Err(Error::config(format!(
            "no training sinograms listed in {}",
            manifest_path(cfg).display()
        )));
    }
    let data = load_sinograms(&files)?;
    let sched = training_schedule(cfg, &data)?;
    let outcome = match family {
        Family::Srm => train_srm(&data, &cfg.masks, &sched, cfg.arch, &cfg.train)?,
        Family::Shd => train_shd(&data, &sched, cfg.arch, &cfg.train)?,
    };
    let checkpoint = checkpoint_path(cfg, family);
    let log = train_log_path(cfg, family);
    save_checkpoint(&outcome.params, &checkpoint)?;
    let text: String = outcome.log.iter().map(|e| e.to_line() + "\n").collect();
    io::write_atomic(&log, text.as_bytes())?;
    Ok(TrainReport {
        checkpoint,
        log,
        final_loss: outcome.params.meta.final_loss,
    })
}

fn load_model(cfg: &RunConfig, family: Family) -> Result<ScoreModelParams> {
    load_checkpoint(&checkpoint_path(cfg, family))
}

/// Reconstruction schedule: the checkpoint's, with config overrides.
pub fn recon_schedule(cfg: &RunConfig, model: &ScoreModelParams) -> Result<NoiseSchedule> {
    let m = &model.meta;
    NoiseSchedule::geometric(
        m.sigma_min,
        cfg.recon.sigma_max.unwrap_or(m.sigma_max),
        cfg.recon.n_steps.unwrap_or(m.n_steps),
    )
}

/// Reconstruct one sparse sinogram and write image, sinogram, trace and
/// a graymap of the image under `dir` with the given stem.
pub fn reconstruct_file(
    cfg: &RunConfig,
    mode: Mode,
    input: &Path,
    dir: &Path,
    stem: &str,
    seed: u64,
    srm: Option<&ScoreModelParams>,
    shd: Option<&ScoreModelParams>,
) -> Result<Vec<PathBuf>> {
    let (y, h) = io::read_sinogram(input)?;
    let rows = y.data().nrows();
    let kept = io::kept_rows(&h)?.unwrap_or_else(|| (0..rows).collect());
    let sampling = SamplingOperator::new(rows, kept)?;
    check_checkpoints(y.data().dim(), srm, shd)?;
    let any = srm
        .or(shd)
        .ok_or_else(|| Error::config("reconstruction needs at least one checkpoint"))?;
    let mut rc = ReconConfig::new(recon_schedule(cfg, any)?, sampling, cfg.geometry.image_size);
    rc.langevin = cfg.recon.langevin;
    rc.seed = seed;
    rc.snapshot_every = cfg.recon.snapshot_every;
    rc.mode = mode;
    rc.merge_every_step = cfg.recon.merge_every_step;
    rc.filter = cfg.recon.filter;
    let models = Models {
        srm: srm.map(|m| m as _),
        shd: shd.map(|m| m as _),
    };
    let out = reconstruct(&y, &rc, models)?;
    if !out.trace.all_consistent() {
        return Err(Error::numeric(format!("{}: data consistency violated in trace", input.display())));
    }
    let image = dir.join(format!("{stem}_image.raw"));
    let sino = dir.join(format!("{stem}_sinogram.raw"));
    let trace = dir.join(format!("{stem}_trace.txt"));
    let pgm = dir.join(format!("{stem}_image.pgm"));
    io::write_image(&image, &out.image)?;
    io::write_sinogram(&sino, &out.sinogram, &h)?;
    io::write_atomic(&trace, out.trace.to_text().as_bytes())?;
    io::write_pgm16_auto(&pgm, out.image.data().view())?;
    Ok(vec![image, sino, trace, pgm])
}

/// Reconstruct every held-out sparse sinogram for each configured view
/// count. Returns the manifest path.
pub fn reconstruct_corpus(cfg: &RunConfig, mode: Mode) -> Result<PathBuf> {
    let srm = if mode != Mode::ShdOnly { Some(load_model(cfg, Family::Srm)?) } else { None };
    let shd = if mode != Mode::SrmOnly { Some(load_model(cfg, Family::Shd)?) } else { None };
    let base = cfg.out.join("recon").join(mode.name());
    let mut entries = Vec::new();
    for &v in &cfg.recon.views {
        let files = corpus_files(cfg, "eval", &format!("sparse{v}"))?;
        if files.is_empty() {
            return Err(Error::config(format!("no held-out sparse{v} sinograms in the corpus manifest")));
        }
        let dir = recon_dir(cfg, mode, v);
        let written = par_map(&files, cfg.threads, |(i, path)| {
            let seed = rng::derive(cfg.seed, &[rng::tag::INIT, v as u64, *i as u64]);
            let paths = reconstruct_file(cfg, mode, path, &dir, &format!("{i:04}"), seed, srm.as_ref(), shd.as_ref())?;
            Ok((*i, seed, paths))
        })?;
        for (i, seed, paths) in written {
            for p in paths {
                let rel = p.strip_prefix(&base).unwrap_or(&p).to_string_lossy().into_owned();
                let kind = p
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.split_once('_'))
                    .map_or("file", |(_, k)| k)
                    .to_string();
                entries.push(ManifestEntry {
                    split: format!("v{v}"),
                    index: i,
                    kind,
                    path: rel,
                    seed,
                });
            }
        }
    }
    let manifest = base.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub views: usize,
    pub method: Method,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<TableRow>,
    /// `(views, method, index)` with no reconstruction on disk.
    pub missing: Vec<(usize, Method, usize)>,
    /// Methods whose mean PSNR drops as the view count grows.
    pub violations: Vec<String>,
    pub table: PathBuf,
}

impl EvalReport {
    pub fn ok(&self) -> bool {
        self.missing.is_empty() && self.violations.is_empty()
    }
}

fn data_range(img: &Image) -> f64 {
    let d = img.data();
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    (hi - lo).max(f64::MIN_POSITIVE)
}

fn method_image(cfg: &RunConfig, method: Method, views: usize, index: usize, reference: &Image, sparse: &Path) -> Result<Option<Image>> {
    match method {
        Method::Reference => Ok(Some(reference.clone())),
        Method::Fbp => {
            if !sparse.exists() {
                return Ok(None);
            }
            let (y, h) = io::read_sinogram(sparse)?;
            let rows = y.data().nrows();
            let kept = io::kept_rows(&h)?.unwrap_or_else(|| (0..rows).collect());
            let op = SamplingOperator::new(rows, kept)?;
            let compact = op.subsample(&y)?;
            Ok(Some(fbp(&compact, cfg.geometry.image_size, cfg.recon.filter)?))
        }
        Method::Recon(mode) => {
            let p = recon_image_path(cfg, mode, views, index);
            if p.exists() {
                io::read_image(&p).map(Some)
            } else {
                Ok(None)
            }
        }
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Views-by-methods table of mean PSNR, SSIM and MSE (x1e-3) over the
/// held-out phantoms, plus optional profile-line CSVs.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let refs = corpus_files(cfg, "eval", "phantom")?;
    if refs.is_empty() {
        return Err(Error::config("no held-out phantoms in the corpus manifest"));
    }
    let references: Vec<(usize, Image)> = refs
        .iter()
        .map(|(i, p)| io::read_image(p).map(|img| (*i, img)))
        .collect::<Result<_>>()?;
    let dir = corpus_dir(cfg);
    let mut report = EvalReport {
        table: eval_table_path(cfg),
        ..Default::default()
    };
    let mut views = cfg.evaluate.views.clone();
    views.sort_unstable();
    views.dedup();
    for &v in &views {
        let mut profiles: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        for &method in &cfg.evaluate.methods {
            let (mut psnr, mut ssim, mut mse, mut n) = (0.0, 0.0, 0.0, 0usize);
            for (i, reference) in &references {
                let sparse = dir.join("eval").join(format!("{i:04}_sparse{v}.raw"));
                let Some(img) = method_image(cfg, method, v, *i, reference, &sparse)? else {
                    report.missing.push((v, method, *i));
                    continue;
                };
                let m = metrics::evaluate(&img, reference, data_range(reference))?;
                psnr += m.psnr;
                ssim += m.ssim;
                mse += m.mse;
                n += 1;
                if let (Some(row), true) = (cfg.evaluate.profile_row, profiles.len() < cfg.evaluate.methods.len()) {
                    if !profiles.contains_key(method.name()) {
                        profiles.insert(method.name(), profile_line(&img, Line::Row(row))?.to_vec());
                    }
                }
            }
            if n > 0 {
                let k = n as f64;
                report.rows.push(TableRow {
                    views: v,
                    method,
                    psnr: psnr / k,
                    ssim: ssim / k,
                    mse: mse / k,
                    count: n,
                });
            }
        }
        if let Some(row) = cfg.evaluate.profile_row {
            write_profile(&cfg.out.join("eval").join(format!("profile_v{v}_row{row}.csv")), &profiles)?;
        }
    }
    if cfg.evaluate.check_monotone {
        for &method in &cfg.evaluate.methods {
            let series: Vec<&TableRow> = report.rows.iter().filter(|r| r.method == method).collect();
            for w in series.windows(2) {
                if w[1].psnr < w[0].psnr {
                    report.violations.push(format!(
                        "{}: psnr {:.3} at {} views < {:.3} at {} views",
                        method.name(),
                        w[1].psnr,
                        w[1].views,
                        w[0].psnr,
                        w[0].views
                    ));
                }
            }
        }
    }
    let mut csv = String::from("views,method,psnr,ssim,mse_e3,count\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.views,
            r.method.name(),
            fmt_metric(r.psnr),
            fmt_metric(r.ssim),
            fmt_metric(r.mse * 1e3),
            r.count
        );
    }
    io::write_atomic(&report.table, csv.as_bytes())?;
    Ok(report)
}

fn write_profile(path: &Path, profiles: &BTreeMap<&'static str, Vec<f64>>) -> Result<()> {
    let names: Vec<&str> = profiles.keys().copied().collect();
    let len = profiles.values().map(Vec::len).max().unwrap_or(0);
    let mut csv = format!("x,{}\n", names.join(","));
    for x in 0..len {
        let vals: Vec<String> = names.iter().map(|n| format!("{:.6}", profiles[n][x])).collect();
        let _ = writeln!(csv, "{x},{}", vals.join(","));
    }
    io::write_atomic(path, csv.as_bytes())
}

pub fn check(suites: &[Suite], seed: u64) -> Result<Vec<SuiteReport>> {
    suites.iter().map(|s| s.run(seed)).collect()
}
