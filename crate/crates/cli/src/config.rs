//! Run configuration: `[section]` headers followed by `key: value` lines.
//! Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use swarm_core::masks::{MaskKind, MaskSpec};
use swarm_core::phantom::PhantomKind;
use swarm_core::recon::Mode;
use swarm_core::score::{ArchSpec, TrainConfig};
use swarm_core::sde::LangevinConfig;
use swarm_core::tomo::Filter;
use swarm_core::{Error, Result};

/// Environment variable overriding `paths.out`.
pub const ENV_OUT: &str = "SWARM_OUT";
/// Environment variable overriding `run.threads`.
pub const ENV_THREADS: &str = "SWARM_THREADS";

const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed", "threads"]),
    ("paths", &["out"]),
    ("geometry", &["image_size", "n_angles", "detector_spacing"]),
    ("phantoms", &["kind", "count", "eval_count"]),
    ("sampling", &["views"]),
    ("masks", &["kind", "sparse_counts", "circle_count", "circle_radius", "strip_divisor"]),
    ("schedule", &["sigma_min", "sigma_max", "n_steps"]),
    (
        "train",
        &[
            "base_channels",
            "levels",
            "learning_rate",
            "batch_size",
            "n_iterations",
            "ema_decay",
            "grad_clip",
        ],
    ),
    (
        "recon",
        &[
            "mode",
            "snr",
            "n_corrector_steps",
            "snapshot_every",
            "merge_every_step",
            "filter",
            "sigma_max",
            "n_steps",
            "views",
        ],
    ),
    ("evaluate", &["views", "methods", "check_monotone", "profile_row"]),
];

/// Raw `section.key -> value` map, validated against the schema.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

fn known(section: &str, key: &str) -> bool {
    SCHEMA
        .iter()
        .any(|(s, keys)| *s == section && keys.contains(&key))
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(Error::config(format!("line {}: unknown section [{name}]", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::config(format!("line {}: expected `key: value`", n + 1)))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::config(format!("line {}: key outside of any section", n + 1)))?;
            cfg.set(&format!("{sec}.{}", k.trim()), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Set `section.key`, rejecting names outside the schema.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| Error::config(format!("`{dotted}` is not of the form section.key")))?;
        if !known(section, key) {
            return Err(Error::config(format!("unknown config key `{dotted}`")));
        }
        self.values.insert(dotted.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::argument(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("invalid value `{v}` for {key}"))),
        }
    }

    fn get_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.values
            .get(key)
            .filter(|v| !v.is_empty() && v.as_str() != "auto")
            .map(|v| v.parse().map_err(|_| Error::config(format!("invalid value `{v}` for {key}"))))
            .transpose()
    }

    fn get_list<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::config(format!("invalid entry `{}` in {key}", p.trim())))
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub image_size: usize,
    pub n_angles: usize,
    pub detector_spacing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantoms {
    pub kind: PhantomKind,
    pub count: usize,
    pub eval_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub sigma_min: f64,
    /// `None` means 50 times the largest training sinogram magnitude.
    pub sigma_max: Option<f64>,
    pub n_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recon {
    pub mode: Mode,
    pub langevin: LangevinConfig,
    pub snapshot_every: usize,
    pub merge_every_step: bool,
    pub filter: Filter,
    /// Overrides of the checkpoint's schedule.
    pub sigma_max: Option<f64>,
    pub n_steps: Option<usize>,
    /// View counts to reconstruct; defaults to `sampling.views`.
    pub views: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Reference,
    Fbp,
    Recon(Mode),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Reference => "reference",
            Method::Fbp => "fbp",
            Method::Recon(m) => m.name(),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Method::Reference),
            "fbp" => Ok(Method::Fbp),
            other => other.parse().map(Method::Recon),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluate {
    pub views: Vec<usize>,
    pub methods: Vec<Method>,
    pub check_monotone: bool,
    pub profile_row: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub geometry: Geometry,
    pub phantoms: Phantoms,
    pub views: Vec<usize>,
    pub masks: MaskSpec,
    pub schedule: Schedule,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub recon: Recon,
    pub evaluate: Evaluate,
}

fn parse_mask_kind(raw: &str) -> Result<Option<MaskKind>> {
    match raw {
        "any" | "random" => Ok(None),
        other => other.parse().map(Some).map_err(|_| {
            Error::config(format!("unknown mask kind `{other}` (expected any, sparse_view, circles or strip)"))
        }),
    }
}

impl RunConfig {
    /// Typed view of `raw` with environment overrides applied; `flags`
    /// are applied last so they win over both.
    pub fn resolve(mut raw: RawConfig, env: &dyn Fn(&str) -> Option<String>, flags: &[String]) -> Result<Self> {
        if let Some(out) = env(ENV_OUT) {
            raw.set("paths.out", &out)?;
        }
        if let Some(t) = env(ENV_THREADS) {
            raw.set("run.threads", &t)?;
        }
        for f in flags {
            raw.apply_override(f)?;
        }
        let r = &raw;
        let spec_default = MaskSpec::default();
        let train_default = TrainConfig::default();
        let arch_default = ArchSpec::default();
        let views = r.get_list("sampling.views", vec![30])?;
        let seed = r.get("run.seed", 0u64)?;
        let grad_clip: f64 = r.get("train.grad_clip", train_default.grad_clip.unwrap_or(0.0))?;
        let cfg = RunConfig {
            seed,
            threads: r.get("run.threads", 1usize)?,
            out: PathBuf::from(r.get("paths.out", "swarm-out".to_string())?),
            geometry: Geometry {
                image_size: r.get("geometry.image_size", 64)?,
                n_angles: r.get("geometry.n_angles", 90)?,
                detector_spacing: r.get("geometry.detector_spacing", 1.0)?,
            },
            phantoms: Phantoms {
                kind: r.get("phantoms.kind", "random_ellipses".to_string())?.parse()?,
                count: r.get("phantoms.count", 40)?,
                eval_count: r.get("phantoms.eval_count", 8)?,
            },
            masks: MaskSpec {
                kind: parse_mask_kind(&r.get("masks.kind", "any".to_string())?)?,
                sparse_counts: r.get_list("masks.sparse_counts", spec_default.sparse_counts.clone())?,
                circle_count: r.get("masks.circle_count", spec_default.circle_count)?,
                circle_radius: r.get("masks.circle_radius", spec_default.circle_radius)?,
                strip_divisor: r.get("masks.strip_divisor", spec_default.strip_divisor)?,
            },
            schedule: Schedule {
                sigma_min: r.get("schedule.sigma_min", 0.01)?,
                sigma_max: r.get_opt("schedule.sigma_max")?,
                n_steps: r.get("schedule.n_steps", 200)?,
            },
            arch: ArchSpec {
                base_channels: r.get("train.base_channels", arch_default.base_channels)?,
                levels: r.get("train.levels", arch_default.levels)?,
            },
            train: TrainConfig {
                learning_rate: r.get("train.learning_rate", train_default.learning_rate)?,
                batch_size: r.get("train.batch_size", train_default.batch_size)?,
                n_iterations: r.get("train.n_iterations", train_default.n_iterations)?,
                seed,
                ema_decay: r.get("train.ema_decay", train_default.ema_decay)?,
                grad_clip: (grad_clip > 0.0).then_some(grad_clip),
            },
            recon: Recon {
                mode: r.get("recon.mode", "swarm".to_string())?.parse()?,
                langevin: LangevinConfig {
                    snr: r.get("recon.snr", LangevinConfig::default().snr)?,
                    n_corrector_steps: r.get("recon.n_corrector_steps", LangevinConfig::default().n_corrector_steps)?,
                },
                snapshot_every: r.get("recon.snapshot_every", 0)?,
                merge_every_step: r.get("recon.merge_every_step", true)?,
                filter: r.get("recon.filter", "ram-lak".to_string())?.parse()?,
                sigma_max: r.get_opt("recon.sigma_max")?,
                n_steps: r.get_opt("recon.n_steps")?,
                views: r.get_list("recon.views", views.clone())?,
            },
            evaluate: Evaluate {
                views: r.get_list("evaluate.views", views.clone())?,
                methods: r.get_list("evaluate.methods", vec![Method::Fbp, Method::Recon(Mode::Swarm)])?,
                check_monotone: r.get("evaluate.check_monotone", false)?,
                profile_row: r.get_opt("evaluate.profile_row")?,
            },
            views,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.image_size < 16 || g.n_angles == 0 || !(g.detector_spacing > 0.0) {
            return Err(Error::config("geometry needs image_size >= 16, n_angles >= 1, detector_spacing > 0"));
        }
        for v in self.views.iter().chain(&self.recon.views).chain(&self.evaluate.views) {
            if *v == 0 || *v > g.n_angles {
                return Err(Error::config(format!("view count {v} outside 1..={}", g.n_angles)));
            }
        }
        if self.threads == 0 {
            return Err(Error::config("run.threads must be at least 1"));
        }
        if self.schedule.n_steps < 2 || self.recon.n_steps.is_some_and(|n| n < 2) {
            return Err(Error::config("schedules need at least 2 steps"));
        }
        self.train.validate()?;
        self.arch.validate()?;
        self.recon.langevin.validate()?;
        Ok(())
    }
}
