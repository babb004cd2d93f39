use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{io_err, Result, SeldError};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::ssm::InputRule;

/// Prefix of environment variables that override config keys:
/// `SELD_OPTIM__LR=1e-3` sets `optim.lr`.
pub const ENV_PREFIX: &str = "SELD_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StagePlan {
    Unified,
    TwoStage,
}

impl FromStr for StagePlan {
    type Err = SeldError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(Self::Unified),
            "two-stage" => Ok(Self::TwoStage),
            _ => Err(SeldError::Config(format!("unknown stage plan {s:?} (expected unified or two-stage)"))),
        }
    }
}

impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unified => "unified",
            Self::TwoStage => "two-stage",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Step schedule: the learning rate halves once `halve_at` epochs are done.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    /// Epochs per stage.
    pub epochs: usize,
    pub halve_at: usize,
}

impl ScheduleConfig {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        if epoch >= self.halve_at {
            base * 0.5
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset manifest; synthetic scenes are generated when absent.
    pub manifest: Option<PathBuf>,
    /// Optional held-out manifest scored after every epoch.
    pub val_manifest: Option<PathBuf>,
    pub segments: usize,
    pub segment_seconds: f64,
    pub seed: u64,
    pub n_events: usize,
    pub snr_db: (f64, f64),
    pub event_seconds: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            val_manifest: None,
            segments: 200,
            segment_seconds: 5.0,
            seed: 0,
            n_events: 3,
            snr_db: (10.0, 30.0),
            event_seconds: (0.5, 2.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub stage_plan: StagePlan,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Continue from `out_dir/checkpoint.pack` when it exists.
    pub resume: bool,
    /// Stop after this many epochs in one invocation (0: run to the end).
    pub stop_after: usize,
    pub data: DataConfig,
    pub sed_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("full").expect("built-in preset")
    }
}

impl RunConfig {
    /// `full`: the full-size network and schedule. `desk`: a narrow network on
    /// short synthetic segments with the schedule scaled to 30 epochs.
    pub fn preset(name: &str) -> Result<Self> {
        let full = Self {
            preset: "full".into(),
            model: ModelConfig::default(),
            features: FeatureConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig { epochs: 80, halve_at: 65 },
            stage_plan: StagePlan::Unified,
            batch_size: 8,
            seed: 0,
            out_dir: PathBuf::from("runs/full"),
            resume: false,
            stop_after: 0,
            data: DataConfig::default(),
            sed_threshold: 0.5,
        };
        match name {
            "full" => Ok(full),
            "desk" => Ok(Self {
                preset: "desk".into(),
                model: ModelConfig {
                    conv_channels: [8, 16, 32, 32],
                    embed_dim: 32,
                    state_dim: 8,
                    mamba_skip_d: true,
                    mamba_residual: true,
                    ..ModelConfig::default()
                },
                features: FeatureConfig {
                    n_mels: 64,
                    ..FeatureConfig::default()
                },
                optim: OptimConfig {
                    lr: 3e-3,
                    ..OptimConfig::default()
                },
                schedule: ScheduleConfig { epochs: 30, halve_at: 24 },
                out_dir: PathBuf::from("runs/desk"),
                data: DataConfig {
                    segment_seconds: 2.0,
                    n_events: 2,
                    event_seconds: (0.5, 1.5),
                    ..DataConfig::default()
                },
                ..full
            }),
            other => Err(SeldError::Config(format!("unknown preset {other:?} (expected full or desk)"))),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` line,
    /// wherever it appears, selects the base before other keys apply.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SeldError::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let base = pairs
            .iter()
            .rev()
            .find(|(_, k, _)| k == "preset")
            .map_or("full", |(_, _, v)| v.as_str());
        let mut cfg = Self::preset(base)?;
        for (line, k, v) in &pairs {
            cfg.set(k, v)
                .map_err(|e| SeldError::Config(format!("line {line}: {}", strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading config {}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// Applies `SELD_SECTION__KEY=value` overrides.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (k, v) in vars {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase().replace("__", ".");
                self.set(&key, &v)
                    .map_err(|e| SeldError::Config(format!("environment {k}: {}", strip(e))))?;
            }
        }
        self.validate()
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "preset" => self.preset = v.to_string(),
            "model.n_classes" => m.n_classes = num(key, v)?,
            "model.conv_channels" => {
                let c: Vec<usize> = list(key, v)?;
                m.conv_channels = c
                    .try_into()
                    .map_err(|_| SeldError::Config(format!("{key}: expected four widths, got {v:?}")))?;
            }
            "model.embed_dim" => m.embed_dim = num(key, v)?,
            "model.state_dim" => m.state_dim = num(key, v)?,
            "model.bmamba_per_branch" => m.bmamba_per_branch = num(key, v)?,
            "model.sde_use_ivs" => {
                m.sde_use_ivs = num(key, v)?;
                self.features.sde_use_ivs = m.sde_use_ivs;
            }
            "model.conv_bias" => m.conv_bias = num(key, v)?,
            "model.bn_eps" => m.bn_eps = num(key, v)?,
            "model.bn_momentum" => m.bn_momentum = num(key, v)?,
            "model.input_rule" => {
                m.input_rule = match v {
                    "euler" => InputRule::Euler,
                    "zoh" => InputRule::Zoh,
                    _ => return Err(SeldError::Config(format!("{key}: expected euler or zoh, got {v:?}"))),
                }
            }
            "model.stitch_init" => m.stitch_init = pair(key, v)?,
            "model.mamba_skip_d" => m.mamba_skip_d = num(key, v)?,
            "model.mamba_residual" => m.mamba_residual = num(key, v)?,
            "features.sample_rate" => self.features.sample_rate = num(key, v)?,
            "features.n_fft" => self.features.n_fft = num(key, v)?,
            "features.hop" => self.features.hop = num(key, v)?,
            "features.n_mels" => self.features.n_mels = num(key, v)?,
            "features.fmin" => self.features.fmin = num(key, v)?,
            "features.fmax" => self.features.fmax = num(key, v)?,
            "optim.lr" => self.optim.lr = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "schedule.epochs" => self.schedule.epochs = num(key, v)?,
            "schedule.halve_at" => self.schedule.halve_at = num(key, v)?,
            "train.stage_plan" => self.stage_plan = v.parse()?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.seed" => self.seed = num(key, v)?,
            "train.out_dir" => self.out_dir = PathBuf::from(v),
            "train.resume" => self.resume = num(key, v)?,
            "train.stop_after" => self.stop_after = num(key, v)?,
            "data.manifest" => self.data.manifest = opt_path(v),
            "data.val_manifest" => self.data.val_manifest = opt_path(v),
            "data.segments" => self.data.segments = num(key, v)?,
            "data.segment_seconds" => self.data.segment_seconds = num(key, v)?,
            "data.seed" => self.data.seed = num(key, v)?,
            "data.n_events" => self.data.n_events = num(key, v)?,
            "data.snr_db" => self.data.snr_db = pair(key, v)?,
            "data.event_seconds" => self.data.event_seconds = pair(key, v)?,
            "eval.sed_threshold" => self.sed_threshold = num(key, v)?,
            _ => return Err(SeldError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let f = &self.features;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let join = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("preset", self.preset.clone()),
            ("model.n_classes", m.n_classes.to_string()),
            ("model.conv_channels", join(&m.conv_channels)),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.state_dim", m.state_dim.to_string()),
            ("model.bmamba_per_branch", m.bmamba_per_branch.to_string()),
            ("model.sde_use_ivs", m.sde_use_ivs.to_string()),
            ("model.conv_bias", m.conv_bias.to_string()),
            ("model.bn_eps", format!("{:?}", m.bn_eps)),
            ("model.bn_momentum", format!("{:?}", m.bn_momentum)),
            (
                "model.input_rule",
                match m.input_rule {
                    InputRule::Euler => "euler",
                    InputRule::Zoh => "zoh",
                }
                .into(),
            ),
            ("model.stitch_init", format!("{:?},{:?}", m.stitch_init.0, m.stitch_init.1)),
            ("model.mamba_skip_d", m.mamba_skip_d.to_string()),
            ("model.mamba_residual", m.mamba_residual.to_string()),
            ("features.sample_rate", f.sample_rate.to_string()),
            ("features.n_fft", f.n_fft.to_string()),
            ("features.hop", f.hop.to_string()),
            ("features.n_mels", f.n_mels.to_string()),
            ("features.fmin", format!("{:?}", f.fmin)),
            ("features.fmax", format!("{:?}", f.fmax)),
            ("optim.lr", format!("{:?}", self.optim.lr)),
            ("optim.beta1", format!("{:?}", self.optim.beta1)),
            ("optim.beta2", format!("{:?}", self.optim.beta2)),
            ("optim.eps", format!("{:?}", self.optim.eps)),
            ("optim.weight_decay", format!("{:?}", self.optim.weight_decay)),
            ("schedule.epochs", self.schedule.epochs.to_string()),
            ("schedule.halve_at", self.schedule.halve_at.to_string()),
            ("train.stage_plan", self.stage_plan.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.out_dir", self.out_dir.display().to_string()),
            ("train.resume", self.resume.to_string()),
            ("train.stop_after", self.stop_after.to_string()),
            ("data.manifest", path(&self.data.manifest)),
            ("data.val_manifest", path(&self.data.val_manifest)),
            ("data.segments", self.data.segments.to_string()),
            ("data.segment_seconds", format!("{:?}", self.data.segment_seconds)),
            ("data.seed", self.data.seed.to_string()),
            ("data.n_events", self.data.n_events.to_string()),
            ("data.snr_db", format!("{:?},{:?}", self.data.snr_db.0, self.data.snr_db.1)),
            (
                "data.event_seconds",
                format!("{:?},{:?}", self.data.event_seconds.0, self.data.event_seconds.1),
            ),
            ("eval.sed_threshold", format!("{:?}", self.sed_threshold)),
        ]
    }

    /// Snapshot text that [`RunConfig::parse`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Keys that fix the network and its inputs; a checkpoint only resumes
    /// under a config that agrees on all of them.
    pub fn architecture(&self) -> Vec<(&'static str, String)> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("model.") || k.starts_with("features.") || *k == "train.stage_plan")
            .collect()
    }

    /// Label frames per segment, which must equal the decoder's frame count.
    pub fn target_frames(&self) -> usize {
        (self.data.segment_seconds * 10.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SeldError::Config(msg));
        self.model.validate().map_err(|e| SeldError::Config(strip(e)))?;
        if self.features.sde_use_ivs != self.model.sde_use_ivs {
            return fail("features and model disagree on sde_use_ivs".into());
        }
        if self.batch_size == 0 || self.schedule.epochs == 0 {
            return fail("batch size and epochs must be positive".into());
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return fail(format!("invalid optimizer settings {:?}", self.optim));
        }
        if !(self.sed_threshold > 0.0 && self.sed_threshold < 1.0) {
            return fail(format!("SED threshold must lie in (0, 1), got {}", self.sed_threshold));
        }
        let secs = self.data.segment_seconds;
        let samples = secs * self.features.sample_rate as f64;
        let frames = (samples / self.features.hop as f64).floor() as usize;
        if !(secs > 0.0) || (secs * 10.0 - self.target_frames() as f64).abs() > 1e-9 || frames != 8 * self.target_frames() {
            return fail(format!(
                "a {secs} s segment gives {frames} feature frames; it must be a multiple of 0.1 s giving 8 feature frames per label frame"
            ));
        }
        if self.data.manifest.is_none() && self.data.segments == 0 {
            return fail("synthetic data needs at least one segment".into());
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn strip(e: SeldError) -> String {
    match e {
        SeldError::Config(m) | SeldError::Invalid(m) => m,
        other => other.to_string(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| SeldError::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(SeldError::Config(format!("{key}: expected two comma-separated numbers, got {v:?}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}
