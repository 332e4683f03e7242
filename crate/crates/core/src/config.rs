//! Run configuration: every tunable across the crate in one flat
//! `section.key = value` text format that round-trips losslessly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rdp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Embedding {
    Gaussian,
    OneHot,
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Both,
    Cnn,
    Trans,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder channels per pyramid level; the first level keeps full
    /// resolution and each later level halves it.
    pub channels: Vec<usize>,
    pub decoder_channels: usize,
    pub hrffm: bool,
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdpConfig {
    pub embedding: Embedding,
    /// Gaussian embedding channel count.
    pub channels: usize,
    pub sigma: f64,
    pub codebook_seed: u64,
    /// Capacity of the one-hot and learnable embeddings.
    pub max_instances: usize,
}

impl RdpConfig {
    /// Channel count of the field fed to the pyramid extractor.
    pub fn field_channels(&self) -> usize {
        match self.embedding {
            Embedding::Gaussian | Embedding::Learnable => self.channels,
            Embedding::OneHot => self.max_instances,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HrffmConfig {
    pub softmax_rdp: bool,
    pub residual: bool,
    pub branch: Branch,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub radius: usize,
    /// Initial softmax temperature on correlation scores.
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub flow_weight: f64,
    pub charbonnier_eps: f64,
    pub log_every: usize,
    pub augment: bool,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub seed: u64,
    pub samples: usize,
    pub size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Fraction of scenes rendered as a single global translation.
    pub translation_fraction: f64,
    pub split: f64,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub rdp: RdpConfig,
    pub hrffm: HrffmConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                channels: vec![16, 32, 64],
                decoder_channels: 16,
                hrffm: true,
            },
            rdp: RdpConfig {
                embedding: Embedding::Gaussian,
                channels: rdp::DEFAULT_CHANNELS,
                sigma: rdp::DEFAULT_SIGMA,
                codebook_seed: rdp::DEFAULT_CODEBOOK_SEED,
                max_instances: 8,
            },
            hrffm: HrffmConfig {
                softmax_rdp: true,
                residual: true,
                branch: Branch::Both,
                window: 8,
            },
            flow: FlowConfig {
                radius: 3,
                temperature: 20.0,
            },
            train: TrainConfig {
                seed: 1,
                iterations: 2000,
                batch: 4,
                lr: 1e-3,
                momentum: 0.9,
                flow_weight: 0.1,
                charbonnier_eps: 1e-3,
                log_every: 100,
                augment: true,
                t: 0.5,
            },
            data: DataConfig {
                root: PathBuf::from("data"),
                seed: 1,
                samples: 250,
                size: 64,
                min_instances: 2,
                max_instances: 5,
                min_speed: 1.0,
                max_speed: 6.0,
                translation_fraction: 0.0,
                split: 0.8,
                split_seed: 7,
            },
            eval: EvalConfig { seed: 11 },
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Keys whose values define the network architecture; a checkpoint only
/// loads under a config that agrees on all of them.
pub fn is_architectural(key: &str) -> bool {
    ["model.", "rdp.", "hrffm.", "flow."]
        .iter()
        .any(|p| key.starts_with(p))
}

fn on_off(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on|off, got {v:?}")),
    }
}

fn fmt_on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

impl Embedding {
    pub fn as_str(self) -> &'static str {
        match self {
            Embedding::Gaussian => "gaussian",
            Embedding::OneHot => "onehot",
            Embedding::Learnable => "learnable",
        }
    }
}

impl FromStr for Embedding {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Embedding::Gaussian),
            "onehot" => Ok(Embedding::OneHot),
            "learnable" => Ok(Embedding::Learnable),
            _ => Err(format!("expected gaussian|onehot|learnable, got {s:?}")),
        }
    }
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Both => "both",
            Branch::Cnn => "cnn",
            Branch::Trans => "trans",
        }
    }
}

impl FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "both" => Ok(Branch::Both),
            "cnn" => Ok(Branch::Cnn),
            "trans" => Ok(Branch::Trans),
            _ => Err(format!("expected both|cnn|trans, got {s:?}")),
        }
    }
}

impl RunConfig {
    /// All keys with their current values, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let r = &self.rdp;
        let h = &self.hrffm;
        let t = &self.train;
        let d = &self.data;
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("model.channels", list(&m.channels)),
            ("model.decoder_channels", m.decoder_channels.to_string()),
            ("model.hrffm", fmt_on_off(m.hrffm).into()),
            ("rdp.embedding", r.embedding.as_str().into()),
            ("rdp.channels", r.channels.to_string()),
            ("rdp.sigma", r.sigma.to_string()),
            ("rdp.codebook_seed", r.codebook_seed.to_string()),
            ("rdp.max_instances", r.max_instances.to_string()),
            ("hrffm.softmax_rdp", fmt_on_off(h.softmax_rdp).into()),
            ("hrffm.residual", fmt_on_off(h.residual).into()),
            ("hrffm.branch", h.branch.as_str().into()),
            ("hrffm.window", h.window.to_string()),
            ("flow.radius", self.flow.radius.to_string()),
            ("flow.temperature", self.flow.temperature.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.flow_weight", t.flow_weight.to_string()),
            ("train.charbonnier_eps", t.charbonnier_eps.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.augment", fmt_on_off(t.augment).into()),
            ("train.t", t.t.to_string()),
            ("data.root", d.root.display().to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.samples", d.samples.to_string()),
            ("data.size", d.size.to_string()),
            ("data.min_instances", d.min_instances.to_string()),
            ("data.max_instances", d.max_instances.to_string()),
            ("data.min_speed", d.min_speed.to_string()),
            ("data.max_speed", d.max_speed.to_string()),
            ("data.translation_fraction", d.translation_fraction.to_string()),
            ("data.split", d.split.to_string()),
            ("data.split_seed", d.split_seed.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("out.dir", self.out.display().to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let r: std::result::Result<(), String> = (|| {
            match key {
                "model.channels" => {
                    self.model.channels = v.split(',').map(|c| num(c.trim())).collect::<std::result::Result<_, _>>()?
                }
                "model.decoder_channels" => self.model.decoder_channels = num(v)?,
                "model.hrffm" => self.model.hrffm = on_off(v)?,
                "rdp.embedding" => self.rdp.embedding = v.parse()?,
                "rdp.channels" => self.rdp.channels = num(v)?,
                "rdp.sigma" => self.rdp.sigma = num(v)?,
                "rdp.codebook_seed" => self.rdp.codebook_seed = num(v)?,
                "rdp.max_instances" => self.rdp.max_instances = num(v)?,
                "hrffm.softmax_rdp" => self.hrffm.softmax_rdp = on_off(v)?,
                "hrffm.residual" => self.hrffm.residual = on_off(v)?,
                "hrffm.branch" => self.hrffm.branch = v.parse()?,
                "hrffm.window" => self.hrffm.window = num(v)?,
                "flow.radius" => self.flow.radius = num(v)?,
                "flow.temperature" => self.flow.temperature = num(v)?,
                "train.seed" => self.train.seed = num(v)?,
                "train.iterations" => self.train.iterations = num(v)?,
                "train.batch" => self.train.batch = num(v)?,
                "train.lr" => self.train.lr = num(v)?,
                "train.momentum" => self.train.momentum = num(v)?,
                "train.flow_weight" => self.train.flow_weight = num(v)?,
                "train.charbonnier_eps" => self.train.charbonnier_eps = num(v)?,
                "train.log_every" => self.train.log_every = num(v)?,
                "train.augment" => self.train.augment = on_off(v)?,
                "train.t" => self.train.t = num(v)?,
                "data.root" => self.data.root = PathBuf::from(v),
                "data.seed" => self.data.seed = num(v)?,
                "data.samples" => self.data.samples = num(v)?,
                "data.size" => self.data.size = num(v)?,
                "data.min_instances" => self.data.min_instances = num(v)?,
                "data.max_instances" => self.data.max_instances = num(v)?,
                "data.min_speed" => self.data.min_speed = num(v)?,
                "data.max_speed" => self.data.max_speed = num(v)?,
                "data.translation_fraction" => self.data.translation_fraction = num(v)?,
                "data.split" => self.data.split = num(v)?,
                "data.split_seed" => self.data.split_seed = num(v)?,
                "eval.seed" => self.eval.seed = num(v)?,
                "out.dir" => self.out = PathBuf::from(v),
                _ => return Err("unknown key".to_string()),
            }
            Ok(())
        })();
        r.map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Architectural keys whose values differ, as `(key, ours, theirs)`.
    pub fn architecture_diff(&self, other: &RunConfig) -> Vec<(String, String, String)> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|((k, a), (_, b))| is_architectural(k) && a != b)
            .map(|((k, a), (_, b))| (k.to_string(), a, b))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.channels.is_empty() || self.model.channels.contains(&0) {
            return bad("model.channels must list positive widths".into());
        }
        if self.model.channels.iter().any(|&c| c < 4) {
            return bad("model.channels must be at least 4 per level".into());
        }
        if self.model.decoder_channels == 0 {
            return bad("model.decoder_channels must be positive".into());
        }
        if self.rdp.channels == 0 || self.rdp.max_instances == 0 {
            return bad("rdp.channels and rdp.max_instances must be positive".into());
        }
        if !(self.rdp.sigma >= 0.0) {
            return bad("rdp.sigma must be >= 0".into());
        }
        if self.hrffm.window == 0 {
            return bad("hrffm.window must be positive".into());
        }
        if !(self.flow.temperature > 0.0) {
            return bad("flow.temperature must be positive".into());
        }
        let t = &self.train;
        if t.batch == 0 || t.log_every == 0 {
            return bad("train.batch and train.log_every must be positive".into());
        }
        if !(t.t > 0.0 && t.t < 1.0) {
            return bad(format!("train.t must lie in (0, 1), got {}", t.t));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return bad("train.lr must be positive and train.momentum in [0, 1)".into());
        }
        let d = &self.data;
        if d.min_instances > d.max_instances || d.min_speed > d.max_speed || d.min_speed < 0.0 {
            return bad("data ranges must satisfy min <= max".into());
        }
        if !(d.split > 0.0 && d.split < 1.0) {
            return bad("data.split must lie in (0, 1)".into());
        }
        let step = 1usize << (self.model.levels() - 1);
        if d.size % step != 0 {
            return bad(format!("data.size must be divisible by {step}"));
        }
        Ok(())
    }
}
