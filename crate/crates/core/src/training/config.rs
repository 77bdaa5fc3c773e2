//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Every key is optional; unknown or repeated keys are errors.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::adam::AdamConfig;
use crate::backbone::BackboneConfig;
use crate::cascade::{CascadeMode, DistillMode, LossConfig};
use crate::error::{Error, Result};
use crate::shapegen::{DatasetConfig, Setting, ShapeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Recon,
    TeacherA,
    TeacherB,
    Student,
    Baseline,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Recon, Phase::TeacherA, Phase::TeacherB, Phase::Student, Phase::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Recon => "recon",
            Phase::TeacherA => "teacher-a",
            Phase::TeacherB => "teacher-b",
            Phase::Student => "student",
            Phase::Baseline => "baseline",
        }
    }

    /// Desk-scale epoch count.
    pub fn default_epochs(self) -> usize {
        match self {
            Phase::TeacherB => 120,
            _ => 60,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase `{s}` (expected recon, teacher-a, teacher-b, student or baseline)")))
    }
}

/// Optimization and bookkeeping options.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub phase: Option<Phase>,
    /// `None` selects the phase default.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub master_seed: u64,
    /// Test evaluation period in epochs; 0 evaluates after the last epoch only.
    pub eval_every: usize,
    /// Resume snapshot period in epochs; 0 disables snapshots.
    pub checkpoint_every: usize,
    /// Upsampling factor of the reconstruction network (2 for progressive runs).
    pub recon_factor: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            phase: None,
            epochs: None,
            batch_size: 8,
            adam: AdamConfig::default(),
            master_seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            recon_factor: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub train: TrainOptions,
    pub loss: LossConfig,
}

/// `(key, description)` for every accepted key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("count", "number of generated shapes [200]"),
    ("categories", "comma-separated shape kinds: sphere,cuboid,cylinder,torus,plane-union,composite [all]"),
    ("n", "partial input size N; ground truth has 4N points [256]"),
    ("data_seed", "dataset master seed [0]"),
    ("setting", "crop setting: simple, moderate or teacherB-random [simple]"),
    ("n_c", "proxy tokens per cloud [32]"),
    ("k", "neighbors per proxy group [8]"),
    ("channels", "feature width C [64]"),
    ("enc_layers", "encoder blocks [3]"),
    ("dec_layers", "decoder blocks [3]"),
    ("heads", "attention heads, must divide channels [4]"),
    ("n_q", "decoder queries [32]"),
    ("phase", "recon, teacher-a, teacher-b, student or baseline [from --phase]"),
    ("epochs", "training epochs [recon 60, teacher-a 60, teacher-b 120, student 60, baseline 60]"),
    ("batch_size", "samples per optimizer step [8]"),
    ("lr", "Adam learning rate [0.001]"),
    ("beta1", "Adam first-moment decay [0.9]"),
    ("beta2", "Adam second-moment decay [0.999]"),
    ("eps", "Adam epsilon [1e-8]"),
    ("master_seed", "seed for initialization and shuffling [0]"),
    ("eval_every", "test evaluation period in epochs, 0 = last epoch only [0]"),
    ("checkpoint_every", "resume snapshot period in epochs, 0 = none [0]"),
    ("recon_factor", "upsampling factor of the reconstruction network, 2 or 4 [4]"),
    ("lambda1", "weight of the auxiliary-feature distillation term [1]"),
    ("lambda2", "weight of the encoder-feature distillation term [1]"),
    ("tau", "distillation temperature [1]"),
    ("distill", "distillation loss: kl or mse [kl]"),
    ("cascade", "student pipeline: auxiliary, progressive or none [auxiliary]"),
];

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
}

impl RunConfig {
    pub fn epochs_for(&self, phase: Phase) -> usize {
        self.train.epochs.unwrap_or(phase.default_epochs())
    }

    /// Backbone shape with the dataset's `N`.
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig { n_in: self.dataset.n, ..self.backbone }
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "count" => self.dataset.count = num(key, v)?,
            "categories" => {
                self.dataset.categories = v
                    .split(',')
                    .map(|s| s.trim().parse::<ShapeKind>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "n" => {
                self.dataset.n = num(key, v)?;
                self.backbone.n_in = self.dataset.n;
            }
            "data_seed" => self.dataset.seed = num(key, v)?,
            "setting" => self.dataset.setting = v.parse::<Setting>().map_err(|e| e.to_string())?,
            "n_c" => self.backbone.n_c = num(key, v)?,
            "k" => self.backbone.k = num(key, v)?,
            "channels" => self.backbone.c = num(key, v)?,
            "enc_layers" => self.backbone.enc_layers = num(key, v)?,
            "dec_layers" => self.backbone.dec_layers = num(key, v)?,
            "heads" => self.backbone.heads = num(key, v)?,
            "n_q" => self.backbone.n_q = num(key, v)?,
            "phase" => self.train.phase = Some(v.parse::<Phase>().map_err(|e| e.to_string())?),
            "epochs" => self.train.epochs = Some(num(key, v)?),
            "batch_size" => self.train.batch_size = num(key, v)?,
            "lr" => self.train.adam.lr = num(key, v)?,
            "beta1" => self.train.adam.beta1 = num(key, v)?,
            "beta2" => self.train.adam.beta2 = num(key, v)?,
            "eps" => self.train.adam.eps = num(key, v)?,
            "master_seed" => self.train.master_seed = num(key, v)?,
            "eval_every" => self.train.eval_every = num(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "recon_factor" => self.train.recon_factor = num(key, v)?,
            "lambda1" => self.loss.lambda1 = num(key, v)?,
            "lambda2" => self.loss.lambda2 = num(key, v)?,
            "tau" => self.loss.tau = num(key, v)?,
            "distill" => self.loss.distill = v.parse::<DistillMode>().map_err(|e| e.to_string())?,
            "cascade" => self.loss.cascade = v.parse::<CascadeMode>().map_err(|e| e.to_string())?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |m: String| Error::Config(format!("{origin}:{}: {m}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key=value, found `{line}`")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(at(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            cfg.set(key, value).map_err(at)?;
        }
        cfg.validate().map_err(|e| match e {
            Error::Config(m) | Error::Contract(m) => Error::Config(format!("{origin}: {m}")),
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dataset.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.dataset.categories.is_empty() {
            return bad("categories must not be empty".into());
        }
        if self.train.epochs == Some(0) {
            return bad("epochs must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let a = &self.train.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", a.lr));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("beta1, beta2 must lie in [0, 1) and eps must be positive".into());
        }
        if !matches!(self.train.recon_factor, 2 | 4) {
            return bad(format!("recon_factor must be 2 or 4, got {}", self.train.recon_factor));
        }
        self.loss.validate()?;
        self.backbone().validate().map_err(|e| Error::Config(e.to_string().trim_start_matches("contract violation: ").to_string()))
    }

    /// Canonical text form; parsing it yields `self`.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let b = &self.backbone;
        let t = &self.train;
        let l = &self.loss;
        let cats: Vec<&str> = d.categories.iter().map(|c| c.name()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("count", d.count.to_string());
        kv("categories", cats.join(","));
        kv("n", d.n.to_string());
        kv("data_seed", d.seed.to_string());
        kv("setting", d.setting.to_string());
        kv("n_c", b.n_c.to_string());
        kv("k", b.k.to_string());
        kv("channels", b.c.to_string());
        kv("enc_layers", b.enc_layers.to_string());
        kv("dec_layers", b.dec_layers.to_string());
        kv("heads", b.heads.to_string());
        kv("n_q", b.n_q.to_string());
        if let Some(p) = t.phase {
            kv("phase", p.to_string());
        }
        if let Some(e) = t.epochs {
            kv("epochs", e.to_string());
        }
        kv("batch_size", t.batch_size.to_string());
        kv("lr", format!("{:e}", t.adam.lr));
        kv("beta1", format!("{:e}", t.adam.beta1));
        kv("beta2", format!("{:e}", t.adam.beta2));
        kv("eps", format!("{:e}", t.adam.eps));
        kv("master_seed", t.master_seed.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("recon_factor", t.recon_factor.to_string());
        kv("lambda1", format!("{:e}", l.lambda1));
        kv("lambda2", format!("{:e}", l.lambda2));
        kv("tau", format!("{:e}", l.tau));
        kv("distill", l.distill.to_string());
        kv("cascade", l.cascade.to_string());
        s
    }
}
