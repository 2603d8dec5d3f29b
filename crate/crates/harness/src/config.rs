//! Run configuration: flat `key = value` text with dotted keys.
//!
//! Resolution order, later wins: built-in defaults, `model.preset`, the
//! config file, `--set` overrides, then the dedicated flags (`--seed`,
//! `--workers`). Unknown keys are rejected with their line number.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lcm_core::checks::Fault;
use lcm_core::geometry::{Ordering, ShapeKind};
use lcm_core::mpm::{ModelConfig, TrainConfig};
use lcm_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got '{other}'"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Tiny,
    LcmPaper,
    TransformerPaper,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::LcmPaper => ModelConfig::lcm_paper(),
            Preset::TransformerPaper => ModelConfig::transformer_paper(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            "lcm-paper" => Ok(Preset::LcmPaper),
            "transformer-paper" => Ok(Preset::TransformerPaper),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (desk, tiny, lcm-paper, transformer-paper)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Tiny => "tiny",
            Preset::LcmPaper => "lcm-paper",
            Preset::TransformerPaper => "transformer-paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kinds: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub points: usize,
    pub patches: usize,
    pub noise: f64,
    pub dump_xyz: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kinds: ShapeKind::ALL.to_vec(),
            train_per_class: 250,
            val_per_class: 50,
            points: 1024,
            patches: 64,
            noise: 0.01,
            dump_xyz: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSection {
    pub train: TrainConfig,
    pub unmask_ratio: f64,
    /// Stop after this many epochs without changing the schedule (0: run all).
    pub stop_after: usize,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            train: TrainConfig::pretrain(),
            unmask_ratio: 0.4,
            stop_after: 0,
            checkpoint_every: 10,
            resume: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Pretrained when a checkpoint is given, scratch otherwise.
    Auto,
    Pretrained,
    Scratch,
    /// Paired pretrained and scratch runs per seed.
    Both,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(InitMode::Auto),
            "pretrained" => Ok(InitMode::Pretrained),
            "scratch" => Ok(InitMode::Scratch),
            "both" => Ok(InitMode::Both),
            other => Err(Error::Config(format!("unknown finetune.init '{other}'"))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Auto => "auto",
            InitMode::Pretrained => "pretrained",
            InitMode::Scratch => "scratch",
            InitMode::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSection {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub label_fraction: f64,
    pub checkpoint: Option<PathBuf>,
    pub init: InitMode,
    pub frozen_encoder: bool,
    pub augment: bool,
    pub eval_every: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 10,
                warmup_epochs: 1,
                ..TrainConfig::finetune()
            },
            seeds: vec![0],
            label_fraction: 1.0,
            checkpoint: None,
            init: InitMode::Auto,
            frozen_encoder: false,
            augment: true,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSection {
    pub points: usize,
    pub patches: usize,
    pub k_group: usize,
    pub sweep: Vec<usize>,
    pub latency: bool,
    pub latency_preset: Preset,
    pub latency_runs: usize,
    pub latency_warmup: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            points: 2048,
            patches: 128,
            k_group: 32,
            sweep: vec![64, 128, 256, 512, 1024],
            latency: true,
            latency_preset: Preset::Desk,
            latency_runs: 20,
            latency_warmup: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropcheckSection {
    pub trials: usize,
    pub fault: Option<Fault>,
    /// Name prefixes to run; empty runs everything.
    pub only: Vec<String>,
}

impl Default for PropcheckSection {
    fn default() -> Self {
        Self {
            trials: 200,
            fault: None,
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudySection {
    pub orderings: Vec<Ordering>,
    pub ffn_kinds: Vec<String>,
    pub seeds: Vec<u64>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub combined: String,
    pub timing_runs: usize,
    pub timing_warmup: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            orderings: vec![Ordering::X, Ordering::Y, Ordering::Z, Ordering::Hilbert],
            ffn_kinds: vec!["ffn".into(), "lcffn".into()],
            seeds: vec![0, 1, 2],
            train_per_class: 32,
            val_per_class: 8,
            epochs: 8,
            warmup_epochs: 1,
            combined: "HXYZ".into(),
            timing_runs: 20,
            timing_warmup: 3,
        }
    }
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 picks `LCM_NUM_WORKERS`, then the number of available cores.
    pub workers: usize,
    pub precision: Precision,
    pub preset: Preset,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub benchmark: BenchmarkSection,
    pub propcheck: PropcheckSection,
    pub study: StudySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            precision: Precision::F32,
            preset: Preset::Desk,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            benchmark: BenchmarkSection::default(),
            propcheck: PropcheckSection::default(),
            study: StudySection::default(),
        }
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Parses config text into assignments; `source` names it in errors.
pub fn parse_text(text: &str, source: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = format!("{source}:{}", i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}: expected 'key = value', got '{line}'")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("{origin}: empty key")));
        }
        out.push(Assignment {
            key: key.to_string(),
            value: v.trim().to_string(),
            origin,
        });
    }
    Ok(out)
}

/// Parses a `--set key=value` override.
pub fn parse_override(s: &str) -> Result<Assignment> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))?;
    Ok(Assignment {
        key: k.trim().to_string(),
        value: v.trim().to_string(),
        origin: format!("--set {s}"),
    })
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn kinds(key: &str, v: &str) -> Result<Vec<ShapeKind>> {
    if v == "all" {
        return Ok(ShapeKind::ALL.to_vec());
    }
    v.split(',')
        .map(str::trim)
        .map(|name| {
            ShapeKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| Error::Config(format!("{key}: unknown shape '{name}'")))
        })
        .collect()
}

fn set_train(t: &mut TrainConfig, key: &str, field: &str, v: &str) -> Result<bool> {
    match field {
        "lr" => t.lr = num(key, v)?,
        "min_lr" => t.min_lr = num(key, v)?,
        "beta1" => t.beta1 = num(key, v)?,
        "beta2" => t.beta2 = num(key, v)?,
        "eps" => t.eps = num(key, v)?,
        "weight_decay" => t.weight_decay = num(key, v)?,
        "warmup_epochs" => t.warmup_epochs = num(key, v)?,
        "epochs" => t.epochs = num(key, v)?,
        "batch_size" => t.batch_size = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_text(prefix: &str, t: &TrainConfig) -> String {
    format!(
        "{prefix}.epochs = {}\n{prefix}.batch_size = {}\n{prefix}.lr = {}\n{prefix}.min_lr = {}\n\
         {prefix}.warmup_epochs = {}\n{prefix}.weight_decay = {}\n{prefix}.beta1 = {}\n\
         {prefix}.beta2 = {}\n{prefix}.eps = {}\n",
        t.epochs, t.batch_size, t.lr, t.min_lr, t.warmup_epochs, t.weight_decay, t.beta1, t.beta2, t.eps
    )
}

fn join<V: fmt::Display>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one assignment. Errors name the key and its origin.
    pub fn set(&mut self, a: &Assignment) -> Result<()> {
        self.set_key(&a.key, &a.value).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", a.origin)),
            other => other,
        })
    }

    fn set_key(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || Err(Error::Config(format!("unknown key '{key}'")));
        let (section, field) = key.split_once('.').unwrap_or((key, ""));
        match (section, field) {
            ("seed", "") => self.seed = num(key, v)?,
            ("workers", "") => self.workers = num(key, v)?,
            ("precision", "") => self.precision = v.parse()?,
            ("model", "preset") => {
                self.preset = v.parse()?;
                self.model = self.preset.model();
            }
            ("model", f) => self.model.set(f, v).map_err(|_| Error::Config(format!("unknown key or bad value: {key} = {v}")))?,
            ("data", "kinds") => self.data.kinds = kinds(key, v)?,
            ("data", "train_per_class") => self.data.train_per_class = num(key, v)?,
            ("data", "val_per_class") => self.data.val_per_class = num(key, v)?,
            ("data", "points") => self.data.points = num(key, v)?,
            ("data", "patches") => self.data.patches = num(key, v)?,
            ("data", "noise") => self.data.noise = num(key, v)?,
            ("data", "dump_xyz") => self.data.dump_xyz = flag(key, v)?,
            ("pretrain", "unmask_ratio") => self.pretrain.unmask_ratio = num(key, v)?,
            ("pretrain", "stop_after") => self.pretrain.stop_after = num(key, v)?,
            ("pretrain", "checkpoint_every") => self.pretrain.checkpoint_every = num(key, v)?,
            ("pretrain", "resume") => self.pretrain.resume = path(v),
            ("pretrain", f) => {
                if !set_train(&mut self.pretrain.train, key, f, v)? {
                    return unknown();
                }
            }
            ("finetune", "seeds") => self.finetune.seeds = list(key, v)?,
            ("finetune", "label_fraction") => self.finetune.label_fraction = num(key, v)?,
            ("finetune", "checkpoint") => self.finetune.checkpoint = path(v),
            ("finetune", "init") => self.finetune.init = v.parse()?,
            ("finetune", "frozen_encoder") => self.finetune.frozen_encoder = flag(key, v)?,
            ("finetune", "augment") => self.finetune.augment = flag(key, v)?,
            ("finetune", "eval_every") => self.finetune.eval_every = num(key, v)?,
            ("finetune", f) => {
                if !set_train(&mut self.finetune.train, key, f, v)? {
                    return unknown();
                }
            }
            ("benchmark", "points") => self.benchmark.points = num(key, v)?,
            ("benchmark", "patches") => self.benchmark.patches = num(key, v)?,
            ("benchmark", "k_group") => self.benchmark.k_group = num(key, v)?,
            ("benchmark", "sweep") => self.benchmark.sweep = list(key, v)?,
            ("benchmark", "latency") => self.benchmark.latency = flag(key, v)?,
            ("benchmark", "latency_preset") => self.benchmark.latency_preset = v.parse()?,
            ("benchmark", "latency_runs") => self.benchmark.latency_runs = num(key, v)?,
            ("benchmark", "latency_warmup") => self.benchmark.latency_warmup = num(key, v)?,
            ("propcheck", "trials") => self.propcheck.trials = num(key, v)?,
            ("propcheck", "fault") => {
                self.propcheck.fault = match v {
                    "" | "none" => None,
                    f => Some(f.parse()?),
                }
            }
            ("propcheck", "only") => {
                self.propcheck.only = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            ("study", "orderings") => self.study.orderings = list(key, v)?,
            ("study", "ffn_kinds") => {
                let kinds: Vec<lcm_core::decoder::FfnKind> = list(key, v)?;
                self.study.ffn_kinds = kinds.iter().map(ToString::to_string).collect();
            }
            ("study", "seeds") => self.study.seeds = list(key, v)?,
            ("study", "train_per_class") => self.study.train_per_class = num(key, v)?,
            ("study", "val_per_class") => self.study.val_per_class = num(key, v)?,
            ("study", "epochs") => self.study.epochs = num(key, v)?,
            ("study", "warmup_epochs") => self.study.warmup_epochs = num(key, v)?,
            ("study", "combined") => {
                v.parse::<lcm_core::geometry::OrderingSpec>()?;
                self.study.combined = v.to_string();
            }
            ("study", "timing_runs") => self.study.timing_runs = num(key, v)?,
            ("study", "timing_warmup") => self.study.timing_warmup = num(key, v)?,
            _ => return unknown(),
        }
        Ok(())
    }

    /// Defaults, then `model.preset` wherever it appears, then every other
    /// assignment in order.
    pub fn resolve(assignments: &[Assignment]) -> Result<Self> {
        let mut cfg = Self::default();
        for a in assignments.iter().filter(|a| a.key == "model.preset") {
            cfg.set(a)?;
        }
        for a in assignments.iter().filter(|a| a.key != "model.preset") {
            cfg.set(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[Assignment]) -> Result<Self> {
        let mut all = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_text(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        all.extend(overrides.iter().cloned());
        Self::resolve(&all)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.train.validate()?;
        self.finetune.train.validate()?;
        let d = &self.data;
        if d.kinds.len() < 2 || d.kinds.len() != self.model.classes {
            return Err(Error::Config(format!(
                "data.kinds has {} shapes but model.classes = {}",
                d.kinds.len(),
                self.model.classes
            )));
        }
        if d.train_per_class == 0 || d.val_per_class == 0 {
            return Err(Error::Config("data.train_per_class and data.val_per_class must be positive".into()));
        }
        if d.patches == 0 || d.patches > d.points || self.model.k_group > d.points {
            return Err(Error::Config(format!(
                "data.patches {} and model.k_group {} must not exceed data.points {}",
                d.patches, self.model.k_group, d.points
            )));
        }
        if !(d.noise >= 0.0) {
            return Err(Error::Config(format!("data.noise must be >= 0, got {}", d.noise)));
        }
        let r = self.pretrain.unmask_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("pretrain.unmask_ratio must lie in (0, 1), got {r}")));
        }
        let visible = (r * d.patches as f64).round() as usize;
        let k = self.model.encoder.k_local;
        if visible == 0 || visible >= d.patches || visible < k {
            return Err(Error::Config(format!(
                "pretrain.unmask_ratio {r} leaves {visible} of {} patches visible; need between model.k_local = {k} and {}",
                d.patches,
                d.patches - 1
            )));
        }
        let f = self.finetune.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("finetune.label_fraction must lie in (0, 1], got {f}")));
        }
        if self.finetune.seeds.is_empty() || self.study.seeds.is_empty() {
            return Err(Error::Config("seed lists must not be empty".into()));
        }
        if self.finetune.eval_every == 0 {
            return Err(Error::Config("finetune.eval_every must be >= 1".into()));
        }
        if self.benchmark.sweep.len() < 2 || self.benchmark.latency_runs == 0 {
            return Err(Error::Config("benchmark.sweep needs >= 2 sizes and latency_runs >= 1".into()));
        }
        if self.study.orderings.is_empty() || self.study.ffn_kinds.is_empty() || self.study.epochs == 0 {
            return Err(Error::Config("study needs orderings, ffn_kinds and epochs >= 1".into()));
        }
        if self.study.warmup_epochs > self.study.epochs {
            return Err(Error::Config("study.warmup_epochs exceeds study.epochs".into()));
        }
        Ok(())
    }

    /// Worker count after the environment fallback.
    pub fn resolved_workers(&self) -> usize {
        if self.workers > 0 {
            return self.workers;
        }
        std::env::var("LCM_NUM_WORKERS")
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .filter(|&n: &usize| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    /// Every key with its resolved value, in the same syntax as the file.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "seed = {}\nworkers = {}\nprecision = {}\nmodel.preset = {}\n",
            self.seed, self.workers, self.precision, self.preset
        );
        for (k, v) in self.model.to_kv() {
            s += &format!("model.{k} = {v}\n");
        }
        let d = &self.data;
        s += &format!(
            "data.kinds = {}\ndata.train_per_class = {}\ndata.val_per_class = {}\ndata.points = {}\n\
             data.patches = {}\ndata.noise = {}\ndata.dump_xyz = {}\n",
            d.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            d.train_per_class,
            d.val_per_class,
            d.points,
            d.patches,
            d.noise,
            d.dump_xyz
        );
        let p = &self.pretrain;
        s += &train_text("pretrain", &p.train);
        s += &format!(
            "pretrain.unmask_ratio = {}\npretrain.stop_after = {}\npretrain.checkpoint_every = {}\npretrain.resume = {}\n",
            p.unmask_ratio,
            p.stop_after,
            p.checkpoint_every,
            p.resume.as_ref().map_or("none".into(), |p| p.display().to_string())
        );
        let f = &self.finetune;
        s += &train_text("finetune", &f.train);
        s += &format!(
            "finetune.seeds = {}\nfinetune.label_fraction = {}\nfinetune.checkpoint = {}\nfinetune.init = {}\n\
             finetune.frozen_encoder = {}\nfinetune.augment = {}\nfinetune.eval_every = {}\n",
            join(&f.seeds),
            f.label_fraction,
            f.checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()),
            f.init,
            f.frozen_encoder,
            f.augment,
            f.eval_every
        );
        let b = &self.benchmark;
        s += &format!(
            "benchmark.points = {}\nbenchmark.patches = {}\nbenchmark.k_group = {}\nbenchmark.sweep = {}\n\
             benchmark.latency = {}\nbenchmark.latency_preset = {}\nbenchmark.latency_runs = {}\nbenchmark.latency_warmup = {}\n",
            b.points,
            b.patches,
            b.k_group,
            join(&b.sweep),
            b.latency,
            b.latency_preset,
            b.latency_runs,
            b.latency_warmup
        );
        let c = &self.propcheck;
        s += &format!(
            "propcheck.trials = {}\npropcheck.fault = {}\npropcheck.only = {}\n",
            c.trials,
            c.fault.map_or("none".into(), |f| f.to_string()),
            c.only.join(",")
        );
        let t = &self.study;
        s += &format!(
            "study.orderings = {}\nstudy.ffn_kinds = {}\nstudy.seeds = {}\nstudy.train_per_class = {}\n\
             study.val_per_class = {}\nstudy.epochs = {}\nstudy.warmup_epochs = {}\nstudy.combined = {}\n\
             study.timing_runs = {}\nstudy.timing_warmup = {}\n",
            join(&t.orderings),
            t.ffn_kinds.join(","),
            join(&t.seeds),
            t.train_per_class,
            t.val_per_class,
            t.epochs,
            t.warmup_epochs,
            t.combined,
            t.timing_runs,
            t.timing_warmup
        );
        s
    }
}
