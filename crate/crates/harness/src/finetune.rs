//! Classifier fine-tuning from a pretrained backbone or from scratch.
//!
//! Paired runs share everything but the backbone weights: for seed `s` the
//! label subset, head initialization and batch order are all derived from
//! `s`, never from the init mode.

use std::fmt::Write as _;
use std::path::Path;

use lcm_core::mpm::{
    derive_seed, evaluate_classifier, finetune_classifier_epoch, load_checkpoint, load_encoder, thread_pool,
    write_atomic, Checkpoint, Classifier, FinetuneMode, Labeled, Optimizer, TrainConfig, BACKBONE_PREFIXES,
};
use lcm_core::{Error, Result, Scalar};
use rayon::ThreadPool;
use serde::Serialize;

use crate::config::{InitMode, Precision, RunConfig};
use crate::data::{stratified_subset, synthesize, to_labeled};
use crate::metrics::RunRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Pretrained,
    Scratch,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Pretrained => "pretrained",
            Init::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub init: Init,
    pub seed: u64,
    pub train_examples: usize,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStats {
    pub init: Init,
    pub runs: usize,
    pub mean_acc: f64,
    /// Sample standard deviation (0 for a single run).
    pub std_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneSummary {
    pub runs: Vec<SeedResult>,
    pub groups: Vec<GroupStats>,
}

impl FinetuneSummary {
    pub fn group(&self, init: Init) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.init == init)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<11} {:>4} {:>9} {:>8}  per-seed accuracy\n", "init", "runs", "mean_acc", "std_acc");
        for g in &self.groups {
            let per: Vec<String> = self
                .runs
                .iter()
                .filter(|r| r.init == g.init)
                .map(|r| format!("s{}={:.4}", r.seed, r.val_acc))
                .collect();
            let _ = writeln!(s, "{:<11} {:>4} {:>9.4} {:>8.4}  {}", g.init.name(), g.runs, g.mean_acc, g.std_acc, per.join(" "));
        }
        s
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn inits(cfg: &RunConfig) -> Result<Vec<Init>> {
    let has = cfg.finetune.checkpoint.is_some();
    let v = match (cfg.finetune.init, has) {
        (InitMode::Auto, true) | (InitMode::Pretrained, true) => vec![Init::Pretrained],
        (InitMode::Auto, false) | (InitMode::Scratch, _) => vec![Init::Scratch],
        (InitMode::Both, true) => vec![Init::Pretrained, Init::Scratch],
        (InitMode::Pretrained | InitMode::Both, false) => {
            return Err(Error::Config(format!("finetune.init = {} needs finetune.checkpoint", cfg.finetune.init)))
        }
    };
    Ok(v)
}

pub fn run_finetune(cfg: &RunConfig, out: &Path) -> Result<FinetuneSummary> {
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, out),
        Precision::F64 => run::<f64>(cfg, out),
    }
}

fn run<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<FinetuneSummary> {
    std::fs::create_dir_all(out)?;
    let workers = cfg.resolved_workers();
    let pool = thread_pool(workers)?;
    let inits = inits(cfg)?;
    let ckpt = match &cfg.finetune.checkpoint {
        Some(p) if inits.contains(&Init::Pretrained) => Some(load_checkpoint(p)?),
        _ => None,
    };
    let set = synthesize(&cfg.data, cfg.seed, &pool)?;
    let train = to_labeled::<T>(&set.train, cfg.data.patches, cfg.model.k_group, &pool)?;
    let val = to_labeled::<T>(&set.val, cfg.data.patches, cfg.model.k_group, &pool)?;
    let mut rec = RunRecord::new("finetune", &cfg.precision.to_string(), workers, cfg.seed);
    let mut runs = Vec::new();
    for &seed in &cfg.finetune.seeds {
        let subset = stratified_subset(&train, cfg.finetune.label_fraction, derive_seed(seed, &[32]));
        for &init in &inits {
            let res = finetune_one(cfg, init, seed, ckpt.as_ref(), &subset, &val, &pool, &mut rec)?;
            runs.push(res);
        }
    }
    let groups = inits
        .iter()
        .map(|&init| {
            let accs: Vec<f64> = runs.iter().filter(|r| r.init == init).map(|r| r.val_acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            GroupStats {
                init,
                runs: accs.len(),
                mean_acc,
                std_acc,
            }
        })
        .collect();
    let summary = FinetuneSummary { runs, groups };
    let table = summary.table();
    println!("{table}");
    write_atomic(&out.join("comparison.txt"), table.as_bytes())?;
    rec.summarize("label_fraction", cfg.finetune.label_fraction);
    rec.summarize("runs", &summary.runs);
    rec.summarize("groups", &summary.groups);
    rec.write(out)?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn finetune_one<T: Scalar>(
    cfg: &RunConfig,
    init: Init,
    seed: u64,
    ckpt: Option<&Checkpoint>,
    train: &[Labeled<T>],
    val: &[Labeled<T>],
    pool: &ThreadPool,
    rec: &mut RunRecord,
) -> Result<SeedResult> {
    let f = &cfg.finetune;
    let mut model = Classifier::<T>::new(&cfg.model, derive_seed(seed, &[30]))?;
    if init == Init::Pretrained {
        let ck = ckpt.ok_or_else(|| Error::Config("pretrained init without a checkpoint".into()))?;
        let report = load_encoder(ck, &cfg.model, &mut model.store, &BACKBONE_PREFIXES)?;
        if report.loaded.is_empty() {
            return Err(Error::Config("checkpoint provided no backbone parameters".into()));
        }
        log::info!("loaded {} backbone tensors", report.loaded.len());
    }
    let tc = TrainConfig {
        seed: derive_seed(seed, &[31]),
        ..f.train.clone()
    };
    let mode = if f.frozen_encoder { FinetuneMode::FrozenEncoder } else { FinetuneMode::Full };
    let mut opt = Optimizer::new(&model.store, &tc, train.len().div_ceil(tc.batch_size));
    let tag = format!("{}.s{seed}", init.name());
    let (mut val_loss, mut val_acc) = (f64::NAN, f64::NAN);
    for epoch in 0..tc.epochs {
        let m = finetune_classifier_epoch(&mut model, &mut opt, train, &[], &tc, mode, f.augment, epoch, pool)?;
        rec.push(epoch + 1, "train", &format!("{tag}.loss"), m.train_loss);
        rec.push(epoch + 1, "train", &format!("{tag}.acc"), m.train_acc);
        if (epoch + 1) % f.eval_every == 0 || epoch + 1 == tc.epochs {
            (val_loss, val_acc) = evaluate_classifier(&model, val, pool)?;
            rec.push(epoch + 1, "val", &format!("{tag}.loss"), val_loss);
            rec.push(epoch + 1, "val", &format!("{tag}.acc"), val_acc);
            log::info!(
                "{tag} epoch {}/{}: train {:.4} ({:.3}) val {val_loss:.4} ({val_acc:.4})",
                epoch + 1,
                tc.epochs,
                m.train_loss,
                m.train_acc
            );
        }
    }
    Ok(SeedResult {
        init,
        seed,
        train_examples: train.len(),
        val_loss,
        val_acc,
    })
}
