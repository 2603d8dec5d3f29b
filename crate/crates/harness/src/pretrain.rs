//! Masked point-model pretraining with validation, checkpoints and resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lcm_core::mpm::{
    derive_seed, load_checkpoint, pretrain_epoch, save_checkpoint, thread_pool, validation_loss, Checkpoint,
    Optimizer, Patches, PretrainModel, TrainConfig,
};
use lcm_core::{Error, Result, Scalar};
use rayon::ThreadPool;

use crate::config::{Precision, RunConfig};
use crate::data::{synthesize, to_labeled, write_dataset};
use crate::metrics::RunRecord;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub epoch0_val: f64,
    pub final_val: f64,
    /// Completed epochs, counting those of a resumed checkpoint.
    pub epochs_done: usize,
    pub checkpoint: PathBuf,
}

impl PretrainSummary {
    pub fn ratio(&self) -> f64 {
        self.final_val / self.epoch0_val
    }
}

/// Seeds derived from the master seed for the pretraining run.
pub fn train_config(section: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, &[20]),
        ..section.clone()
    }
}

pub fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, &[21])
}

pub fn val_mask_seed(seed: u64) -> u64 {
    derive_seed(seed, &[12])
}

fn meta_value<V: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<V> {
    ck.header
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config(format!("checkpoint lacks a valid '{key}' entry")))
}

/// Inputs shared by pretraining runs: unlabeled patch sets of both splits.
pub struct PretrainData<T> {
    pub train: Vec<Patches<T>>,
    pub val: Vec<Patches<T>>,
}

pub fn pretrain_data<T: Scalar>(cfg: &RunConfig, out: Option<&Path>, pool: &ThreadPool) -> Result<PretrainData<T>> {
    let set = synthesize(&cfg.data, cfg.seed, pool)?;
    if let Some(dir) = out {
        write_dataset(&set, dir, false)?;
    }
    let k = cfg.model.k_group;
    let strip = |v: Vec<lcm_core::mpm::Labeled<T>>| v.into_iter().map(|e| e.patches).collect();
    Ok(PretrainData {
        train: strip(to_labeled(&set.train, cfg.data.patches, k, pool)?),
        val: strip(to_labeled(&set.val, cfg.data.patches, k, pool)?),
    })
}

/// Runs `pretrain` into `out`, writing metrics and `checkpoint.bin`.
pub fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, out),
        Precision::F64 => run::<f64>(cfg, out),
    }
}

fn run<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    std::fs::create_dir_all(out)?;
    let workers = cfg.resolved_workers();
    let pool = thread_pool(workers)?;
    let mut rec = RunRecord::new("pretrain", &cfg.precision.to_string(), workers, cfg.seed);
    let t0 = Instant::now();
    let data = pretrain_data::<T>(cfg, Some(out), &pool)?;
    log::info!(
        "dataset: {} train / {} val clouds, {} patches of {} points ({:.1}s)",
        data.train.len(),
        data.val.len(),
        cfg.data.patches,
        cfg.model.k_group,
        t0.elapsed().as_secs_f64()
    );
    let p = &cfg.pretrain;
    let tc = train_config(&p.train, cfg.seed);
    let steps = data.train.len().div_ceil(tc.batch_size);
    let mut model = PretrainModel::<T>::new(&cfg.model, model_seed(cfg.seed))?;
    let mut opt = Optimizer::new(&model.store, &tc, steps);
    let vseed = val_mask_seed(cfg.seed);
    let r = p.unmask_ratio;
    log::info!("model: {} parameters, {steps} steps per epoch", model.store.num_scalars());

    let (start, epoch0_val) = match &p.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.model_config()? != cfg.model {
                return Err(Error::Config(format!("checkpoint {} was written for another model config", path.display())));
            }
            for (key, want) in [("seed", cfg.seed.to_string()), ("pretrain.epochs", tc.epochs.to_string())] {
                if ck.header.get(key) != Some(&want) {
                    return Err(Error::Config(format!("checkpoint {key} differs from this run ({want})")));
                }
            }
            let report = ck.apply(&mut model.store, |_| true)?;
            if !report.missing.is_empty() {
                return Err(Error::Config(format!("checkpoint lacks parameters: {:?}", report.missing)));
            }
            opt.state = ck
                .adam_state(&model.store)?
                .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume".into()))?;
            let start: usize = meta_value(&ck, "epoch")?;
            log::info!("resumed {} at epoch {start}, step {}", path.display(), opt.state.step);
            (start, meta_value(&ck, "val_epoch0")?)
        }
        None => {
            let v0 = validation_loss(&model, &data.val, r, vseed, &pool)?;
            rec.push(0, "val", "chamfer", v0);
            log::info!("epoch 0: val {v0:.5}");
            (0, v0)
        }
    };

    let end = if p.stop_after > 0 { p.stop_after.min(tc.epochs) } else { tc.epochs };
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let save = |model: &PretrainModel<T>, opt: &Optimizer<T>, epoch: usize| -> Result<()> {
        let meta = BTreeMap::from([
            ("kind".to_string(), "pretrain".to_string()),
            ("epoch".to_string(), epoch.to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("pretrain.epochs".to_string(), tc.epochs.to_string()),
            ("val_epoch0".to_string(), epoch0_val.to_string()),
        ]);
        save_checkpoint(&ckpt_path, &Checkpoint::new(&cfg.model, &meta, &model.store, Some(&opt.state)))
    };
    let mut final_val = epoch0_val;
    for epoch in start..end {
        let lr = opt.current_lr();
        let loss = pretrain_epoch(&mut model, &mut opt, &data.train, &tc, r, epoch, &pool).inspect_err(|e| {
            log::error!("epoch {}: {e}; last lr {lr:e}", epoch + 1);
        })?;
        final_val = validation_loss(&model, &data.val, r, vseed, &pool)?;
        rec.push(epoch + 1, "train", "chamfer", loss);
        rec.push(epoch + 1, "train", "lr", lr);
        rec.push(epoch + 1, "val", "chamfer", final_val);
        log::info!(
            "epoch {}/{}: train {loss:.5} val {final_val:.5} ({:.2} of epoch 0) lr {lr:.2e} [{:.0}s]",
            epoch + 1,
            tc.epochs,
            final_val / epoch0_val,
            t0.elapsed().as_secs_f64()
        );
        if (epoch + 1) % p.checkpoint_every.max(1) == 0 || epoch + 1 == end {
            save(&model, &opt, epoch + 1)?;
        }
    }
    if start >= end {
        save(&model, &opt, start)?;
    }

    let summary = PretrainSummary {
        epoch0_val,
        final_val,
        epochs_done: end.max(start),
        checkpoint: ckpt_path,
    };
    rec.summarize("val_epoch0", epoch0_val);
    rec.summarize("val_final", final_val);
    rec.summarize("val_ratio", summary.ratio());
    rec.summarize("epochs_done", summary.epochs_done);
    rec.summarize("optimizer_steps", opt.state.step);
    rec.summarize("parameters", model.store.num_scalars());
    rec.write(out)?;
    Ok(summary)
}
