//! Decoder ordering study: pretraining loss per (ordering, FFN kind, seed)
//! cell at a reduced budget, plus the cost of combined orderings.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use lcm_core::decoder::{FfnKind, SublayerKind};
use lcm_core::geometry::{Ordering, OrderingSpec};
use lcm_core::mpm::{
    derive_seed, pretrain_epoch, thread_pool, validation_loss, write_atomic, Optimizer, PretrainModel, TrainConfig,
};
use lcm_core::{Error, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;
use serde::Serialize;

use crate::bench::median;
use crate::config::{DataConfig, RunConfig};
use crate::metrics::RunRecord;
use crate::pretrain::pretrain_data;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub seed: u64,
    pub ffn: String,
    pub ordering: String,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub seed: u64,
    pub ffn: String,
    /// max − min of the final loss across orderings.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRatio {
    pub combined: String,
    pub q: usize,
    pub tokens: usize,
    pub single_seconds: f64,
    pub combined_seconds: f64,
    pub ratio: f64,
}

impl CostRatio {
    /// Within ±25% of `q`.
    pub fn passed(&self) -> bool {
        let q = self.q as f64;
        self.ratio >= 0.75 * q && self.ratio <= 1.25 * q
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyReport {
    pub cells: Vec<Cell>,
    pub spreads: Vec<Spread>,
    pub cost: CostRatio,
}

impl StudyReport {
    pub fn spread(&self, seed: u64, ffn: &str) -> Option<f64> {
        self.spreads.iter().find(|s| s.seed == seed && s.ffn == ffn).map(|s| s.spread)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.spreads.iter().map(|s| s.seed).collect();
        v.dedup();
        v
    }

    /// FFN spread is strictly positive in every seed.
    pub fn ffn_spread_positive(&self) -> bool {
        let seeds = self.seeds();
        !seeds.is_empty() && seeds.iter().all(|&s| self.spread(s, "ffn").is_some_and(|v| v > 0.0))
    }

    /// Seeds where the LCFFN spread does not exceed the FFN spread.
    pub fn lcffn_not_worse(&self) -> usize {
        self.seeds()
            .iter()
            .filter(|&&s| matches!((self.spread(s, "lcffn"), self.spread(s, "ffn")), (Some(l), Some(f)) if l <= f))
            .count()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>4} {:<6} {:<3} {:>10}\n", "seed", "ffn", "ord", "val_loss");
        for c in &self.cells {
            let _ = writeln!(s, "{:>4} {:<6} {:<3} {:>10.6}", c.seed, c.ffn, c.ordering, c.val_loss);
        }
        s += "spread across orderings (max - min):\n";
        for sp in &self.spreads {
            let _ = writeln!(s, "{:>4} {:<6} {:>10.3e}", sp.seed, sp.ffn, sp.spread);
        }
        let c = &self.cost;
        let _ = writeln!(
            s,
            "mixing cost over {} tokens: {} {:.3} ms vs single {:.3} ms, ratio {:.2} (q = {})",
            c.tokens,
            c.combined,
            c.combined_seconds * 1e3,
            c.single_seconds * 1e3,
            c.ratio,
            c.q
        );
        s
    }
}

fn cell_config(cfg: &RunConfig, ffn: FfnKind, ordering: Ordering) -> RunConfig {
    let mut c = cfg.clone();
    c.model.decoder.ffn_kind = ffn;
    c.model.decoder.sublayer = SublayerKind::Ssm;
    c.model.decoder.ordering = OrderingSpec::single(ordering);
    c
}

fn run_cell(cfg: &RunConfig, data: &crate::pretrain::PretrainData<f32>, seed: u64, pool: &ThreadPool) -> Result<f64> {
    let s = &cfg.study;
    let tc = TrainConfig {
        epochs: s.epochs,
        warmup_epochs: s.warmup_epochs,
        seed: derive_seed(seed, &[42]),
        ..cfg.pretrain.train.clone()
    };
    let mut model = PretrainModel::<f32>::new(&cfg.model, derive_seed(seed, &[41]))?;
    let mut opt = Optimizer::new(&model.store, &tc, data.train.len().div_ceil(tc.batch_size));
    let r = cfg.pretrain.unmask_ratio;
    for epoch in 0..tc.epochs {
        pretrain_epoch(&mut model, &mut opt, &data.train, &tc, r, epoch, pool)?;
    }
    validation_loss(&model, &data.val, r, derive_seed(seed, &[43]), pool)
}

/// Median time of the first decoder layer's sequence-mixing sublayer with
/// the combined ordering vs each single ordering it contains (averaged),
/// on one worker.
pub fn mixing_cost(cfg: &RunConfig) -> Result<CostRatio> {
    let s = &cfg.study;
    let combined: OrderingSpec = s.combined.parse()?;
    let n = cfg.data.patches;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[44]));
    let centers = Tensor::<f32>::from_fn(&[n, 3], |_| rng.random_range(-1.0..1.0));
    let h = Tensor::<f32>::from_fn(&[n, cfg.model.d()], |_| rng.random_range(-1.0..1.0));
    let time = |spec: &OrderingSpec| -> Result<f64> {
        let mut c = cfg.model.clone();
        c.decoder.sublayer = SublayerKind::Ssm;
        c.decoder.ordering = spec.clone();
        let model = PretrainModel::<f32>::new(&c, 0)?;
        let layer = &model.decoder.layers[0];
        let ctx = model.decoder.context(&centers)?;
        let mut times = Vec::with_capacity(s.timing_runs);
        for i in 0..s.timing_warmup + s.timing_runs {
            let mut tape = Tape::new();
            let p = model.store.bind_with(&mut tape, |_| false);
            let x = tape.constant(h.clone());
            let t = Instant::now();
            std::hint::black_box(layer.mix(&mut tape, &p, x, &ctx)?);
            if i >= s.timing_warmup {
                times.push(t.elapsed().as_secs_f64());
            }
        }
        Ok(median(times))
    };
    let pool = thread_pool(1)?;
    pool.install(|| {
        let kinds = combined.kinds();
        let mut single = 0.0;
        for &k in kinds {
            single += time(&OrderingSpec::single(k).with_bits(combined.hilbert_bits())?)?;
        }
        single /= kinds.len() as f64;
        let comb = time(&combined)?;
        Ok(CostRatio {
            combined: combined.to_string(),
            q: kinds.len(),
            tokens: n,
            single_seconds: single,
            combined_seconds: comb,
            ratio: comb / single,
        })
    })
}

/// The `ordering-study` command.
pub fn run_study(cfg: &RunConfig, out: &Path) -> Result<StudyReport> {
    std::fs::create_dir_all(out)?;
    let s = &cfg.study;
    let workers = cfg.resolved_workers();
    let pool = thread_pool(workers)?;
    let ffns: Vec<FfnKind> = s.ffn_kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?;
    let mut rec = RunRecord::new("ordering-study", "f32", workers, cfg.seed);
    let mut cells = Vec::new();
    let mut spreads = Vec::new();
    let t0 = Instant::now();
    for &seed in &s.seeds {
        let mut dcfg = cfg.clone();
        dcfg.seed = derive_seed(cfg.seed, &[40, seed]);
        dcfg.data = DataConfig {
            train_per_class: s.train_per_class,
            val_per_class: s.val_per_class,
            ..cfg.data.clone()
        };
        let data = pretrain_data::<f32>(&dcfg, None, &pool)?;
        for &ffn in &ffns {
            let mut losses = Vec::new();
            for &ord in &s.orderings {
                let cc = cell_config(cfg, ffn, ord);
                cc.model.validate()?;
                let loss = run_cell(&cc, &data, seed, &pool)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { step: 0, loss });
                }
                log::info!("seed {seed} {ffn} {ord}: val {loss:.6} [{:.0}s]", t0.elapsed().as_secs_f64());
                rec.push(s.epochs, &format!("s{seed}"), &format!("{ffn}.{ord}"), loss);
                losses.push(loss);
                cells.push(Cell {
                    seed,
                    ffn: ffn.to_string(),
                    ordering: ord.to_string(),
                    val_loss: loss,
                });
            }
            let spread = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - losses.iter().cloned().fold(f64::INFINITY, f64::min);
            rec.push(s.epochs, &format!("s{seed}"), &format!("{ffn}.spread"), spread);
            spreads.push(Spread {
                seed,
                ffn: ffn.to_string(),
                spread,
            });
        }
    }
    let cost = mixing_cost(cfg)?;
    let report = StudyReport { cells, spreads, cost };
    let table = report.table();
    print!("{table}");
    write_atomic(&out.join("ordering_study.txt"), table.as_bytes())?;
    rec.summarize("cells", &report.cells);
    rec.summarize("spreads", &report.spreads);
    rec.summarize("lcffn_not_worse_seeds", report.lcffn_not_worse());
    rec.write(out)?;
    // Timing varies between runs, so it stays out of summary.json.
    let cost_json = serde_json::to_string_pretty(&report.cost).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&out.join("ordering_cost.json"), cost_json.as_bytes())?;
    Ok(report)
}
