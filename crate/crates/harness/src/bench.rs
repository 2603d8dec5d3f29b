//! Parameter and FLOP counts, complexity sweeps, forward latency.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use lcm_core::cost::{attention_operator_flops, count_flops, count_params, loglog_fit, FlopReport, ModelKind, PowerFit};
use lcm_core::encoder::EncoderConfig;
use lcm_core::geometry::{synth_shape, ShapeKind};
use lcm_core::mpm::{patchify, thread_pool, write_atomic, Classifier, ModelConfig, Patches};
use lcm_core::Result;
use serde::Serialize;

use crate::config::{BenchmarkSection, Preset, RunConfig};
use crate::metrics::RunRecord;

pub const TRANSFORMER_PARAMS: f64 = 22.1e6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub lcm_encoder: u64,
    pub transformer_encoder: u64,
    /// QKᵀ and AV FLOPs summed over the Transformer's layers.
    pub attention: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Fit {
    pub slope: f64,
    pub r2: f64,
}

impl From<PowerFit> for Fit {
    fn from(p: PowerFit) -> Self {
        Self { slope: p.slope, r2: p.r2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub transformer_params: usize,
    pub lcm_params: usize,
    pub reduction: f64,
    pub transformer_flops: u64,
    pub lcm_flops: u64,
    pub flop_ratio: f64,
    pub sweep: Vec<SweepRow>,
    pub attention_fit: Fit,
    pub lcm_fit: Fit,
    pub transformer_encoder_fit: Fit,
}

/// A named pass/fail measurement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn cost_report(b: &BenchmarkSection) -> Result<CostReport> {
    let tr = ModelConfig::transformer_paper();
    let lcm = ModelConfig::lcm_paper();
    let transformer_params = count_params(&tr, ModelKind::Classifier);
    let lcm_params = count_params(&lcm, ModelKind::Classifier);
    let fl = |cfg: &ModelConfig, n: usize| count_flops(cfg, b.points.max(n), n, b.k_group);
    let (tf, lf): (FlopReport, FlopReport) = (fl(&tr, b.patches), fl(&lcm, b.patches));
    let sweep: Vec<SweepRow> = b
        .sweep
        .iter()
        .map(|&n| SweepRow {
            n,
            lcm_encoder: fl(&lcm, n).encoder(),
            transformer_encoder: fl(&tr, n).encoder(),
            attention: tr.encoder.n_layers as u64 * attention_operator_flops(n, tr.d()),
        })
        .collect();
    let xs: Vec<f64> = sweep.iter().map(|r| r.n as f64).collect();
    let fit = |f: fn(&SweepRow) -> u64| -> Result<Fit> {
        let ys: Vec<f64> = sweep.iter().map(|r| f(r) as f64).collect();
        Ok(loglog_fit(&xs, &ys)?.into())
    };
    Ok(CostReport {
        transformer_params,
        lcm_params,
        reduction: 1.0 - lcm_params as f64 / transformer_params as f64,
        transformer_flops: tf.total(),
        lcm_flops: lf.total(),
        flop_ratio: lf.total() as f64 / tf.total() as f64,
        attention_fit: fit(|r| r.attention)?,
        lcm_fit: fit(|r| r.lcm_encoder)?,
        transformer_encoder_fit: fit(|r| r.transformer_encoder)?,
        sweep,
    })
}

impl CostReport {
    pub fn param_verdict(&self) -> Verdict {
        let t = self.transformer_params as f64;
        let dev = (t - TRANSFORMER_PARAMS).abs() / TRANSFORMER_PARAMS;
        let passed = dev <= 0.05 && self.lcm_params as f64 <= 3.2e6 && self.reduction >= 0.85;
        Verdict {
            name: "parameters".into(),
            passed,
            detail: format!(
                "transformer {:.2}M ({:+.1}% vs 22.1M), lcm {:.2}M, reduction {:.1}%",
                t / 1e6,
                100.0 * (t - TRANSFORMER_PARAMS) / TRANSFORMER_PARAMS,
                self.lcm_params as f64 / 1e6,
                100.0 * self.reduction
            ),
        }
    }

    pub fn flop_verdict(&self) -> Verdict {
        Verdict {
            name: "flops".into(),
            passed: self.flop_ratio <= 0.35,
            detail: format!(
                "lcm {:.3}G / transformer {:.3}G = {:.3}",
                self.lcm_flops as f64 / 1e9,
                self.transformer_flops as f64 / 1e9,
                self.flop_ratio
            ),
        }
    }

    pub fn scaling_verdict(&self) -> Verdict {
        let (a, l) = (self.attention_fit, self.lcm_fit);
        Verdict {
            name: "scaling".into(),
            passed: self.sweep.len() >= 5 && a.slope >= 1.8 && l.slope <= 1.15 && a.r2 >= 0.98 && l.r2 >= 0.98,
            detail: format!(
                "attention slope {:.3} (R² {:.4}), lcm encoder slope {:.3} (R² {:.4}); full transformer encoder slope {:.3}",
                a.slope, a.r2, l.slope, l.r2, self.transformer_encoder_fit.slope
            ),
        }
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        vec![self.param_verdict(), self.flop_verdict(), self.scaling_verdict()]
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "parameters: transformer {} lcm {}", self.transformer_params, self.lcm_params);
        let _ = writeln!(s, "flops: transformer {} lcm {}", self.transformer_flops, self.lcm_flops);
        let _ = writeln!(s, "{:>6} {:>16} {:>16} {:>16}", "N", "lcm_encoder", "transformer_enc", "attention_op");
        for r in &self.sweep {
            let _ = writeln!(s, "{:>6} {:>16} {:>16} {:>16}", r.n, r.lcm_encoder, r.transformer_encoder, r.attention);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub model: String,
    pub n: usize,
    pub median_seconds: f64,
}

fn latency_models(preset: Preset) -> (ModelConfig, ModelConfig) {
    match preset {
        Preset::LcmPaper | Preset::TransformerPaper => (ModelConfig::lcm_paper(), ModelConfig::transformer_paper()),
        Preset::Desk | Preset::Tiny => {
            let lcm = preset.model();
            let mut tr = lcm.clone();
            tr.encoder = EncoderConfig {
                d: lcm.d(),
                ..EncoderConfig::transformer_desk()
            };
            (lcm, tr)
        }
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median single-cloud classifier forward time, one worker, f32.
pub fn latency(b: &BenchmarkSection) -> Result<Vec<LatencyRow>> {
    let pool = thread_pool(1)?;
    let (lcm, tr) = latency_models(b.latency_preset);
    let mut rows = Vec::new();
    for (name, cfg) in [("lcm", &lcm), ("transformer", &tr)] {
        let model = Classifier::<f32>::new(cfg, 0)?;
        for &n in &b.sweep {
            let pc = synth_shape::<f64>(ShapeKind::Torus, b.points.max(n), 0.01, n as u64)?;
            let p = patchify(&pc, n, cfg.k_group)?;
            let p = Patches::<f32> {
                centers: p.centers.cast(),
                patches: p.patches.cast(),
            };
            let times = pool.install(|| -> Result<Vec<f64>> {
                let mut v = Vec::new();
                for i in 0..b.latency_warmup + b.latency_runs {
                    let t = Instant::now();
                    std::hint::black_box(model.predict(&p)?);
                    if i >= b.latency_warmup {
                        v.push(t.elapsed().as_secs_f64());
                    }
                }
                Ok(v)
            })?;
            let m = median(times);
            log::info!("latency {name} N={n}: {:.2} ms", m * 1e3);
            rows.push(LatencyRow {
                model: name.into(),
                n,
                median_seconds: m,
            });
        }
    }
    Ok(rows)
}

/// The `benchmark` command. Returns the pass/fail verdicts.
pub fn run_benchmark(cfg: &RunConfig, out: &Path) -> Result<Vec<Verdict>> {
    std::fs::create_dir_all(out)?;
    let b = &cfg.benchmark;
    let mut rec = RunRecord::new("benchmark", "f32", 1, cfg.seed);
    let report = cost_report(b)?;
    rec.push(0, "params", "transformer", report.transformer_params as f64);
    rec.push(0, "params", "lcm", report.lcm_params as f64);
    rec.push(0, "flops", "transformer", report.transformer_flops as f64);
    rec.push(0, "flops", "lcm", report.lcm_flops as f64);
    for r in &report.sweep {
        rec.push(r.n, "sweep", "lcm_encoder_flops", r.lcm_encoder as f64);
        rec.push(r.n, "sweep", "transformer_encoder_flops", r.transformer_encoder as f64);
        rec.push(r.n, "sweep", "attention_flops", r.attention as f64);
    }
    print!("{}", report.table());
    let mut text = report.table();
    if b.latency {
        // Timings vary between runs, so they go to their own file and stay
        // out of the reproducible metric rows.
        let rows = latency(b)?;
        let mut lat = String::from("model,n,median_seconds\n");
        for r in &rows {
            let _ = writeln!(lat, "{},{},{:e}", r.model, r.n, r.median_seconds);
        }
        write_atomic(&out.join("latency.csv"), lat.as_bytes())?;
        for model in ["lcm", "transformer"] {
            let pts: Vec<&LatencyRow> = rows.iter().filter(|r| r.model == model).collect();
            let xs: Vec<f64> = pts.iter().map(|r| r.n as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.median_seconds).collect();
            if let Ok(f) = loglog_fit(&xs, &ys) {
                let line = format!("latency {model}: slope {:.3} (R² {:.4})\n", f.slope, f.r2);
                print!("{line}");
                text += &line;
            }
        }
    }
    let verdicts = report.verdicts();
    for v in &verdicts {
        let line = format!("{} {}: {}\n", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
        print!("{line}");
        text += &line;
    }
    write_atomic(&out.join("benchmark.txt"), text.as_bytes())?;
    rec.summarize("report", &report);
    rec.summarize("verdicts", &verdicts);
    rec.write(out)?;
    Ok(verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cost_report_meets_targets() {
        let r = cost_report(&BenchmarkSection::default()).unwrap();
        for v in r.verdicts() {
            assert!(v.passed, "{}: {}", v.name, v.detail);
        }
        assert_eq!(r.sweep.len(), 5);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
