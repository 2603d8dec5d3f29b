use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lcm_core::mpm::write_atomic;
use lcm_core::{Error, Result};
use lcm_harness::config::{parse_override, RunConfig};
use lcm_harness::{bench, data, exit_code, finetune, pretrain, propcheck, study, EXIT_FAILURE, EXIT_OK};

#[derive(Parser)]
#[command(name = "lcm", version, about = "Compact point-cloud model: data, training, benchmarks and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `workers` and LCM_NUM_WORKERS.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override one config key, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth,
    /// Masked point-model pretraining.
    Pretrain,
    /// Classifier fine-tuning, optionally paired pretrained vs scratch.
    Finetune,
    /// Parameter and FLOP counts, complexity sweep, latency.
    Benchmark,
    /// Run the invariant suite.
    Propcheck,
    /// Decoder ordering study.
    OrderingStudy,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Benchmark => "benchmark",
            Command::Propcheck => "propcheck",
            Command::OrderingStudy => "ordering-study",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.sets.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(parse_override(&format!("seed={seed}"))?);
    }
    if let Some(w) = cli.workers {
        overrides.push(parse_override(&format!("workers={w}"))?);
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<i32> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    std::fs::create_dir_all(&out)?;
    let echo = cfg.to_text();
    write_atomic(&out.join("config.resolved.txt"), echo.as_bytes())?;
    log::info!("resolved config ({} workers):\n{echo}", cfg.resolved_workers());
    let code = match cli.command {
        Command::Synth => {
            let m = data::run_synth(cfg, &out)?;
            println!("manifest {} sha256 {}", out.join("manifest.json").display(), m.sha256);
            EXIT_OK
        }
        Command::Pretrain => {
            let s = pretrain::run_pretrain(cfg, &out)?;
            println!(
                "epochs {}: val {:.5} -> {:.5} ({:.3} of epoch 0), checkpoint {}",
                s.epochs_done,
                s.epoch0_val,
                s.final_val,
                s.ratio(),
                s.checkpoint.display()
            );
            EXIT_OK
        }
        Command::Finetune => {
            finetune::run_finetune(cfg, &out)?;
            EXIT_OK
        }
        Command::Benchmark => {
            let v = bench::run_benchmark(cfg, &out)?;
            if v.iter().all(|v| v.passed) { EXIT_OK } else { EXIT_FAILURE }
        }
        Command::Propcheck => {
            let r = propcheck::run_propcheck(cfg, &out)?;
            if r.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_FAILURE }
        }
        Command::OrderingStudy => {
            let r = study::run_study(cfg, &out)?;
            println!(
                "ffn spread positive in every seed: {}; lcffn spread <= ffn spread in {} of {} seeds; cost ratio {:.2} (q = {})",
                r.ffn_spread_positive(),
                r.lcffn_not_worse(),
                r.seeds().len(),
                r.cost.ratio,
                r.cost.q
            );
            if r.ffn_spread_positive() && r.cost.passed() { EXIT_OK } else { EXIT_FAILURE }
        }
    };
    Ok(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| run(&cli, &cfg));
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Divergence { .. } = e {
                eprintln!("hint: lower pretrain.lr / finetune.lr or check the data");
            }
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
