//! Named property checks over the public API.
//!
//! Every invariant the library promises is registered here so it can be run
//! as one suite (`registry`), reported with its measured residual, and
//! exercised with a deliberately injected fault.

mod decoder;
mod encoder;
mod geometry;
mod mpm;
mod tensor;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradCheckReport, Tensor};

/// Deliberate defect used to confirm that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Drops part of the local aggregation gradient.
    Gradient,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gradient" => Ok(Fault::Gradient),
            other => Err(Error::Config(format!("unknown fault '{other}'"))),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::Gradient => f.write_str("gradient"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Random instances for oracle and identity checks.
    pub trials: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
            fault: None,
        }
    }
}

/// What a check measured.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Outcome {
    /// Passes when `residual < tolerance`.
    pub fn below(residual: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            passed: residual < tolerance,
            residual,
            tolerance,
            detail: detail.into(),
        }
    }

    /// Passes when `residual > tolerance`.
    pub fn above(residual: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            passed: residual > tolerance,
            residual,
            tolerance,
            detail: detail.into(),
        }
    }

    pub fn exact(mismatches: usize, detail: impl Into<String>) -> Self {
        Self {
            passed: mismatches == 0,
            residual: mismatches as f64,
            tolerance: 0.0,
            detail: detail.into(),
        }
    }

    fn gradient(r: &GradCheckReport, tol: f64, detail: impl Into<String>) -> Self {
        Self {
            passed: r.max_rel_err < tol,
            residual: r.max_rel_err,
            tolerance: tol,
            detail: format!("{} ({} coordinates)", detail.into(), r.checked),
        }
    }

    /// Worst of several outcomes by residual-to-tolerance; fails if any fails.
    fn merge(parts: Vec<(String, Outcome)>) -> Self {
        let passed = parts.iter().all(|(_, o)| o.passed);
        let worst = parts
            .iter()
            .filter(|(_, o)| o.passed == passed)
            .max_by(|a, b| a.1.residual.total_cmp(&b.1.residual))
            .or(parts.first());
        match worst {
            Some((name, o)) => Self {
                passed,
                residual: o.residual,
                tolerance: o.tolerance,
                detail: format!("{name}: {}", o.detail),
            },
            None => Self::exact(0, "nothing to check"),
        }
    }
}

/// A registered check.
#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub module: &'static str,
    pub description: &'static str,
    run: fn(&CheckOptions) -> Result<Outcome>,
}

impl fmt::Debug for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Check").field("name", &self.name).field("module", &self.module).finish()
    }
}

/// A check's outcome, or the error it raised, under its name.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub module: &'static str,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn run(&self, opts: &CheckOptions) -> CheckResult {
        let start = std::time::Instant::now();
        let out = (self.run)(opts).unwrap_or_else(|e| Outcome {
            passed: false,
            residual: f64::INFINITY,
            tolerance: 0.0,
            detail: format!("error: {e}"),
        });
        CheckResult {
            name: self.name,
            module: self.module,
            passed: out.passed,
            residual: out.residual,
            tolerance: out.tolerance,
            detail: out.detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

macro_rules! check {
    ($name:literal, $module:literal, $desc:literal, $f:path) => {
        Check {
            name: $name,
            module: $module,
            description: $desc,
            run: $f,
        }
    };
}

/// Every check, in a stable order.
pub fn registry() -> Vec<Check> {
    vec![
        check!("grad.ops", "tensorcore", "every tape op vs central differences, 5 seeds", tensor::grad_ops),
        check!("tensor.matmul_identity", "tensorcore", "(A·I)·B equals A·B bit for bit", tensor::matmul_identity),
        check!("tensor.softmax", "tensorcore", "softmax rows sum to 1 and ignore row shifts", tensor::softmax),
        check!("tensor.backward_repeatable", "tensorcore", "rebuilding the tape gives identical gradients", tensor::backward_repeatable),
        check!("oracle.fps", "geometry", "farthest point sampling max-min property, exhaustive", geometry::fps),
        check!("oracle.knn", "geometry", "k nearest neighbors equal a full sort", geometry::knn),
        check!("oracle.chamfer", "geometry", "Chamfer equals the double loop; symmetric properties", geometry::chamfer),
        check!("grad.chamfer", "geometry", "Chamfer loss gradient", geometry::grad_chamfer),
        check!("geometry.hilbert", "geometry", "Hilbert path over cube corners is edge-adjacent", geometry::hilbert),
        check!("geometry.orderings", "geometry", "every ordering is a permutation", geometry::orderings),
        check!("geometry.synth", "geometry", "synthetic shapes are normalized and reproducible", geometry::synth),
        check!("grad.lal", "encoder", "local aggregation layer gradient", encoder::grad_lal),
        check!("grad.ffn", "encoder", "feed-forward block gradient", encoder::grad_ffn),
        check!("grad.layernorm", "encoder", "layer norm gradient", encoder::grad_layernorm),
        check!("grad.attention", "encoder", "attention gradient, full and top-K", encoder::grad_attention),
        check!("grad.encoder", "encoder", "whole encoder gradient for every variant", encoder::grad_encoder),
        check!("encoder.lal_equivariance", "encoder", "local aggregation commutes with token permutation", encoder::lal_equivariance),
        check!("encoder.equivariance", "encoder", "compact encoder commutes with token permutation", encoder::encoder_equivariance),
        check!("topk.full_equals_dense", "encoder", "top-K with K=N equals full attention bit for bit", encoder::topk_full),
        check!("topk.row_support", "encoder", "masked softmax keeps at most K weights summing to 1", encoder::topk_rows),
        check!("topk.geometry_self", "encoder", "geometric K=1 attends to self only", encoder::topk_self),
        check!("cost.count_params", "encoder", "closed-form counts equal instantiated models", encoder::count_params),
        check!("grad.ssm", "decoder", "selective and frozen scan layer gradient", decoder::grad_ssm),
        check!("grad.lcffn", "decoder", "locally constrained feed-forward gradient", decoder::grad_lcffn),
        check!("grad.decoder", "decoder", "decoder gradient for every sublayer and ordering", decoder::grad_decoder),
        check!("ssm.linearity", "decoder", "frozen scan is linear; attention is not", decoder::linearity),
        check!("ssm.causality", "decoder", "selective scan outputs ignore future inputs", decoder::causality),
        check!("ssm.stability", "decoder", "discretized transition below 1, bounded state", decoder::stability),
        check!("decoder.lcffn_equivariance", "decoder", "LCFFN commutes with joint permutation", decoder::lcffn_equivariance),
        check!("decoder.ordering", "decoder", "scan decoders depend on order, attention does not", decoder::ordering_dependence),
        check!("grad.embed", "mpm", "patch embedding gradient", mpm::grad_embed),
        check!("grad.pe", "mpm", "positional encoding gradient", mpm::grad_pe),
        check!("grad.recon_head", "mpm", "reconstruction head through the Chamfer loss", mpm::grad_recon),
        check!("grad.end_to_end", "mpm", "pretraining loss gradient spot check", mpm::grad_end_to_end),
        check!("mpm.masking", "mpm", "visible and masked sets partition the patches", mpm::masking),
        check!("mpm.patch_permutation", "mpm", "loss ignores point order inside target patches", mpm::patch_permutation),
        check!("mpm.checkpoint", "mpm", "checkpoint round trip is bitwise; truncation is rejected", mpm::checkpoint),
        check!("mpm.determinism", "mpm", "training is reproducible for any worker count", mpm::determinism),
    ]
}

/// Runs the checks whose names start with any of `prefixes` (all if empty).
pub fn run_checks(opts: &CheckOptions, prefixes: &[&str]) -> Vec<CheckResult> {
    registry()
        .iter()
        .filter(|c| prefixes.is_empty() || prefixes.iter().any(|p| c.name.starts_with(p)))
        .map(|c| c.run(opts))
        .collect()
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub(crate) fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    random(rng, &[n, 3])
}

pub(crate) fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    t.select_rows(perm).expect("permutation within range")
}

pub(crate) fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|c| c.name).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn injected_fault_fails_only_its_check() {
        let opts = CheckOptions {
            trials: 5,
            fault: Some(Fault::Gradient),
            ..CheckOptions::default()
        };
        let r = run_checks(&opts, &["grad.lal", "grad.ffn"]);
        assert!(!r[0].passed, "{:?}", r[0]);
        assert!(r[1].passed, "{:?}", r[1]);
    }
}
