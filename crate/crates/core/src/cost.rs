//! Closed-form parameter and FLOP counts.
//!
//! FLOP convention: a multiply-add is 2 FLOPs, bias additions count 1 per
//! output, a squared 3D distance counts 6. Attention counts the QKᵀ and AV
//! products. Normalization, activations, softmax and max/mean pooling are
//! not counted. Top-K attention masks full attention after it is computed,
//! so it costs the same as full attention.

use crate::decoder::{DecoderConfig, FfnKind, SublayerKind};
use crate::encoder::{Ablation, EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::mpm::ModelConfig;

/// Which end-to-end model is being counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Backbone plus classification head.
    Classifier,
    /// Backbone plus decoder, mask token and reconstruction head.
    Pretrain,
}

pub fn linear_params(d_in: usize, d_out: usize, bias: bool) -> usize {
    d_in * d_out + if bias { d_out } else { 0 }
}

fn mlp_params(d_in: usize, h: usize, d_out: usize) -> usize {
    linear_params(d_in, h, true) + linear_params(h, d_out, true)
}

fn local_params(d: usize, d_h: usize) -> usize {
    linear_params(2 * d, d_h, true) + linear_params(d_h, d, true)
}

fn attention_params(d: usize) -> usize {
    4 * linear_params(d, d, true)
}

fn ssm_params(d: usize, d_inner: usize, d_state: usize) -> usize {
    linear_params(d, 2 * d_inner, false)
        + d_inner * d_state
        + d_inner
        + d_inner
        + 2 * linear_params(d_inner, d_state, true)
        + linear_params(d_inner, d, false)
}

pub fn encoder_params(cfg: &EncoderConfig) -> usize {
    let d = cfg.d;
    let ln = 2 * d;
    let layer = match cfg.variant {
        EncoderVariant::Lcm => {
            let lal = if cfg.ablation == Ablation::A { 0 } else { ln + local_params(d, cfg.d_h) };
            let ffn = if cfg.ablation == Ablation::C { 0 } else { ln + mlp_params(d, cfg.d_ffn, d) };
            lal + ffn
        }
        _ => 2 * ln + attention_params(d) + mlp_params(d, cfg.d_ffn, d),
    };
    cfg.n_layers * layer
}

pub fn decoder_params(cfg: &DecoderConfig) -> usize {
    let d = cfg.d;
    let mixer = match cfg.sublayer {
        SublayerKind::Ssm => ssm_params(d, cfg.d_inner, cfg.d_state),
        SublayerKind::Attention => attention_params(d),
        SublayerKind::Lal => local_params(d, cfg.d_h),
    };
    let ffn = match cfg.ffn_kind {
        FfnKind::Ffn => mlp_params(d, cfg.d_ffn, d),
        FfnKind::Lcffn => local_params(d, cfg.d_h),
    };
    cfg.m_layers * (4 * d + mixer + ffn)
}

/// Embedding, encoder positional encoding, encoder and its final norm.
pub fn backbone_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d();
    mlp_params(3, cfg.embed_hidden, d) + mlp_params(3, cfg.pe_hidden, d) + encoder_params(&cfg.encoder) + 2 * d
}

/// Exact number of learnable scalars of the model built from `cfg`.
pub fn count_params(cfg: &ModelConfig, kind: ModelKind) -> usize {
    let d = cfg.d();
    let h = cfg.head_hidden;
    backbone_params(cfg)
        + match kind {
            ModelKind::Classifier => {
                linear_params(2 * d, h, true) + linear_params(h, h, true) + linear_params(h, cfg.classes, true)
            }
            ModelKind::Pretrain => {
                mlp_params(3, cfg.pe_hidden, d) + d + decoder_params(&cfg.decoder) + 2 * d + mlp_params(d, d, 3 * cfg.k_group)
            }
        }
}

/// FLOPs of an affine map applied to `rows` rows.
pub fn linear_flops(rows: usize, d_in: usize, d_out: usize, bias: bool) -> u64 {
    let (m, k, n) = (rows as u64, d_in as u64, d_out as u64);
    2 * m * k * n + if bias { m * n } else { 0 }
}

fn mlp_flops(rows: usize, d_in: usize, h: usize, d_out: usize) -> u64 {
    linear_flops(rows, d_in, h, true) + linear_flops(rows, h, d_out, true)
}

const DIST_FLOPS: u64 = 6;

/// Forward FLOPs of the classification model, split by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    /// Farthest point sampling and patch grouping distances.
    pub grouping: u64,
    /// Point embedding and encoder positional encoding.
    pub embedding: u64,
    /// Neighbor search over centers for local aggregation.
    pub knn: u64,
    /// QKᵀ and AV products.
    pub attention: u64,
    /// Everything else inside the encoder layers.
    pub layers: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn encoder(&self) -> u64 {
        self.knn + self.attention + self.layers
    }

    pub fn total(&self) -> u64 {
        self.grouping + self.embedding + self.encoder() + self.head
    }
}

/// Analytic forward FLOPs for one cloud of `l` points split into `n`
/// patches of `k_group` points. The local aggregation down map is counted on
/// every (token, neighbor) pair.
pub fn count_flops(cfg: &ModelConfig, l: usize, n: usize, k_group: usize) -> FlopReport {
    let e = &cfg.encoder;
    let d = e.d;
    let (l64, n64) = (l as u64, n as u64);
    let mut r = FlopReport {
        grouping: 2 * DIST_FLOPS * n64 * l64,
        embedding: mlp_flops(n * k_group, 3, cfg.embed_hidden, d) + mlp_flops(n, 3, cfg.pe_hidden, d),
        head: linear_flops(1, 2 * d, cfg.head_hidden, true)
            + linear_flops(1, cfg.head_hidden, cfg.head_hidden, true)
            + linear_flops(1, cfg.head_hidden, cfg.classes, true),
        ..FlopReport::default()
    };
    let ffn = mlp_flops(n, d, e.d_ffn, d);
    let layers = e.n_layers as u64;
    match e.variant {
        EncoderVariant::Lcm => {
            let k = match e.ablation {
                Ablation::B => 1,
                _ => e.k_local,
            };
            if matches!(e.ablation, Ablation::C | Ablation::D) {
                r.knn = DIST_FLOPS * n64 * n64;
            }
            let lal = if e.ablation == Ablation::A {
                0
            } else {
                linear_flops(n * k, 2 * d, e.d_h, true) + linear_flops(n, e.d_h, d, true)
            };
            let f = if e.ablation == Ablation::C { 0 } else { ffn };
            r.layers = layers * (lal + f);
        }
        _ => {
            r.attention = layers * attention_operator_flops(n, d);
            r.layers = layers * (4 * linear_flops(n, d, d, true) + ffn);
        }
    }
    r
}

/// QKᵀ plus AV over `n` tokens of width `d` (summed over heads).
pub fn attention_operator_flops(n: usize, d: usize) -> u64 {
    4 * (n as u64) * (n as u64) * d as u64
}

/// Least-squares fit of `log y = slope · log x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<PowerFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::count("loglog_fit", format!("need matching samples, got {} and {}", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Data("log-log fit needs positive finite samples".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("log-log fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(PowerFit { slope, intercept, r2 })
}

/// Result of searching local/FFN widths for a parameter budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Calibration {
    pub d_h: usize,
    pub d_ffn: usize,
    pub params: usize,
}

/// Searches `d_h ∈ {16, 32, …, 256}` and `d_ffn ∈ {64, 128, …, 4d}` for the
/// classifier whose parameter count is closest to `target`, keeping every
/// other field of `base`. Ties go to the smaller widths.
pub fn calibrate_lcm(base: &ModelConfig, target: usize) -> Calibration {
    let mut best: Option<Calibration> = None;
    for d_h in (16..=256).step_by(16) {
        for d_ffn in (64..=4 * base.d()).step_by(64) {
            let mut cfg = base.clone();
            cfg.encoder.d_h = d_h;
            cfg.encoder.d_ffn = d_ffn;
            let params = count_params(&cfg, ModelKind::Classifier);
            let c = Calibration { d_h, d_ffn, params };
            if best.is_none_or(|b| params.abs_diff(target) < b.params.abs_diff(target)) {
                best = Some(c);
            }
        }
    }
    best.expect("search space is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpm::{Classifier, PretrainModel};

    fn small(variant: &str, ablation: &str, sublayer: &str, ffn: &str) -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        for (k, v) in [
            ("encoder.variant", variant),
            ("encoder.ablation", ablation),
            ("encoder.d", "24"),
            ("encoder.heads", "3"),
            ("encoder.n_layers", "2"),
            ("encoder.d_h", "8"),
            ("encoder.d_ffn", "40"),
            ("decoder.heads", "3"),
            ("decoder.d_inner", "20"),
            ("decoder.d_state", "5"),
            ("decoder.d_h", "6"),
            ("decoder.d_ffn", "36"),
            ("decoder.sublayer", sublayer),
            ("decoder.ffn_kind", ffn),
            ("embed_hidden", "12"),
            ("pe_hidden", "10"),
            ("head_hidden", "14"),
            ("k_group", "7"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn affine_closed_form() {
        assert_eq!(linear_params(3, 5, true), 20);
        assert_eq!(linear_params(3, 5, false), 15);
        assert_eq!(linear_flops(4, 3, 5, true), 2 * 4 * 3 * 5 + 20);
    }

    #[test]
    fn counts_match_instantiated_models() {
        for variant in ["lcm", "transformer"] {
            for ablation in ["A", "B", "C", "D"] {
                if variant == "transformer" && ablation != "D" {
                    continue;
                }
                for sublayer in ["ssm", "attention", "lal"] {
                    for ffn in ["ffn", "lcffn"] {
                        let cfg = small(variant, ablation, sublayer, ffn);
                        let c = Classifier::<f32>::new(&cfg, 0).unwrap();
                        assert_eq!(count_params(&cfg, ModelKind::Classifier), c.store.num_scalars());
                        let p = PretrainModel::<f32>::new(&cfg, 0).unwrap();
                        assert_eq!(count_params(&cfg, ModelKind::Pretrain), p.store.num_scalars(), "{variant} {ablation} {sublayer} {ffn}");
                    }
                }
            }
        }
    }

    #[test]
    fn paper_scale_counts() {
        let t = count_params(&ModelConfig::transformer_paper(), ModelKind::Classifier);
        let l = count_params(&ModelConfig::lcm_paper(), ModelKind::Classifier);
        assert!((t as f64 - 22.1e6).abs() <= 0.05 * 22.1e6, "{t}");
        assert!(l <= 3_200_000, "{l}");
        assert!(1.0 - l as f64 / t as f64 >= 0.85);
    }

    #[test]
    fn calibration_reproduces_paper_widths() {
        let c = calibrate_lcm(&ModelConfig::lcm_paper(), 2_700_000);
        let cfg = ModelConfig::lcm_paper();
        assert_eq!((c.d_h, c.d_ffn), (cfg.encoder.d_h, cfg.encoder.d_ffn));
        assert_eq!(c.params, count_params(&cfg, ModelKind::Classifier));
    }

    #[test]
    fn flop_ratio_at_paper_operating_point() {
        let l = count_flops(&ModelConfig::lcm_paper(), 2048, 128, 32).total();
        let t = count_flops(&ModelConfig::transformer_paper(), 2048, 128, 32).total();
        assert!((l as f64) / (t as f64) <= 0.35, "{l} / {t}");
    }

    #[test]
    fn scaling_slopes() {
        let ns = [64usize, 128, 256, 512, 1024];
        let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let t = ModelConfig::transformer_paper();
        let l = ModelConfig::lcm_paper();
        let att: Vec<f64> = ns.iter().map(|&n| count_flops(&t, 32 * n, n, 32).attention as f64).collect();
        let lcm: Vec<f64> = ns.iter().map(|&n| count_flops(&l, 32 * n, n, 32).encoder() as f64).collect();
        let fa = loglog_fit(&xs, &att).unwrap();
        let fl = loglog_fit(&xs, &lcm).unwrap();
        assert!(fa.slope >= 1.8 && fa.r2 >= 0.98, "{fa:?}");
        assert!(fl.slope <= 1.15 && fl.r2 >= 0.98, "{fl:?}");
    }

    #[test]
    fn fit_recovers_a_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        let f = loglog_fit(&xs, &ys).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12 && (f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(loglog_fit(&[1.0], &[1.0]).is_err());
        assert!(loglog_fit(&[1.0, 0.0], &[1.0, 1.0]).is_err());
    }
}
