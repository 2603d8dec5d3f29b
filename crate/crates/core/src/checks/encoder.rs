use rand::Rng;

use super::{permute_rows, random, random_points, rng, shuffled, CheckOptions, Fault, Outcome};
use crate::cost::{count_params as closed_form, ModelKind};
use crate::encoder::{
    neighbor_table, topk_attention_mask, Ablation, AttnMask, Attention, Encoder, EncoderConfig, EncoderVariant,
    LocalAgg, TopKSpace,
};
use crate::error::Result;
use crate::geometry::NeighborTable;
use crate::mpm::{Classifier, ModelConfig, PretrainModel};
use crate::nn::{gradcheck_store, probe_loss, Init, LayerNorm, Mlp, ParamStore};
use crate::tensor::{GradCheck, GradCheckReport, Tape, Tensor};

fn worse(a: Option<GradCheckReport>, b: GradCheckReport) -> Option<GradCheckReport> {
    match a {
        Some(a) if a.max_rel_err >= b.max_rel_err => Some(a),
        _ => Some(b),
    }
}

fn tiny_encoder(variant: EncoderVariant, ablation: Ablation) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d: 8,
        d_h: 5,
        d_ffn: 10,
        k_local: 3,
        heads: 2,
        variant,
        top_k: if variant == EncoderVariant::Lcm || variant == EncoderVariant::Transformer {
            None
        } else {
            Some(3)
        },
        ablation,
    }
}

pub(super) fn grad_lal(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut worst = None;
    for s in 0..3u64 {
        let mut r = rng(opts.seed + s);
        let mut store = ParamStore::new();
        let lal = LocalAgg::new(&mut Init::new(&mut store, s), "lal", 6, 5)?;
        store.randomize(opts.seed + 100 + s, 0.5);
        let table = neighbor_table(&random_points(&mut r, 7), 3)?;
        let x = random(&mut r, &[7, 6]);
        let probe = r.random();
        let rep = gradcheck_store(
            &store,
            &[x],
            |tape, p, v| {
                let y = lal.forward(tape, p, v[0], &table)?;
                let loss = probe_loss(tape, y, probe)?;
                if opts.fault == Some(Fault::Gradient) {
                    let frozen = tape.constant(tape.value(y).clone());
                    let extra = probe_loss(tape, frozen, probe)?;
                    return tape.add(loss, extra);
                }
                Ok(loss)
            },
            &cfg,
        )?;
        worst = worse(worst, rep);
    }
    Ok(Outcome::gradient(&worst.expect("three seeds"), cfg.tol, "d 6, d_h 5, 7 tokens, k 3, 3 seeds"))
}

pub(super) fn grad_ffn(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut worst = None;
    for s in 0..3u64 {
        let mut r = rng(opts.seed + s);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut Init::new(&mut store, s), "ffn", 6, 10, 6)?;
        store.randomize(opts.seed + 100 + s, 0.5);
        let x = random(&mut r, &[5, 6]);
        let probe = r.random();
        let rep = gradcheck_store(
            &store,
            &[x],
            |tape, p, v| {
                let y = mlp.forward(tape, p, v[0])?;
                probe_loss(tape, y, probe)
            },
            &cfg,
        )?;
        worst = worse(worst, rep);
    }
    Ok(Outcome::gradient(&worst.expect("three seeds"), cfg.tol, "6→10→6, 5 tokens, 3 seeds"))
}

pub(super) fn grad_layernorm(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut worst = None;
    for s in 0..3u64 {
        let mut r = rng(opts.seed + s);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut Init::new(&mut store, s), "ln", 7)?;
        store.randomize(opts.seed + 100 + s, 1.0);
        let x = random(&mut r, &[4, 7]);
        let probe = r.random();
        let rep = gradcheck_store(
            &store,
            &[x],
            |tape, p, v| {
                let y = ln.forward(tape, p, v[0])?;
                probe_loss(tape, y, probe)
            },
            &cfg,
        )?;
        worst = worse(worst, rep);
    }
    Ok(Outcome::gradient(&worst.expect("three seeds"), cfg.tol, "d 7, 4 tokens, 3 seeds"))
}

pub(super) fn grad_attention(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut parts = Vec::new();
    for (label, kind) in [("full", 0), ("feature top-K", 1), ("geometry top-K", 2)] {
        let mut worst = None;
        for s in 0..3u64 {
            let mut r = rng(opts.seed + s);
            let mut store = ParamStore::new();
            let attn = Attention::new(&mut Init::new(&mut store, s), "attn", 6, 2)?;
            store.randomize(opts.seed + 100 + s, 0.5);
            let mask = match kind {
                0 => AttnMask::Full,
                1 => AttnMask::FeatureTopK(2),
                _ => AttnMask::Fixed(topk_attention_mask(&random_points(&mut r, 5), 2, TopKSpace::Geometry)?),
            };
            let x = random(&mut r, &[5, 6]);
            let probe = r.random();
            let rep = gradcheck_store(
                &store,
                &[x],
                |tape, p, v| {
                    let y = attn.forward(tape, p, v[0], &mask)?;
                    probe_loss(tape, y, probe)
                },
                &cfg,
            )?;
            worst = worse(worst, rep);
        }
        let rep = worst.expect("three seeds");
        parts.push((label.to_string(), Outcome::gradient(&rep, cfg.tol, "d 6, 2 heads, 5 tokens")));
    }
    Ok(Outcome::merge(parts))
}

pub(super) fn grad_encoder(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let cases = [
        ("lcm A", tiny_encoder(EncoderVariant::Lcm, Ablation::A)),
        ("lcm B", tiny_encoder(EncoderVariant::Lcm, Ablation::B)),
        ("lcm C", tiny_encoder(EncoderVariant::Lcm, Ablation::C)),
        ("lcm D", tiny_encoder(EncoderVariant::Lcm, Ablation::D)),
        ("transformer", tiny_encoder(EncoderVariant::Transformer, Ablation::D)),
        ("top-K feature", tiny_encoder(EncoderVariant::TransformerTopKFeature, Ablation::D)),
        ("top-K geometry", tiny_encoder(EncoderVariant::TransformerTopKGeometry, Ablation::D)),
    ];
    let mut parts = Vec::new();
    for (label, ecfg) in cases {
        let mut r = rng(opts.seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut Init::new(&mut store, opts.seed), "encoder", &ecfg)?;
        store.randomize(opts.seed + 1, 0.5);
        let centers = random_points(&mut r, 7);
        let e0 = random(&mut r, &[7, 8]);
        let ep = random(&mut r, &[7, 8]);
        let probe = r.random();
        let rep = gradcheck_store(
            &store,
            &[e0, ep],
            |tape, p, v| {
                let y = enc.forward(tape, p, v[0], v[1], &centers)?;
                probe_loss(tape, y, probe)
            },
            &cfg,
        )?;
        parts.push((label.to_string(), Outcome::gradient(&rep, cfg.tol, "2 layers, d 8, 7 tokens")));
    }
    Ok(Outcome::merge(parts))
}

fn lal_output(
    lal: &LocalAgg,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    table: &NeighborTable,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = store.bind_with(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    let y = lal.forward(&mut tape, &p, xv, table)?;
    Ok(tape.value(y).clone())
}

pub(super) fn lal_equivariance(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut worst = 0.0f64;
    for t in 0..opts.trials {
        let n = r.random_range(4..=24);
        let mut store = ParamStore::new();
        let lal = LocalAgg::new(&mut Init::new(&mut store, t as u64), "lal", 6, 5)?;
        store.randomize(r.random(), 0.5);
        let centers = random_points(&mut r, n);
        let x = random(&mut r, &[n, 6]);
        let perm = shuffled(&mut r, n);
        let k = r.random_range(1..=n.min(6));
        let base = lal_output(&lal, &store, &x, &neighbor_table(&centers, k)?)?;
        let moved = lal_output(
            &lal,
            &store,
            &permute_rows(&x, &perm),
            &neighbor_table(&permute_rows(&centers, &perm), k)?,
        )?;
        worst = worst.max(moved.max_abs_diff(&permute_rows(&base, &perm)));
    }
    Ok(Outcome::below(worst, 1e-12, format!("max |LAL(Px) − P·LAL(x)| over {} trials", opts.trials)))
}

pub(super) fn encoder_equivariance(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut worst = 0.0f64;
    let trials = opts.trials.div_ceil(4).max(1);
    for t in 0..trials {
        let ablation = [Ablation::A, Ablation::B, Ablation::C, Ablation::D][t % 4];
        let ecfg = tiny_encoder(EncoderVariant::Lcm, ablation);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut Init::new(&mut store, t as u64), "encoder", &ecfg)?;
        store.randomize(r.random(), 0.5);
        let n = r.random_range(4..=20);
        let centers = random_points(&mut r, n);
        let e0 = random(&mut r, &[n, 8]);
        let ep = random(&mut r, &[n, 8]);
        let perm = shuffled(&mut r, n);
        let run = |c: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let p = store.bind_with(&mut tape, |_| false);
            let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let y = enc.forward(&mut tape, &p, av, bv, c)?;
            Ok(tape.value(y).clone())
        };
        let base = run(&centers, &e0, &ep)?;
        let moved = run(
            &permute_rows(&centers, &perm),
            &permute_rows(&e0, &perm),
            &permute_rows(&ep, &perm),
        )?;
        worst = worst.max(moved.max_abs_diff(&permute_rows(&base, &perm)));
    }
    Ok(Outcome::below(worst, 1e-10, format!("ablations A to D, {trials} trials")))
}

pub(super) fn topk_full(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut mismatches = 0;
    let trials = opts.trials.div_ceil(10).max(1);
    for t in 0..trials {
        let n = r.random_range(2..=16);
        let mut full = tiny_encoder(EncoderVariant::Transformer, Ablation::D);
        full.n_layers = 1;
        let mut store = ParamStore::new();
        let dense = Encoder::new(&mut Init::new(&mut store, t as u64), "encoder", &full)?;
        store.randomize(r.random(), 0.5);
        let centers = random_points(&mut r, n);
        let e0 = random(&mut r, &[n, 8]);
        let ep = random(&mut r, &[n, 8]);
        let run = |enc: &Encoder| -> Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let p = store.bind_with(&mut tape, |_| false);
            let (av, bv) = (tape.constant(e0.clone()), tape.constant(ep.clone()));
            let y = enc.forward(&mut tape, &p, av, bv, &centers)?;
            Ok(tape.value(y).clone())
        };
        let reference = run(&dense)?;
        for variant in [EncoderVariant::TransformerTopKFeature, EncoderVariant::TransformerTopKGeometry] {
            let mut enc = dense.clone();
            enc.cfg.variant = variant;
            enc.cfg.top_k = Some(n);
            let out = run(&enc)?;
            mismatches += out
                .data()
                .iter()
                .zip(reference.data())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
        }
    }
    Ok(Outcome::exact(mismatches, format!("output bits that differ, {trials} encoders, both spaces")))
}

pub(super) fn topk_rows(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let (mut bad, mut sum_err) = (0usize, 0.0f64);
    for _ in 0..opts.trials {
        let n = r.random_range(1..=24);
        let k = r.random_range(1..=n);
        let logits = random(&mut r, &[n, n]).scale(4.0);
        let mask = topk_attention_mask(&logits, k, TopKSpace::Feature)?;
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let w = tape.softmax_rows(lv, Some(&mask))?;
        let w = tape.value(w);
        for i in 0..n {
            let row = w.row(i);
            let kept = row.iter().filter(|&&v| v > 0.0).count();
            bad += (kept > k) as usize;
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            let mut sorted: Vec<f64> = logits.row(i).to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let threshold = sorted[k - 1];
            for (j, &m) in mask.row(i).iter().enumerate() {
                let keep = m == 0.0;
                bad += (keep != (logits.at(i, j) >= threshold)) as usize;
            }
        }
    }
    Ok(Outcome::merge(vec![
        ("support".into(), Outcome::exact(bad, "rows with more than K weights or wrong keys")),
        ("sum".into(), Outcome::below(sum_err, 1e-12, "max |row sum − 1|")),
    ]))
}

pub(super) fn topk_self(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut bad = 0;
    for _ in 0..opts.trials {
        let n = r.random_range(1..=24);
        let mut centers = random_points(&mut r, n);
        if n > 2 {
            let dup = centers.row(1).to_vec();
            centers = Tensor::from_fn(&[n, 3], |i| if i / 3 == 0 { dup[i % 3] } else { centers.data()[i] });
        }
        let mask = topk_attention_mask(&centers, 1, TopKSpace::Geometry)?;
        for i in 0..n {
            for j in 0..n {
                bad += ((mask.at(i, j) == 0.0) != (i == j)) as usize;
            }
        }
    }
    Ok(Outcome::exact(bad, "mask entries off the diagonal pattern, duplicates included"))
}

fn small_model(variant: EncoderVariant, ablation: Ablation, sublayer: &str, ffn: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::tiny();
    cfg.encoder.variant = variant;
    cfg.encoder.ablation = ablation;
    cfg.encoder.top_k = tiny_encoder(variant, ablation).top_k;
    cfg.decoder.sublayer = sublayer.parse()?;
    cfg.decoder.ffn_kind = ffn.parse()?;
    Ok(cfg)
}

pub(super) fn count_params(_opts: &CheckOptions) -> Result<Outcome> {
    let mut mismatches = 0;
    let mut cases = 0;
    let mut worst = String::new();
    for variant in [
        EncoderVariant::Lcm,
        EncoderVariant::Transformer,
        EncoderVariant::TransformerTopKFeature,
        EncoderVariant::TransformerTopKGeometry,
    ] {
        for ablation in [Ablation::A, Ablation::B, Ablation::C, Ablation::D] {
            if variant != EncoderVariant::Lcm && ablation != Ablation::D {
                continue;
            }
            for sublayer in ["ssm", "attention", "lal"] {
                for ffn in ["ffn", "lcffn"] {
                    let cfg = small_model(variant, ablation, sublayer, ffn)?;
                    let pre = PretrainModel::<f32>::new(&cfg, 0)?.store.num_scalars();
                    let cls = Classifier::<f32>::new(&cfg, 0)?.store.num_scalars();
                    for (got, kind) in [(pre, ModelKind::Pretrain), (cls, ModelKind::Classifier)] {
                        cases += 1;
                        let want = closed_form(&cfg, kind);
                        if got != want {
                            mismatches += 1;
                            worst = format!("; {variant} {ablation} {sublayer} {ffn} {kind:?}: {got} vs {want}");
                        }
                    }
                }
            }
        }
    }
    Ok(Outcome::exact(mismatches, format!("{cases} configurations{worst}")))
}
