use rand::Rng;

use super::{permute_rows, random, random_points, rng, CheckOptions, Outcome};
use crate::decoder::{
    linearity_check, Decoder, DecoderConfig, FeedForward, FfnKind, LinearityCheck, SsmLayer, SsmMode, SublayerKind,
};
use crate::error::Result;
use crate::nn::{gradcheck_store, probe_loss, Init, ParamStore};
use crate::tensor::{GradCheck, Tape, Tensor};

fn tiny(sublayer: SublayerKind, ffn_kind: FfnKind, ordering: &str, m: usize) -> Result<DecoderConfig> {
    Ok(DecoderConfig {
        m_layers: m,
        d: 8,
        d_inner: 6,
        d_state: 3,
        d_h: 5,
        d_ffn: 10,
        k_local: 3,
        heads: 2,
        ffn_kind,
        ordering: ordering.parse()?,
        sublayer,
    })
}

fn build(cfg: &DecoderConfig, seed: u64) -> Result<(ParamStore<f64>, Decoder)> {
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut Init::new(&mut store, seed), "decoder", cfg)?;
    store.randomize(seed ^ 0x5eed, 0.5);
    Ok((store, dec))
}

fn run_decoder(store: &ParamStore<f64>, dec: &Decoder, t0: &Tensor<f64>, tp: &Tensor<f64>, c: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = store.bind_with(&mut tape, |_| false);
    let (a, b) = (tape.constant(t0.clone()), tape.constant(tp.clone()));
    let y = dec.forward(&mut tape, &p, a, b, c)?;
    Ok(tape.value(y).clone())
}

fn run_ssm(store: &ParamStore<f64>, ssm: &SsmLayer, x: &Tensor<f64>, mode: SsmMode) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = store.bind_with(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    let y = ssm.forward(&mut tape, &p, xv, mode)?;
    Ok(tape.value(y).clone())
}

pub(super) fn grad_ssm(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut parts = Vec::new();
    for mode in [SsmMode::Selective, SsmMode::FrozenLinear] {
        for s in 0..3u64 {
            let mut r = rng(opts.seed + s);
            let mut store = ParamStore::new();
            let ssm = SsmLayer::new(&mut Init::new(&mut store, s), "ssm", 6, 5, 3)?;
            store.randomize(opts.seed + 100 + s, 0.5);
            let x = random(&mut r, &[6, 6]);
            let probe = r.random();
            let rep = gradcheck_store(
                &store,
                &[x],
                |tape, p, v| {
                    let y = ssm.forward(tape, p, v[0], mode)?;
                    probe_loss(tape, y, probe)
                },
                &cfg,
            )?;
            parts.push((format!("{mode} seed {s}"), Outcome::gradient(&rep, cfg.tol, "d 6, d_inner 5, d_state 3, 6 steps")));
        }
    }
    Ok(Outcome::merge(parts))
}

pub(super) fn grad_lcffn(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut parts = Vec::new();
    for s in 0..3u64 {
        let mut r = rng(opts.seed + s);
        let dcfg = tiny(SublayerKind::Ssm, FfnKind::Lcffn, "Y", 1)?;
        let (store, dec) = build(&dcfg, opts.seed + s)?;
        let centers = random_points(&mut r, 7);
        let ctx = dec.context(&centers)?;
        let FeedForward::Local(lc) = &dec.layers[0].ffn else {
            unreachable!("configured with a local feed-forward")
        };
        let x = random(&mut r, &[7, 8]);
        let probe = r.random();
        let table = ctx.table.clone().expect("local decoder has a table");
        let rep = gradcheck_store(
            &store,
            &[x],
            |tape, p, v| {
                let y = lc.forward(tape, p, v[0], &table)?;
                probe_loss(tape, y, probe)
            },
            &cfg,
        )?;
        parts.push((format!("seed {s}"), Outcome::gradient(&rep, cfg.tol, "d 8, d_h 5, 7 centers, k 3")));
    }
    Ok(Outcome::merge(parts))
}

pub(super) fn grad_decoder(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut parts = Vec::new();
    let cases = [
        (SublayerKind::Ssm, FfnKind::Lcffn, "Y"),
        (SublayerKind::Ssm, FfnKind::Ffn, "X"),
        (SublayerKind::Ssm, FfnKind::Lcffn, "HXYZ"),
        (SublayerKind::Attention, FfnKind::Lcffn, "Y"),
        (SublayerKind::Attention, FfnKind::Ffn, "Y"),
        (SublayerKind::Lal, FfnKind::Lcffn, "Y"),
        (SublayerKind::Lal, FfnKind::Ffn, "Y"),
    ];
    for (sublayer, ffn, ordering) in cases {
        let mut r = rng(opts.seed);
        let dcfg = tiny(sublayer, ffn, ordering, 2)?;
        let (store, dec) = build(&dcfg, opts.seed)?;
        let centers = random_points(&mut r, 7);
        let t0 = random(&mut r, &[7, 8]);
        let tp = random(&mut r, &[7, 8]);
        let probe = r.random();
        let rep = gradcheck_store(
            &store,
            &[t0, tp],
            |tape, p, v| {
                let y = dec.forward(tape, p, v[0], v[1], &centers)?;
                probe_loss(tape, y, probe)
            },
            &cfg,
        )?;
        parts.push((
            format!("{sublayer} {ffn} {ordering}"),
            Outcome::gradient(&rep, cfg.tol, "2 layers, d 8, 7 tokens"),
        ));
    }
    Ok(Outcome::merge(parts))
}

pub(super) fn linearity(opts: &CheckOptions) -> Result<Outcome> {
    let check = LinearityCheck {
        trials: opts.trials.clamp(1, 100),
        seed: opts.seed,
        ..LinearityCheck::default()
    };
    let rep = linearity_check(&DecoderConfig::desk(), &check)?;
    let zero = linearity_check(
        &DecoderConfig::desk(),
        &LinearityCheck {
            trials: 3,
            zero_weights: true,
            ..check.clone()
        },
    )?;
    Ok(Outcome::merge(vec![
        (
            "frozen scan".into(),
            Outcome::below(rep.ssm_max_residual, check.tol, format!("{} superposition trials", rep.trials)),
        ),
        (
            "nonzero output".into(),
            Outcome::above(rep.ssm_output_scale, 1e-3, "largest frozen scan output"),
        ),
        (
            "attention".into(),
            Outcome::above(rep.attention_nonlinear_gap, 1e-6, "smallest attention superposition residual"),
        ),
        (
            "zero weights".into(),
            Outcome::below(zero.ssm_max_residual.max(zero.attention_nonlinear_gap), 1e-300, "both sublayers vanish"),
        ),
    ]))
}

pub(super) fn causality(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut leaks = 0;
    let trials = opts.trials.div_ceil(4).max(1);
    for t in 0..trials {
        let mut store = ParamStore::new();
        let ssm = SsmLayer::new(&mut Init::new(&mut store, t as u64), "ssm", 6, 5, 3)?;
        store.randomize(r.random(), 0.5);
        let n = r.random_range(2..=16);
        let x = random(&mut r, &[n, 6]);
        let at = r.random_range(0..n);
        let mut bumped = x.clone().into_data();
        for v in &mut bumped[at * 6..(at + 1) * 6] {
            *v += r.random_range(-1.0..1.0);
        }
        let bumped = Tensor::new(&[n, 6], bumped)?;
        for mode in [SsmMode::Selective, SsmMode::FrozenLinear] {
            let a = run_ssm(&store, &ssm, &x, mode)?;
            let b = run_ssm(&store, &ssm, &bumped, mode)?;
            leaks += a.data()[..at * 6]
                .iter()
                .zip(&b.data()[..at * 6])
                .filter(|(u, v)| u.to_bits() != v.to_bits())
                .count();
        }
    }
    Ok(Outcome::exact(leaks, format!("earlier outputs changed by a later input, {trials} sequences")))
}

pub(super) fn stability(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let (d, di, ds) = (6, 5, 3);
    let mut store = ParamStore::new();
    let ssm = SsmLayer::new(&mut Init::new(&mut store, opts.seed), "ssm", d, di, ds)?;
    store.randomize(r.random(), 0.5);
    let steps = 4096;
    let x = random(&mut r, &[steps, d]).scale(5.0);

    let mut tape = Tape::new();
    let p = store.bind_with(&mut tape, |_| false);
    let xv = tape.constant(x);
    let xz = ssm.in_proj.forward(&mut tape, &p, xv)?;
    let xs = tape.slice_cols(xz, 0, di)?;
    let dl = tape.matmul(xs, p.var(ssm.w_delta))?;
    let ones = tape.constant(Tensor::ones(&[1, di]));
    let dl = tape.matmul(dl, ones)?;
    let dl = tape.add_row(dl, p.var(ssm.b_delta))?;
    let delta = tape.softplus(dl);
    let a = tape.exp(p.var(ssm.a_log));
    let a = tape.scale(a, -1.0);
    let (dv, av) = (tape.value(delta).clone(), tape.value(a).clone());
    let mut transition = f64::NEG_INFINITY;
    for t in 0..steps {
        for ch in 0..di {
            for s in 0..ds {
                transition = transition.max(dv.at(t, ch) * av.at(ch, s));
            }
        }
    }

    let b_bias = store.get(ssm.x_to_b.bias.expect("ssm B bias")).clone();
    let c_bias = store.get(ssm.x_to_c.bias.expect("ssm C bias")).clone();
    let fixed_delta = store.get(ssm.b_delta).map(|v| if v > 30.0 { v } else { v.exp().ln_1p() });
    let dfix = tape.constant(Tensor::from_fn(&[steps, di], |i| fixed_delta.data()[i % di]));
    let bfix = tape.constant(Tensor::from_fn(&[steps, ds], |i| b_bias.data()[i % ds]));
    let cfix = tape.constant(Tensor::from_fn(&[steps, ds], |i| c_bias.data()[i % ds]));
    let y = tape.ssm_scan(xs, dfix, a, bfix, cfix)?;
    let xs_v = tape.value(xs);
    let y = tape.value(y);
    let mut excess = 0.0f64;
    for ch in 0..di {
        let m = (0..steps).map(|t| xs_v.at(t, ch).abs()).fold(0.0, f64::max);
        let dt = fixed_delta.data()[ch];
        let bound: f64 = (0..ds)
            .map(|s| {
                let abar = (dt * av.at(ch, s)).exp();
                c_bias.data()[s].abs() * dt * b_bias.data()[s].abs() * m / (1.0 - abar)
            })
            .sum();
        let peak = (0..steps).map(|t| y.at(t, ch).abs()).fold(0.0, f64::max);
        excess = excess.max(peak / (bound * (1.0 + 1e-9)));
    }
    Ok(Outcome::merge(vec![
        ("transition".into(), Outcome::below(transition, 0.0, "max Δ·A over 4096 steps, so exp(Δ·A) < 1")),
        ("bounded".into(), Outcome::below(excess, 1.0, "peak |y| over its geometric-series bound")),
    ]))
}

pub(super) fn lcffn_equivariance(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut worst = 0.0f64;
    let trials = opts.trials.div_ceil(4).max(1);
    for t in 0..trials {
        let dcfg = tiny(SublayerKind::Attention, FfnKind::Lcffn, "Y", 1)?;
        let (store, dec) = build(&dcfg, t as u64)?;
        let FeedForward::Local(lc) = &dec.layers[0].ffn else {
            unreachable!("configured with a local feed-forward")
        };
        let n = r.random_range(4..=20);
        let centers = random_points(&mut r, n);
        let x = random(&mut r, &[n, 8]);
        let perm = super::shuffled(&mut r, n);
        let apply = |c: &Tensor<f64>, x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let ctx = dec.context(c)?;
            let mut tape = Tape::new();
            let p = store.bind_with(&mut tape, |_| false);
            let xv = tape.constant(x.clone());
            let y = lc.forward(&mut tape, &p, xv, ctx.table.as_ref().expect("table"))?;
            Ok(tape.value(y).clone())
        };
        let base = apply(&centers, &x)?;
        let moved = apply(&permute_rows(&centers, &perm), &permute_rows(&x, &perm))?;
        worst = worst.max(moved.max_abs_diff(&permute_rows(&base, &perm)));
        let (t0, tp) = (random(&mut r, &[n, 8]), random(&mut r, &[n, 8]));
        let whole = run_decoder(&store, &dec, &t0, &tp, &centers)?;
        let whole_moved = run_decoder(
            &store,
            &dec,
            &permute_rows(&t0, &perm),
            &permute_rows(&tp, &perm),
            &permute_rows(&centers, &perm),
        )?;
        worst = worst.max(whole_moved.max_abs_diff(&permute_rows(&whole, &perm)));
    }
    Ok(Outcome::below(worst, 1e-10, format!("LCFFN alone and in an attention decoder, {trials} trials")))
}

pub(super) fn ordering_dependence(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let trials = opts.trials.div_ceil(10).max(1);
    let (mut ssm_gap, mut attn_diff, mut joint) = (f64::INFINITY, 0.0f64, 0.0f64);
    for t in 0..trials {
        let n = r.random_range(6..=20);
        let centers = random_points(&mut r, n);
        let t0 = random(&mut r, &[n, 8]);
        let tp = random(&mut r, &[n, 8]);
        let perm = super::shuffled(&mut r, n);
        let outputs = |sublayer: SublayerKind, ordering: &str| -> Result<Tensor<f64>> {
            let (store, dec) = build(&tiny(sublayer, FfnKind::Lcffn, ordering, 2)?, t as u64)?;
            run_decoder(&store, &dec, &t0, &tp, &centers)
        };
        ssm_gap = ssm_gap.min(outputs(SublayerKind::Ssm, "X")?.max_abs_diff(&outputs(SublayerKind::Ssm, "Z")?));
        attn_diff = attn_diff.max(outputs(SublayerKind::Attention, "X")?.max_abs_diff(&outputs(SublayerKind::Attention, "Z")?));
        let (store, dec) = build(&tiny(SublayerKind::Ssm, FfnKind::Lcffn, "HXYZ", 2)?, t as u64)?;
        let base = run_decoder(&store, &dec, &t0, &tp, &centers)?;
        let moved = run_decoder(
            &store,
            &dec,
            &permute_rows(&t0, &perm),
            &permute_rows(&tp, &perm),
            &permute_rows(&centers, &perm),
        )?;
        joint = joint.max(moved.max_abs_diff(&permute_rows(&base, &perm)));
    }
    Ok(Outcome::merge(vec![
        ("scan".into(), Outcome::above(ssm_gap, 1e-6, "smallest output change from X to Z ordering")),
        ("attention".into(), Outcome::below(attn_diff, 1e-300, "attention output change from X to Z ordering")),
        ("joint".into(), Outcome::below(joint, 1e-10, "scan decoder under joint token and center permutation")),
    ]))
}
