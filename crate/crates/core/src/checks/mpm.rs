use std::collections::BTreeMap;

use rand::Rng;

use super::{random, rng, shuffled, CheckOptions, Outcome};
use crate::error::Result;
use crate::geometry::{synth_shape, ShapeKind};
use crate::mpm::{
    patchify, pretrain_epoch, thread_pool, Checkpoint, MaskSpec, ModelConfig, Optimizer, PatchSet, Patches, PosEnc,
    PretrainModel, TrainConfig,
};
use crate::nn::{gradcheck_store, probe_loss};
use crate::tensor::{Coords, GradCheck, Tensor};

fn sampled(per_param: usize, seed: u64, tol: f64) -> GradCheck {
    GradCheck {
        coords: Coords::Sample { per_param, seed },
        tol,
        ..GradCheck::default()
    }
}

fn tiny_model(seed: u64) -> Result<PretrainModel<f64>> {
    let mut m = PretrainModel::new(&ModelConfig::tiny(), seed)?;
    m.store.randomize(seed ^ 0xabc, 0.4);
    Ok(m)
}

fn tiny_patches(seed: u64) -> Result<Patches<f64>> {
    let kind = ShapeKind::ALL[(seed % 8) as usize];
    patchify(&synth_shape(kind, 256, 0.01, seed)?, 16, ModelConfig::tiny().k_group)
}

pub(super) fn grad_embed(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = sampled(8, opts.seed, 1e-4);
    let model = tiny_model(opts.seed)?;
    let mut r = rng(opts.seed);
    let pts = random(&mut r, &[5 * model.cfg.k_group, 3]);
    let probe = r.random();
    let rep = gradcheck_store(
        &model.store,
        &[pts],
        |tape, p, v| {
            let y = model.backbone.embed_patches(tape, p, v[0])?;
            probe_loss(tape, y, probe)
        },
        &cfg,
    )?;
    Ok(Outcome::gradient(&rep, cfg.tol, "5 patches of 8 points, 8 coordinates per parameter"))
}

pub(super) fn grad_pe(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = sampled(8, opts.seed, 1e-4);
    let model = tiny_model(opts.seed)?;
    let mut parts = Vec::new();
    for (label, which) in [("encoder", PosEnc::Encoder), ("decoder", PosEnc::Decoder)] {
        let mut r = rng(opts.seed);
        let c = random(&mut r, &[6, 3]);
        let probe = r.random();
        let rep = gradcheck_store(
            &model.store,
            &[c],
            |tape, p, v| {
                let y = model.positional(tape, p, v[0], which)?;
                probe_loss(tape, y, probe)
            },
            &cfg,
        )?;
        parts.push((label.to_string(), Outcome::gradient(&rep, cfg.tol, "6 centers")));
    }
    Ok(Outcome::merge(parts))
}

pub(super) fn grad_recon(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = sampled(8, opts.seed, 1e-4);
    let model = tiny_model(opts.seed)?;
    let mut r = rng(opts.seed);
    let (n_mask, k) = (4, model.cfg.k_group);
    let tokens = random(&mut r, &[n_mask, model.cfg.d()]);
    let target = random(&mut r, &[n_mask * k, 3]).scale(0.3);
    let rep = gradcheck_store(
        &model.store,
        &[tokens],
        |tape, p, v| {
            let rm = model.reconstruct(tape, p, v[0])?;
            let rm = tape.reshape(rm, &[n_mask * k, 3])?;
            let t = tape.constant(target.clone());
            tape.chamfer(rm, t, n_mask)
        },
        &cfg,
    )?;
    Ok(Outcome::gradient(&rep, cfg.tol, "4 masked tokens through the Chamfer loss"))
}

pub(super) fn grad_end_to_end(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = sampled(20, opts.seed, 1e-3);
    let model = tiny_model(opts.seed)?;
    let ps = tiny_patches(opts.seed)?.mask(&MaskSpec::new(0.4, opts.seed))?;
    let rep = gradcheck_store(&model.store, &[], |tape, p, _| model.loss(tape, p, &ps), &cfg)?;
    Ok(Outcome::gradient(&rep, cfg.tol, "tiny model, 16 patches, 20 coordinates per parameter"))
}

pub(super) fn masking(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let (mut bad, mut valid) = (0usize, 0usize);
    for _ in 0..opts.trials {
        let n = r.random_range(2..=128);
        let ratio = r.random_range(0.01..0.99);
        let spec = MaskSpec::new(ratio, r.random());
        let want = (ratio * n as f64).round() as usize;
        let Ok((vis, msk)) = spec.partition(n) else {
            bad += (want >= 1 && want < n) as usize;
            continue;
        };
        valid += 1;
        let mut all: Vec<usize> = vis.iter().chain(&msk).copied().collect();
        all.sort_unstable();
        bad += (all != (0..n).collect::<Vec<_>>()) as usize;
        bad += (vis.len() != want) as usize;
        bad += (spec.partition(n)? != (vis, msk)) as usize;
    }
    Ok(Outcome::exact(bad, format!("{valid} valid partitions of {} draws", opts.trials)))
}

fn shuffle_masked(ps: &PatchSet<f64>, seed: u64) -> PatchSet<f64> {
    let mut r = rng(seed);
    let k = ps.patches.k_group();
    let mut data = ps.patches.patches.data().to_vec();
    for &m in &ps.masked {
        let perm = shuffled(&mut r, k);
        let old = data[m * k * 3..(m + 1) * k * 3].to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            data[(m * k + dst) * 3..(m * k + dst + 1) * 3].copy_from_slice(&old[src * 3..(src + 1) * 3]);
        }
    }
    let mut out = ps.clone();
    out.patches.patches = Tensor::new(ps.patches.patches.shape(), data).expect("same shape");
    out
}

pub(super) fn patch_permutation(opts: &CheckOptions) -> Result<Outcome> {
    let model = tiny_model(opts.seed)?;
    let mut worst = 0.0f64;
    let trials = opts.trials.div_ceil(20).max(1);
    for t in 0..trials as u64 {
        let ps = tiny_patches(opts.seed + t)?.mask(&MaskSpec::new(0.4, t))?;
        let base = model.eval_loss(&ps)?;
        let moved = model.eval_loss(&shuffle_masked(&ps, t))?;
        worst = worst.max((base - moved).abs() / base.abs().max(1e-12));
    }
    Ok(Outcome::below(worst, 1e-12, format!("relative loss change, {trials} clouds")))
}

pub(super) fn checkpoint(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = ModelConfig::tiny();
    let model = PretrainModel::<f32>::new(&cfg, opts.seed)?;
    let opt = Optimizer::new(&model.store, &TrainConfig::pretrain(), 1);
    let meta = BTreeMap::from([("epoch".to_string(), "3".to_string())]);
    let bytes = Checkpoint::new(&cfg, &meta, &model.store, Some(&opt.state)).to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let mut fresh = PretrainModel::<f32>::new(&cfg, opts.seed + 1)?;
    back.apply(&mut fresh.store, |_| true)?;
    let differing = model
        .store
        .values()
        .iter()
        .zip(fresh.store.values())
        .map(|(a, b)| a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count())
        .sum::<usize>();
    let mut accepted_truncations = 0;
    let mut r = rng(opts.seed);
    for _ in 0..opts.trials.clamp(1, 64) {
        let cut = r.random_range(0..bytes.len());
        accepted_truncations += Checkpoint::from_bytes(&bytes[..cut]).is_ok() as usize;
    }
    Ok(Outcome::merge(vec![
        ("round trip".into(), Outcome::exact(differing, "parameter bits changed by save and load")),
        ("header".into(), Outcome::exact((back.model_config()? != cfg) as usize, "model config recovered")),
        ("truncation".into(), Outcome::exact(accepted_truncations, "truncated files accepted")),
    ]))
}

pub(super) fn determinism(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = ModelConfig::tiny();
    let data = (0..6).map(|i| tiny_patches(opts.seed + i)).collect::<Result<Vec<_>>>()?;
    let train = TrainConfig {
        batch_size: 3,
        epochs: 2,
        warmup_epochs: 1,
        seed: opts.seed,
        ..TrainConfig::pretrain()
    };
    let run = |workers: usize| -> Result<(Vec<f64>, PretrainModel<f32>)> {
        let pool = thread_pool(workers)?;
        let mut model = PretrainModel::<f32>::new(&cfg, opts.seed)?;
        let mut opt = Optimizer::new(&model.store, &train, 2);
        let data: Vec<Patches<f32>> = data
            .iter()
            .map(|p| Patches {
                centers: p.centers.cast(),
                patches: p.patches.cast(),
            })
            .collect();
        let mut losses = Vec::new();
        for epoch in 0..train.epochs {
            losses.push(pretrain_epoch(&mut model, &mut opt, &data, &train, 0.4, epoch, &pool)?);
        }
        Ok((losses, model))
    };
    let (l1, m1) = run(1)?;
    let mut differing = 0;
    for workers in [2, 3] {
        let (l, m) = run(workers)?;
        differing += l1.iter().zip(&l).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        differing += (m.store != m1.store) as usize;
    }
    Ok(Outcome::exact(differing, "loss or parameter differences at 2 and 3 workers vs 1"))
}
