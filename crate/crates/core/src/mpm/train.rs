use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

use super::config::TrainConfig;
use super::model::{Classifier, PretrainModel};
use super::optim::{adamw_update_where, AdamState, AdamW, CosineSchedule};
use super::patch::{augment, MaskSpec, PatchSet, Patches};

/// SplitMix64 mix of a master seed with a path of stream indices.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut x = master;
    for &p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

pub fn thread_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

/// Sums per-example gradients in batch order and divides by the batch size.
fn reduce_gradients<T: Scalar>(per_item: Vec<Vec<Tensor<T>>>) -> Result<Vec<Tensor<T>>> {
    let n = per_item.len();
    let mut it = per_item.into_iter();
    let mut acc: Vec<Vec<T>> = it
        .next()
        .ok_or_else(|| Error::count("reduce_gradients", "empty batch"))?
        .into_iter()
        .map(Tensor::into_data)
        .collect();
    for grads in it {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, &y) in a.iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    let scale = T::one() / T::of(n as f64);
    acc.into_iter()
        .map(|mut a| {
            a.iter_mut().for_each(|x| *x *= scale);
            Tensor::new(&[a.len()], a)
        })
        .collect()
}

fn reshape_like<T: Scalar>(grads: Vec<Tensor<T>>, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
    grads
        .into_iter()
        .zip(store.values())
        .map(|(g, p)| g.reshape(p.shape()))
        .collect()
}

/// Optimizer state, schedule and hyperparameters of one training run.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub state: AdamState<T>,
    pub hyper: AdamW,
    pub schedule: CosineSchedule,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            state: AdamState::new(store),
            hyper: AdamW::from_config(cfg),
            schedule: CosineSchedule::new(cfg, steps_per_epoch),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.state.step)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], trainable: impl Fn(&str) -> bool) -> Result<()> {
        let lr = self.current_lr();
        adamw_update_where(store, grads, &mut self.state, &self.hyper, lr, trainable)
    }
}

/// One pretraining step over `batch`: per-example forward/backward on the
/// pool, ordered gradient reduction, AdamW update. Returns the batch loss.
pub fn pretrain_step<T: Scalar>(
    model: &mut PretrainModel<T>,
    opt: &mut Optimizer<T>,
    batch: &[PatchSet<T>],
    pool: &ThreadPool,
) -> Result<f64> {
    let m: &PretrainModel<T> = model;
    let results: Vec<Result<(f64, Vec<Tensor<T>>)>> = pool.install(|| {
        batch
            .par_iter()
            .map(|ps| {
                let mut tape = Tape::new();
                let p = m.store.bind(&mut tape);
                let loss = m.loss(&mut tape, &p, ps)?;
                let value = tape.value(loss).item().as_f64();
                check_loss(value, opt.state.step as usize)?;
                let mut g = tape.backward(loss)?;
                Ok((value, p.gradients(&mut g, &m.store)))
            })
            .collect()
    });
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(results.len());
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.push(g);
    }
    let loss = total / batch.len() as f64;
    check_loss(loss, opt.state.step as usize)?;
    let grads = reshape_like(reduce_gradients(grads)?, &model.store)?;
    opt.step(&mut model.store, &grads, |_| true)?;
    Ok(loss)
}

/// Mask of example `index` in `epoch`.
pub fn mask_for(seed: u64, epoch: u64, index: usize, unmask_ratio: f64) -> MaskSpec {
    MaskSpec::new(unmask_ratio, derive_seed(seed, &[1, epoch, index as u64]))
}

/// Shuffled pass over `data` in batches. Returns the mean batch loss.
pub fn pretrain_epoch<T: Scalar>(
    model: &mut PretrainModel<T>,
    opt: &mut Optimizer<T>,
    data: &[Patches<T>],
    cfg: &TrainConfig,
    unmask_ratio: f64,
    epoch: usize,
    pool: &ThreadPool,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0, epoch as u64])));
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch = chunk
            .iter()
            .map(|&i| data[i].mask(&mask_for(cfg.seed, epoch as u64, i, unmask_ratio)))
            .collect::<Result<Vec<_>>>()?;
        total += pretrain_step(model, opt, &batch, pool)?;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Mean reconstruction loss over `data` with masks fixed by `mask_seed`.
pub fn validation_loss<T: Scalar>(
    model: &PretrainModel<T>,
    data: &[Patches<T>],
    unmask_ratio: f64,
    mask_seed: u64,
    pool: &ThreadPool,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = pool.install(|| {
        data.par_iter()
            .enumerate()
            .map(|(i, p)| {
                let ps = p.mask(&mask_for(mask_seed, u64::MAX, i, unmask_ratio))?;
                Ok(model.eval_loss(&ps)?.as_f64())
            })
            .collect()
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Labeled example for classification.
#[derive(Clone, Debug)]
pub struct Labeled<T> {
    pub patches: Patches<T>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Whether the backbone is trained or held fixed (linear probe).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Full,
    FrozenEncoder,
}

impl FinetuneMode {
    pub fn trainable(self, name: &str) -> bool {
        self == FinetuneMode::Full || name.starts_with("cls.")
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// Mean cross-entropy and accuracy (`correct / total`) on `data`.
pub fn evaluate_classifier<T: Scalar>(
    model: &Classifier<T>,
    data: &[Labeled<T>],
    pool: &ThreadPool,
) -> Result<(f64, f64)> {
    let out: Vec<Result<(f64, bool)>> = pool.install(|| {
        data.par_iter()
            .map(|ex| {
                let mut tape = Tape::new();
                let p = model.store.bind_with(&mut tape, |_| false);
                let logits = model.logits(&mut tape, &p, &ex.patches)?;
                let hit = argmax(tape.value(logits).data()) == ex.label;
                let l = tape.cross_entropy(logits, &[ex.label])?;
                Ok((tape.value(l).item().as_f64(), hit))
            })
            .collect()
    });
    let (mut loss, mut correct) = (0.0, 0usize);
    for r in out {
        let (l, h) = r?;
        loss += l;
        correct += h as usize;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// One shuffled epoch of supervised training followed by validation.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classifier_epoch<T: Scalar>(
    model: &mut Classifier<T>,
    opt: &mut Optimizer<T>,
    train: &[Labeled<T>],
    val: &[Labeled<T>],
    cfg: &TrainConfig,
    mode: FinetuneMode,
    augment_data: bool,
    epoch: usize,
    pool: &ThreadPool,
) -> Result<EpochMetrics> {
    if let Some(bad) = train.iter().chain(val).find(|e| e.label >= model.cfg.classes) {
        return Err(Error::Data(format!(
            "label {} out of range for {} classes",
            bad.label, model.cfg.classes
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch as u64])));
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let m: &Classifier<T> = model;
        let results: Vec<Result<(f64, bool, Vec<Tensor<T>>)>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&i| {
                    let ex = &train[i];
                    let patches = if augment_data {
                        augment(&ex.patches, derive_seed(cfg.seed, &[3, epoch as u64, i as u64]))
                    } else {
                        ex.patches.clone()
                    };
                    let mut tape = Tape::new();
                    let p = m.store.bind_with(&mut tape, |n| mode.trainable(n));
                    let logits = m.logits(&mut tape, &p, &patches)?;
                    let hit = argmax(tape.value(logits).data()) == ex.label;
                    let loss = tape.cross_entropy(logits, &[ex.label])?;
                    let value = tape.value(loss).item().as_f64();
                    check_loss(value, opt.state.step as usize)?;
                    let mut g = tape.backward(loss)?;
                    Ok((value, hit, p.gradients(&mut g, &m.store)))
                })
                .collect()
        });
        let mut grads = Vec::with_capacity(results.len());
        for r in results {
            let (l, h, g) = r?;
            loss_sum += l;
            correct += h as usize;
            grads.push(g);
        }
        let grads = reshape_like(reduce_gradients(grads)?, &model.store)?;
        opt.step(&mut model.store, &grads, |n| mode.trainable(n))?;
    }
    let n = train.len().max(1) as f64;
    let (val_loss, val_acc) = evaluate_classifier(model, val, pool)?;
    Ok(EpochMetrics {
        epoch,
        train_loss: loss_sum / n,
        train_acc: correct as f64 / n,
        val_loss,
        val_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{synth_shape, ShapeKind};
    use crate::mpm::config::ModelConfig;
    use crate::mpm::patch::patchify;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        for (k, v) in [
            ("encoder.d", "16"),
            ("encoder.n_layers", "1"),
            ("encoder.d_h", "8"),
            ("encoder.d_ffn", "32"),
            ("encoder.k_local", "3"),
            ("decoder.m_layers", "1"),
            ("decoder.d_inner", "16"),
            ("decoder.d_state", "4"),
            ("decoder.d_h", "8"),
            ("decoder.k_local", "3"),
            ("embed_hidden", "16"),
            ("pe_hidden", "16"),
            ("head_hidden", "16"),
            ("classes", "2"),
            ("k_group", "8"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    fn patches(kind: ShapeKind, seed: u64) -> Patches<f32> {
        patchify(&synth_shape(kind, 128, 0.01, seed).unwrap(), 16, 8).unwrap()
    }

    fn train_cfg(epochs: usize, batch: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            warmup_epochs: 0,
            epochs,
            batch_size: batch,
            weight_decay: 0.0,
            ..TrainConfig::pretrain()
        }
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let a = derive_seed(1, &[0, 1]);
        assert_ne!(a, derive_seed(1, &[1, 0]));
        assert_ne!(a, derive_seed(2, &[0, 1]));
        assert_eq!(a, derive_seed(1, &[0, 1]));
    }

    #[test]
    fn repeated_batch_overfits() {
        let cfg = tiny();
        let mut model = PretrainModel::<f32>::new(&cfg, 0).unwrap();
        let batch: Vec<PatchSet<f32>> = [ShapeKind::Torus, ShapeKind::Cube]
            .iter()
            .enumerate()
            .map(|(i, &k)| patches(k, i as u64).mask(&MaskSpec::new(0.4, i as u64)).unwrap())
            .collect();
        let tc = train_cfg(1, 2, 3e-3);
        let mut opt = Optimizer::new(&model.store, &tc, 200);
        let pool = thread_pool(1).unwrap();
        let first = pretrain_step(&mut model, &mut opt, &batch, &pool).unwrap();
        let mut last = first;
        for _ in 1..200 {
            last = pretrain_step(&mut model, &mut opt, &batch, &pool).unwrap();
        }
        assert!(last <= 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn identical_seeds_identical_curves_across_worker_counts() {
        let cfg = tiny();
        let data: Vec<Patches<f32>> = (0..6).map(|i| patches(ShapeKind::ALL[i % 8], i as u64)).collect();
        let tc = train_cfg(2, 3, 1e-3);
        let run = |workers: usize| {
            let mut model = PretrainModel::<f32>::new(&cfg, 5).unwrap();
            let mut opt = Optimizer::new(&model.store, &tc, 2);
            let pool = thread_pool(workers).unwrap();
            (0..2)
                .map(|e| pretrain_epoch(&mut model, &mut opt, &data, &tc, 0.4, e, &pool).unwrap().to_bits())
                .collect::<Vec<_>>()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
    }

    #[test]
    fn separable_pair_is_learned() {
        let cfg = tiny();
        let mut model = Classifier::<f32>::new(&cfg, 1).unwrap();
        let make = |k: ShapeKind, label: usize, s: u64| Labeled { patches: patches(k, s), label };
        let train: Vec<_> = (0..12)
            .map(|i| if i % 2 == 0 { make(ShapeKind::Sphere, 0, i) } else { make(ShapeKind::PlaneCross, 1, i) })
            .collect();
        let val: Vec<_> = (100..108)
            .map(|i| if i % 2 == 0 { make(ShapeKind::Sphere, 0, i) } else { make(ShapeKind::PlaneCross, 1, i) })
            .collect();
        let tc = train_cfg(20, 4, 2e-3);
        let mut opt = Optimizer::new(&model.store, &tc, 3);
        let pool = thread_pool(1).unwrap();
        let mut last = None;
        for e in 0..20 {
            let m = finetune_classifier_epoch(&mut model, &mut opt, &train, &val, &tc, FinetuneMode::Full, false, e, &pool).unwrap();
            assert!((0.0..=1.0).contains(&m.val_acc) && (0.0..=1.0).contains(&m.train_acc));
            last = Some(m);
        }
        assert_eq!(last.unwrap().val_acc, 1.0);
    }

    #[test]
    fn frozen_encoder_trains_only_the_head() {
        let cfg = tiny();
        let mut model = Classifier::<f32>::new(&cfg, 2).unwrap();
        let before = model.store.clone();
        let train: Vec<_> = (0..8)
            .map(|i| Labeled { patches: patches(ShapeKind::ALL[i % 2 * 3], i as u64), label: i % 2 })
            .collect();
        let tc = train_cfg(10, 4, 1e-3);
        let mut opt = Optimizer::new(&model.store, &tc, 2);
        let pool = thread_pool(1).unwrap();
        let losses: Vec<f64> = (0..10)
            .map(|e| {
                finetune_classifier_epoch(&mut model, &mut opt, &train, &train, &tc, FinetuneMode::FrozenEncoder, false, e, &pool)
                    .unwrap()
                    .train_loss
            })
            .collect();
        assert!(losses[9] < losses[0], "{losses:?}");
        for ((name, a), (_, b)) in model.store.iter().zip(before.iter()) {
            assert_eq!(a == b, !name.starts_with("cls."), "{name}");
        }
    }

    #[test]
    fn bad_label_is_a_data_error() {
        let cfg = tiny();
        let mut model = Classifier::<f32>::new(&cfg, 2).unwrap();
        let train = vec![Labeled { patches: patches(ShapeKind::Cube, 0), label: 5 }];
        let tc = train_cfg(1, 1, 1e-3);
        let mut opt = Optimizer::new(&model.store, &tc, 1);
        let err = finetune_classifier_epoch(&mut model, &mut opt, &train, &[], &tc, FinetuneMode::Full, false, 0, &thread_pool(1).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn nan_loss_reports_divergence() {
        let cfg = tiny();
        let mut model = PretrainModel::<f32>::new(&cfg, 0).unwrap();
        let id = model.store.id("recon.fc2.bias").unwrap();
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, Tensor::full(&shape, f32::NAN)).unwrap();
        let batch = vec![patches(ShapeKind::Cube, 0).mask(&MaskSpec::new(0.4, 0)).unwrap()];
        let tc = train_cfg(1, 1, 1e-3);
        let mut opt = Optimizer::new(&model.store, &tc, 1);
        let err = pretrain_step(&mut model, &mut opt, &batch, &thread_pool(1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }
}
