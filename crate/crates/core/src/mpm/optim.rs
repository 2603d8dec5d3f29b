use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::TrainConfig;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            step: 0,
            m: store.values().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: store.values().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One AdamW step with learning rate `lr`: decoupled decay
/// `p ← p(1 − lr·wd)`, then `p ← p − lr·m̂/(√v̂ + eps)` with bias-corrected
/// moments.
pub fn adamw_update<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hyper: &AdamW,
    lr: f64,
) -> Result<()> {
    adamw_update_where(store, grads, state, hyper, lr, |_| true)
}

/// [`adamw_update`] restricted to parameters whose name satisfies
/// `trainable`; the rest are neither decayed nor moved.
pub fn adamw_update_where<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hyper: &AdamW,
    lr: f64,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::dim(
            "adamw_update",
            format!("{} grads / {} moments for {} params", grads.len(), state.m.len(), store.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - hyper.beta1), T::of(1.0 - hyper.beta2));
    let decay = T::of(1.0 - lr * hyper.weight_decay);
    let step = T::of(lr / bc1);
    let rbc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(hyper.eps);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if !trainable(store.name(id)) {
            continue;
        }
        let g = &grads[i];
        if g.shape() != store.get(id).shape() {
            return Err(Error::dim(
                "adamw_update",
                format!("gradient {:?} for {} {:?}", g.shape(), store.name(id), store.get(id).shape()),
            ));
        }
        let mut p = store.get(id).data().to_vec();
        let mut m = std::mem::replace(&mut state.m[i], Tensor::zeros(&[0])).into_data();
        let mut v = std::mem::replace(&mut state.v[i], Tensor::zeros(&[0])).into_data();
        for (((pj, mj), vj), &gj) in p.iter_mut().zip(&mut m).zip(&mut v).zip(g.data()) {
            *mj = b1 * *mj + one_b1 * gj;
            *vj = b2 * *vj + one_b2 * gj * gj;
            *pj = *pj * decay - step * *mj / (vj.sqrt() * rbc2 + eps);
        }
        let shape = g.shape().to_vec();
        state.m[i] = Tensor::new(&shape, m)?;
        state.v[i] = Tensor::new(&shape, v)?;
        store.set(id, Tensor::new(&shape, p)?)?;
    }
    Ok(())
}

/// Linear warmup then cosine decay to `min_lr`, indexed by optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            base_lr: cfg.lr,
            min_lr: cfg.min_lr,
            warmup_steps: (cfg.warmup_epochs * steps_per_epoch) as u64,
            total_steps: (cfg.epochs * steps_per_epoch).max(1) as u64,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    fn hyper(wd: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(&[1.0, -2.0, 3.5]);
        let mut st = AdamState::new(&s);
        adamw_update(&mut s, &[Tensor::zeros(&[3])], &mut st, &hyper(0.0), 1e-2).unwrap();
        assert_eq!(s.values()[0].data(), &[1.0, -2.0, 3.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(&[0.5, 0.5, 0.5, 0.5]);
        let mut st = AdamState::new(&s);
        let g = Tensor::new(&[4], vec![3.0, -0.01, 250.0, -7.0]).unwrap();
        adamw_update(&mut s, std::slice::from_ref(&g), &mut st, &hyper(0.0), 1e-3).unwrap();
        for (p, gj) in s.values()[0].data().iter().zip(g.data()) {
            let moved = 0.5 - p;
            assert!((moved - 1e-3 * gj.signum()).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn decay_shrinks_by_one_minus_lr_wd() {
        let mut s = store(&[2.0, -4.0]);
        let mut st = AdamState::new(&s);
        adamw_update(&mut s, &[Tensor::zeros(&[2])], &mut st, &hyper(0.05), 1e-2).unwrap();
        let f = 1.0 - 1e-2 * 0.05;
        assert!((s.values()[0].data()[0] - 2.0 * f).abs() < 1e-15);
        assert!((s.values()[0].data()[1] + 4.0 * f).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule {
            base_lr: 1.0,
            min_lr: 0.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(109) < 1e-3);
        assert!((0..200).all(|t| s.lr(t) >= 0.0));
    }
}
