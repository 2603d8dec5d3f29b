//! Named parameters and the small layers every model is assembled from.
//!
//! A [`ParamStore`] owns the weights. A forward pass binds the store onto a
//! [`Tape`], producing a [`Binding`] that maps each [`ParamId`] to a tape
//! variable; layers only ever hold ids.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{finite_difference_check, GradCheck, GradCheckReport, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim(
                "ParamStore::set",
                format!(
                    "{}: {:?} vs {:?}",
                    self.names[id.0],
                    value.shape(),
                    self.values[id.0].shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites every parameter with uniform noise in `[-scale, scale]`.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut self.values {
            *v = Tensor::from_fn(v.shape(), |_| T::of(rng.random_range(-scale..=scale)));
        }
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, v) in self.names.iter().zip(&mut self.values) {
            if name.starts_with(prefix) {
                *v = Tensor::zeros(v.shape());
            }
        }
    }

    /// Puts every parameter on `tape`; those for which `trainable` holds
    /// become gradient-tracked leaves, the rest constants.
    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| {
                if trainable(name) {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        self.bind_with(tape, |_| true)
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// One gradient per parameter, zero where the loss does not depend on it.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// Finite-difference check of `f` with respect to every parameter in
/// `store` and every tensor in `inputs`.
pub fn gradcheck_store<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    cfg: &GradCheck,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Binding, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let mut params = store.values().to_vec();
    params.extend(inputs.iter().cloned());
    finite_difference_check(
        |tape, vars| {
            let b = Binding {
                vars: vars[..n].to_vec(),
            };
            f(tape, &b, &vars[n..])
        },
        &params,
        cfg,
    )
}

/// `c · mean(y ⊙ R)` for a seeded uniform `R`, as a gradient-check probe.
///
/// Keeping the loss small puts round-off on structurally zero gradients
/// below the relative-error floor.
pub fn probe_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(tape.shape(y), |_| T::of(rng.random_range(-1.0..1.0)));
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    let m = tape.mean(prod);
    Ok(tape.scale(m, T::of(1e-2)))
}

/// Seeded initializer that registers parameters under a name prefix.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier-uniform `d_in×d_out` weight.
    pub fn xavier(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<ParamId> {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[d_in, d_out], |_| T::of(rng.random_range(-limit..=limit)));
        self.store.add(name, w)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let w = Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..=hi)));
        self.store.add(name, w)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, T::of(value)))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.store.add(name, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Affine map `x·W + b` with `W: d_in×d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.xavier(&format!("{name}.weight"), d_in, d_out)?;
        let bias = if bias {
            Some(init.constant(&format!("{name}.bias"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[d], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[d], 0.0)?,
            d,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), T::of(LN_EPS))
    }
}

/// Two affine layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), d_in, hidden, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, d_out, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_param_count_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 0);
        let l = Linear::new(&mut init, "fc", 7, 5, true).unwrap();
        assert_eq!(l.num_params(), 7 * 5 + 5);
        assert_eq!(store.num_scalars(), 40);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn linear_matches_direct_evaluation() {
        let mut store = ParamStore::<f64>::new();
        let l = Linear::new(&mut Init::new(&mut store, 1), "fc", 3, 2, true).unwrap();
        store.randomize(2, 1.0);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = l.forward(&mut tape, &p, xv).unwrap();
        let (w, b) = (store.get(l.weight), store.get(l.bias.unwrap()));
        for j in 0..2 {
            let expect: f64 = (0..3).map(|i| x.at(0, i) * w.at(i, j)).sum::<f64>() + b.data()[j];
            assert!((tape.value(y).at(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_params_get_no_gradient_leaf() {
        let mut store = ParamStore::<f64>::new();
        let l = Linear::new(&mut Init::new(&mut store, 1), "fc", 2, 2, true).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_with(&mut tape, |n| n.ends_with("bias"));
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let y = l.forward(&mut tape, &p, x).unwrap();
        let loss = tape.sum(y);
        let mut g = tape.backward(loss).unwrap();
        let grads = p.gradients(&mut g, &store);
        assert_eq!(grads[l.weight.index()].max_abs(), 0.0);
        assert_eq!(grads[l.bias.unwrap().index()].data(), &[1.0, 1.0]);
    }
}
