use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Init, Linear, ParamId};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmMode {
    /// Δ, B, C computed from the input stream; output gated by `silu(z)`.
    Selective,
    /// Δ, B, C taken from the biases alone and no gate, so the sublayer is
    /// a linear causal map of its input.
    FrozenLinear,
}

impl fmt::Display for SsmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SsmMode::Selective => "selective",
            SsmMode::FrozenLinear => "frozen-linear",
        })
    }
}

impl FromStr for SsmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "selective" => Ok(SsmMode::Selective),
            "frozen-linear" => Ok(SsmMode::FrozenLinear),
            other => Err(Error::Config(format!("unknown ssm mode '{other}'"))),
        }
    }
}

/// Diagonal selective state-space sublayer.
///
/// `[xs, z] = x·W_in`, `Δ = softplus(xs·w_Δ + b_Δ)`, `B = xs·W_B + b_B`,
/// `C = xs·W_C + b_C`, `A = −exp(a_log)`; the scan runs
/// `h_t = exp(Δ_t A) h_{t−1} + Δ_t B_t xs_t`, `y_t = C_t h_t`, and the output
/// is `(y ⊙ silu(z))·W_out`.
#[derive(Clone, Debug)]
pub struct SsmLayer {
    pub in_proj: Linear,
    pub a_log: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub x_to_b: Linear,
    pub x_to_c: Linear,
    pub out_proj: Linear,
    pub d: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmLayer {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        d: usize,
        d_inner: usize,
        d_state: usize,
    ) -> Result<Self> {
        if d == 0 || d_inner == 0 || d_state == 0 {
            return Err(Error::Config(format!(
                "ssm widths must be positive (d {d}, d_inner {d_inner}, d_state {d_state})"
            )));
        }
        let in_proj = Linear::new(init, &format!("{name}.in_proj"), d, 2 * d_inner, false)?;
        let a_log = init.tensor(
            &format!("{name}.a_log"),
            Tensor::from_fn(&[d_inner, d_state], |i| T::of(((i % d_state) + 1) as f64).ln()),
        )?;
        let w_delta = init.xavier(&format!("{name}.delta.weight"), d_inner, 1)?;
        let dts: Vec<T> = (0..d_inner)
            .map(|_| {
                let log_dt = init.rng().random_range((1e-3f64).ln()..(1e-1f64).ln());
                T::of(inverse_softplus(log_dt.exp()))
            })
            .collect();
        let b_delta = init.tensor(&format!("{name}.delta.bias"), Tensor::new(&[d_inner], dts)?)?;
        Ok(Self {
            in_proj,
            a_log,
            w_delta,
            b_delta,
            x_to_b: Linear::new(init, &format!("{name}.x_to_b"), d_inner, d_state, true)?,
            x_to_c: Linear::new(init, &format!("{name}.x_to_c"), d_inner, d_state, true)?,
            out_proj: Linear::new(init, &format!("{name}.out_proj"), d_inner, d, false)?,
            d,
            d_inner,
            d_state,
        })
    }

    pub fn num_params(&self) -> usize {
        self.in_proj.num_params()
            + 2 * self.d_inner * self.d_state
            + 2 * self.d_inner
            + self.x_to_b.num_params()
            + self.x_to_c.num_params()
            + self.out_proj.num_params()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var, mode: SsmMode) -> Result<Var> {
        let n = tape.value(x).rows();
        let di = self.d_inner;
        let xz = self.in_proj.forward(tape, p, x)?;
        let xs = tape.slice_cols(xz, 0, di)?;
        let a = tape.exp(p.var(self.a_log));
        let a = tape.scale(a, -T::one());
        let y = match mode {
            SsmMode::Selective => {
                let dl = tape.matmul(xs, p.var(self.w_delta))?;
                let ones = tape.constant(Tensor::ones(&[1, di]));
                let dl = tape.matmul(dl, ones)?;
                let dl = tape.add_row(dl, p.var(self.b_delta))?;
                let delta = tape.softplus(dl);
                let b = self.x_to_b.forward(tape, p, xs)?;
                let c = self.x_to_c.forward(tape, p, xs)?;
                let y = tape.ssm_scan(xs, delta, a, b, c)?;
                let z = tape.slice_cols(xz, di, di)?;
                let gate = tape.silu(z);
                tape.mul(y, gate)?
            }
            SsmMode::FrozenLinear => {
                let ones = tape.constant(Tensor::ones(&[n, 1]));
                let broadcast = |tape: &mut Tape<T>, id: ParamId, w: usize| -> Result<Var> {
                    let row = tape.reshape(p.var(id), &[1, w])?;
                    tape.matmul(ones, row)
                };
                let dl = broadcast(tape, self.b_delta, di)?;
                let delta = tape.softplus(dl);
                let bias = |l: &Linear| l.bias.ok_or_else(|| Error::Contract("ssm B/C maps need biases".into()));
                let b = broadcast(tape, bias(&self.x_to_b)?, self.d_state)?;
                let c = broadcast(tape, bias(&self.x_to_c)?, self.d_state)?;
                tape.ssm_scan(xs, delta, a, b, c)?
            }
        };
        self.out_proj.forward(tape, p, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck_store, probe_loss, ParamStore};
    use crate::tensor::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn build(d: usize, di: usize, ds: usize, seed: u64) -> (ParamStore<f64>, SsmLayer) {
        let mut store = ParamStore::new();
        let ssm = SsmLayer::new(&mut Init::new(&mut store, seed), "ssm", d, di, ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for id in store.ids().collect::<Vec<_>>() {
            let v = Tensor::from_fn(store.get(id).shape(), |_| rng.random_range(-0.5..0.5));
            store.set(id, v).unwrap();
        }
        (store, ssm)
    }

    fn run(store: &ParamStore<f64>, ssm: &SsmLayer, x: &Tensor<f64>, mode: SsmMode) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = ssm.forward(&mut tape, &p, xv, mode).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn scalar_frozen_recurrence() {
        let (mut store, ssm) = build(1, 1, 1, 0);
        let set = |s: &mut ParamStore<f64>, id: ParamId, v: &[f64]| {
            let shape = s.get(id).shape().to_vec();
            s.set(id, Tensor::new(&shape, v.to_vec()).unwrap()).unwrap();
        };
        set(&mut store, ssm.in_proj.weight, &[1.0, 0.0]);
        set(&mut store, ssm.a_log, &[0.0]);
        set(&mut store, ssm.b_delta, &[0.0]);
        set(&mut store, ssm.x_to_b.bias.unwrap(), &[1.0 / std::f64::consts::LN_2]);
        set(&mut store, ssm.x_to_c.bias.unwrap(), &[1.0]);
        set(&mut store, ssm.out_proj.weight, &[1.0]);
        let x = Tensor::new(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let y = run(&store, &ssm, &x, SsmMode::FrozenLinear);
        for (got, want) in y.data().iter().zip([1.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (store, ssm) = build(4, 6, 3, 1);
        let x = Tensor::zeros(&[5, 4]);
        for mode in [SsmMode::Selective, SsmMode::FrozenLinear] {
            assert_eq!(run(&store, &ssm, &x, mode).max_abs(), 0.0);
        }
    }

    #[test]
    fn frozen_mode_is_linear() {
        let (store, ssm) = build(4, 6, 3, 2);
        let (x, y) = (random(&[9, 4], 3), random(&[9, 4], 4));
        let (alpha, beta) = (0.7, -1.3);
        let mix = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
        let lhs = run(&store, &ssm, &mix, SsmMode::FrozenLinear);
        let fx = run(&store, &ssm, &x, SsmMode::FrozenLinear);
        let fy = run(&store, &ssm, &y, SsmMode::FrozenLinear);
        let rhs = fx.zip_map(&fy, |a, b| alpha * a + beta * b).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-8);
        let sel = run(&store, &ssm, &mix, SsmMode::Selective);
        let sx = run(&store, &ssm, &x, SsmMode::Selective);
        let sy = run(&store, &ssm, &y, SsmMode::Selective);
        assert!(sel.max_abs_diff(&sx.zip_map(&sy, |a, b| alpha * a + beta * b).unwrap()) > 1e-6);
    }

    #[test]
    fn selective_scan_is_causal() {
        let (store, ssm) = build(4, 5, 3, 5);
        let x = random(&[12, 4], 6);
        let full = run(&store, &ssm, &x, SsmMode::Selective);
        for t in 1..12 {
            let head = run(&store, &ssm, &x.select_rows(&(0..t).collect::<Vec<_>>()).unwrap(), SsmMode::Selective);
            assert_eq!(head.data(), &full.data()[..t * 4]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, mode) in [SsmMode::Selective, SsmMode::FrozenLinear].into_iter().enumerate() {
            let (store, ssm) = build(3, 4, 2, 7 + i as u64);
            let report = gradcheck_store(
                &store,
                &[random(&[6, 3], 9)],
                |tape, p, v| {
                    let y = ssm.forward(tape, p, v[0], mode)?;
                    probe_loss(tape, y, 3)
                },
                &GradCheck::default(),
            )
            .unwrap();
            assert!(report.pass, "{mode}: {report:?}");
        }
    }

    #[test]
    fn default_init_is_stable() {
        let mut store = ParamStore::<f64>::new();
        let ssm = SsmLayer::new(&mut Init::new(&mut store, 3), "ssm", 4, 8, 16).unwrap();
        assert!(store.get(ssm.a_log).data().iter().all(|v| (-v.exp()) < 0.0));
        let d = store.get(ssm.b_delta).data();
        assert!(d.iter().all(|&b| {
            let dt = b.exp().ln_1p();
            (1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt)
        }));
    }
}
