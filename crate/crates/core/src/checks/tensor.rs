use rand::Rng;

use super::{random, rng, Outcome};
use crate::error::Result;
use crate::nn::probe_loss;
use crate::tensor::{finite_difference_check, GradCheck, Tape, Tensor, Var};

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    f: OpFn,
}

fn away_from_zero(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

const OPS: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], f: |t, v| t.matmul(v[0], v[1]) },
    OpCase { name: "matmul_nt", shapes: &[&[3, 4], &[2, 4]], f: |t, v| t.matmul_nt(v[0], v[1]) },
    OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], f: |t, v| t.add(v[0], v[1]) },
    OpCase { name: "sub", shapes: &[&[3, 4], &[3, 4]], f: |t, v| t.sub(v[0], v[1]) },
    OpCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], f: |t, v| t.mul(v[0], v[1]) },
    OpCase { name: "add_row", shapes: &[&[3, 4], &[4]], f: |t, v| t.add_row(v[0], v[1]) },
    OpCase { name: "scale", shapes: &[&[3, 4]], f: |t, v| Ok(t.scale(v[0], 1.7)) },
    OpCase { name: "exp", shapes: &[&[3, 4]], f: |t, v| Ok(t.exp(v[0])) },
    OpCase { name: "gelu", shapes: &[&[3, 4]], f: |t, v| Ok(t.gelu(v[0])) },
    OpCase { name: "softplus", shapes: &[&[3, 4]], f: |t, v| Ok(t.softplus(v[0])) },
    OpCase { name: "silu", shapes: &[&[3, 4]], f: |t, v| Ok(t.silu(v[0])) },
    OpCase {
        name: "relu",
        shapes: &[&[3, 4]],
        f: |t, v| {
            let x = away_from_zero(t.value(v[0]));
            let shift = t.constant(x.zip_map(t.value(v[0]), |a, b| a - b)?);
            let x = t.add(v[0], shift)?;
            Ok(t.relu(x))
        },
    },
    OpCase {
        name: "layer_norm",
        shapes: &[&[3, 5], &[5], &[5]],
        f: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    },
    OpCase {
        name: "softmax_rows",
        shapes: &[&[3, 4]],
        f: |t, v| {
            let mut m = Tensor::zeros(&[3, 4]).into_data();
            m[1] = f64::NEG_INFINITY;
            m[7] = f64::NEG_INFINITY;
            m[8] = f64::NEG_INFINITY;
            t.softmax_rows(v[0], Some(&Tensor::new(&[3, 4], m)?))
        },
    },
    OpCase { name: "gather_rows", shapes: &[&[4, 3]], f: |t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 1]) },
    OpCase { name: "segment_max", shapes: &[&[6, 3]], f: |t, v| t.segment_max(v[0], 2) },
    OpCase { name: "segment_mean", shapes: &[&[6, 3]], f: |t, v| t.segment_mean(v[0], 3) },
    OpCase { name: "concat_cols", shapes: &[&[3, 2], &[3, 3]], f: |t, v| t.concat_cols(&[v[0], v[1]]) },
    OpCase { name: "concat_rows", shapes: &[&[2, 3], &[1, 3]], f: |t, v| t.concat_rows(&[v[0], v[1]]) },
    OpCase { name: "slice_cols", shapes: &[&[3, 5]], f: |t, v| t.slice_cols(v[0], 1, 3) },
    OpCase { name: "slice_rows", shapes: &[&[5, 3]], f: |t, v| t.slice_rows(v[0], 2, 2) },
    OpCase { name: "reshape", shapes: &[&[3, 4]], f: |t, v| t.reshape(v[0], &[4, 3]) },
    OpCase {
        name: "sum",
        shapes: &[&[3, 4]],
        f: |t, v| {
            let s = t.sum(v[0]);
            Ok(t.scale(s, 0.01))
        },
    },
    OpCase {
        name: "mean",
        shapes: &[&[3, 4]],
        f: |t, v| {
            let s = t.mean(v[0]);
            Ok(t.scale(s, 0.01))
        },
    },
    OpCase { name: "chamfer", shapes: &[&[6, 3], &[8, 3]], f: |t, v| t.chamfer(v[0], v[1], 2) },
    OpCase {
        name: "ssm_scan",
        shapes: &[&[5, 3], &[5, 3], &[3, 2], &[5, 2], &[5, 2]],
        f: |t, v| {
            let delta = t.softplus(v[1]);
            let a = t.exp(v[2]);
            let a = t.scale(a, -1.0);
            t.ssm_scan(v[0], delta, a, v[3], v[4])
        },
    },
    OpCase { name: "cross_entropy", shapes: &[&[3, 4]], f: |t, v| t.cross_entropy(v[0], &[1, 0, 3]) },
    OpCase { name: "linear", shapes: &[&[3, 4], &[4, 2], &[2]], f: |t, v| t.linear(v[0], v[1], Some(v[2])) },
];

pub(super) fn grad_ops(opts: &super::CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut parts = Vec::new();
    for op in OPS {
        let mut worst = 0.0f64;
        let mut coords = 0;
        for s in 0..5u64 {
            let mut r = rng(opts.seed ^ (s * 7919 + 1));
            let params: Vec<Tensor<f64>> = op.shapes.iter().map(|sh| random(&mut r, sh)).collect();
            let seed = r.random();
            let rep = finite_difference_check(
                |tape, vars| {
                    let y = (op.f)(tape, vars)?;
                    if tape.value(y).len() == 1 {
                        Ok(y)
                    } else {
                        probe_loss(tape, y, seed)
                    }
                },
                &params,
                &cfg,
            )?;
            worst = worst.max(rep.max_rel_err);
            coords += rep.checked;
        }
        parts.push((
            op.name.to_string(),
            Outcome::below(worst, cfg.tol, format!("max rel err over 5 seeds ({coords} coordinates)")),
        ));
    }
    Ok(Outcome::merge(parts))
}

pub(super) fn matmul_identity(opts: &super::CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut mismatches = 0;
    for _ in 0..opts.trials.max(1) {
        let (m, k, n) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..9));
        let a = random(&mut r, &[m, k]);
        let b = random(&mut r, &[k, n]);
        let lhs = a.matmul(&Tensor::eye(k))?.matmul(&b)?;
        let rhs = a.matmul(&b)?;
        if lhs.data().iter().zip(rhs.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatches += 1;
        }
    }
    Ok(Outcome::exact(mismatches, format!("{} random products", opts.trials.max(1))))
}

pub(super) fn softmax(opts: &super::CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials.max(1) {
        let (n, m) = (r.random_range(1..8), r.random_range(1..12));
        let x = random(&mut r, &[n, m]).scale(5.0);
        let c: Vec<f64> = (0..n).map(|_| r.random_range(-50.0..50.0)).collect();
        let shifted = Tensor::from_fn(&[n, m], |i| x.data()[i] + c[i / m]);
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let sa = tape.softmax_rows(a, None)?;
        let sb = tape.softmax_rows(b, None)?;
        let (va, vb) = (tape.value(sa), tape.value(sb));
        for i in 0..n {
            worst = worst.max((va.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        worst = worst.max(va.max_abs_diff(vb));
    }
    Ok(Outcome::below(worst, 1e-12, "max |row sum − 1| and shift difference"))
}

pub(super) fn backward_repeatable(opts: &super::CheckOptions) -> Result<Outcome> {
    let run = || -> Result<Vec<Tensor<f64>>> {
        let mut r = rng(opts.seed);
        let x = random(&mut r, &[6, 5]);
        let w1 = random(&mut r, &[5, 7]);
        let w2 = random(&mut r, &[7, 3]);
        let mut tape = Tape::new();
        let (xv, a, b) = (tape.leaf(x), tape.leaf(w1), tape.leaf(w2));
        let h = tape.matmul(xv, a)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, b)?;
        let h = tape.softmax_rows(h, None)?;
        let loss = tape.cross_entropy(h, &[0, 1, 2, 0, 1, 2])?;
        let mut g = tape.backward(loss)?;
        Ok([xv, a, b].iter().filter_map(|&v| g.take(v)).collect())
    };
    let (first, second) = (run()?, run()?);
    let mismatches = first
        .iter()
        .zip(&second)
        .map(|(a, b)| a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count())
        .sum::<usize>()
        + first.len().abs_diff(second.len());
    Ok(Outcome::exact(mismatches, "gradient bits that differ between two builds"))
}
