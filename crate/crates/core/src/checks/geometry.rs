use rand::Rng;

use super::{random, random_points, rng, CheckOptions, Outcome};
use crate::error::Result;
use crate::geometry::{
    chamfer_l2, farthest_point_sample, hilbert_order, knn_indices, order_by_axis, synth_shape, Axis, ShapeKind,
};
use crate::tensor::{finite_difference_check, GradCheck, GradCheckReport, Tape, Tensor};

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(super) fn fps(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let l = r.random_range(2..=64);
        let n = r.random_range(1..=l);
        let pts = random_points(&mut r, l);
        let (centers, idx) = farthest_point_sample(&pts, n, 0)?;
        if idx[0] != 0 || centers.rows() != n {
            violations += 1;
            continue;
        }
        for i in 1..n {
            let dist = |q: usize| idx[..i].iter().map(|&s| d2(pts.row(q), pts.row(s))).fold(f64::INFINITY, f64::min);
            let chosen = dist(idx[i]);
            let best = (0..l).filter(|q| !idx[..i].contains(q)).map(dist).fold(0.0, f64::max);
            if chosen < best {
                violations += 1;
                worst = worst.max(best - chosen);
            }
            if centers.row(i) != pts.row(idx[i]) {
                violations += 1;
            }
        }
    }
    Ok(Outcome::exact(violations, format!("{} clouds, L ≤ 64; largest shortfall {worst:e}", opts.trials)))
}

pub(super) fn knn(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut mismatches = 0;
    for _ in 0..opts.trials {
        let (q, m) = (r.random_range(1..=64), r.random_range(1..=64));
        let k = r.random_range(1..=m);
        let queries = random_points(&mut r, q);
        let mut keys = random_points(&mut r, m);
        if m > 2 {
            let dup = keys.row(0).to_vec();
            keys = Tensor::from_fn(&[m, 3], |i| if i / 3 == m - 1 { dup[i % 3] } else { keys.data()[i] });
        }
        let table = knn_indices(&queries, &keys, k)?;
        for qi in 0..q {
            let mut all: Vec<usize> = (0..m).collect();
            all.sort_by(|&a, &b| {
                d2(queries.row(qi), keys.row(a))
                    .total_cmp(&d2(queries.row(qi), keys.row(b)))
                    .then(a.cmp(&b))
            });
            if table.row(qi) != &all[..k] {
                mismatches += 1;
            }
        }
    }
    Ok(Outcome::exact(mismatches, format!("{} instances, Q, M ≤ 64", opts.trials)))
}

fn chamfer_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let side = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let mut total = 0.0;
        for i in 0..x.rows() {
            let mut best = f64::INFINITY;
            for j in 0..y.rows() {
                best = best.min(d2(x.row(i), y.row(j)));
            }
            total += best;
        }
        total / x.rows() as f64
    };
    side(a, b) + side(b, a)
}

fn rotation(r: &mut impl Rng) -> Tensor<f64> {
    let (a, b, c): (f64, f64, f64) = (r.random_range(0.0..6.3), r.random_range(0.0..6.3), r.random_range(0.0..6.3));
    let rz = Tensor::new(&[3, 3], vec![a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0]).unwrap();
    let ry = Tensor::new(&[3, 3], vec![b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos()]).unwrap();
    let rx = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, c.cos(), -c.sin(), 0.0, c.sin(), c.cos()]).unwrap();
    rz.matmul(&ry).unwrap().matmul(&rx).unwrap()
}

pub(super) fn chamfer(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let (mut oracle_err, mut rot_err, mut dup, mut negative) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for _ in 0..opts.trials {
        let (n, m) = (r.random_range(1..=8), r.random_range(1..=8));
        let a = random_points(&mut r, n);
        let b = random_points(&mut r, m);
        let v = chamfer_l2(&a, &b)?;
        oracle_err = oracle_err.max((v - chamfer_oracle(&a, &b)).abs());
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let t = tape.chamfer(av, bv, 1)?;
        oracle_err = oracle_err.max((tape.value(t).item() - v).abs());
        negative += (v < 0.0) as usize;
        let rot = rotation(&mut r);
        rot_err = rot_err.max((chamfer_l2(&a.matmul(&rot)?, &b.matmul(&rot)?)? - v).abs());
        let perm = super::shuffled(&mut r, n);
        dup = dup.max(chamfer_l2(&a, &super::permute_rows(&a, &perm))?.abs());
    }
    Ok(Outcome::merge(vec![
        ("double loop".into(), Outcome::below(oracle_err, 1e-12, "max |chamfer − oracle|, n, m ≤ 8")),
        ("rotation".into(), Outcome::below(rot_err, 1e-9, "max change under a common rotation")),
        ("duplicates".into(), Outcome::below(dup, 1e-300, "distance between a set and its permutation")),
        ("sign".into(), Outcome::exact(negative, "negative distances")),
    ]))
}

pub(super) fn grad_chamfer(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = GradCheck::default();
    let mut worst: Option<GradCheckReport> = None;
    for s in 0..3 {
        let mut r = rng(opts.seed + s);
        let a = random(&mut r, &[12, 3]);
        let b = random(&mut r, &[10, 3]);
        let rep = finite_difference_check(|tape, v| tape.chamfer(v[0], v[1], 2), &[a, b], &cfg)?;
        if worst.as_ref().is_none_or(|w| rep.max_rel_err > w.max_rel_err) {
            worst = Some(rep);
        }
    }
    let rep = worst.expect("three seeds");
    Ok(Outcome::gradient(&rep, cfg.tol, "two groups of 6 and 5 points, 3 seeds"))
}

pub(super) fn hilbert(_opts: &CheckOptions) -> Result<Outcome> {
    let corners = Tensor::from_fn(&[8, 3], |i| ((i / 3) >> (i % 3) & 1) as f64);
    let perm = hilbert_order(&corners, 1);
    let mut bad = 0;
    for w in perm.windows(2) {
        let diff: f64 = corners.row(w[0]).iter().zip(corners.row(w[1])).map(|(a, b)| (a - b).abs()).sum();
        if diff != 1.0 {
            bad += 1;
        }
    }
    let mut sorted = perm.clone();
    sorted.sort_unstable();
    bad += (sorted != (0..8).collect::<Vec<_>>()) as usize;
    bad += (hilbert_order(&Tensor::<f64>::zeros(&[1, 3]), 8) != vec![0]) as usize;
    bad += (hilbert_order(&Tensor::<f64>::full(&[5, 3], 0.3), 8) != (0..5).collect::<Vec<_>>()) as usize;
    Ok(Outcome::exact(bad, format!("corner path {perm:?}")))
}

pub(super) fn orderings(opts: &CheckOptions) -> Result<Outcome> {
    let mut r = rng(opts.seed);
    let mut bad = 0;
    for _ in 0..opts.trials {
        let n = r.random_range(1..=64);
        let c = random_points(&mut r, n);
        let perms = [
            order_by_axis(&c, Axis::X),
            order_by_axis(&c, Axis::Y),
            order_by_axis(&c, Axis::Z),
            hilbert_order(&c, 8),
        ];
        for p in perms {
            let mut s = p.clone();
            s.sort_unstable();
            bad += (s != (0..n).collect::<Vec<_>>()) as usize;
        }
    }
    Ok(Outcome::exact(bad, "orderings that are not permutations"))
}

pub(super) fn synth(opts: &CheckOptions) -> Result<Outcome> {
    let sphere = synth_shape::<f64>(ShapeKind::Sphere, 512, 0.0, opts.seed)?;
    let norm_err = (0..sphere.len())
        .map(|i| (sphere.points.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    let mut differ = 0;
    for kind in ShapeKind::ALL {
        let a = synth_shape::<f64>(kind, 256, 0.01, opts.seed + 1)?;
        let b = synth_shape::<f64>(kind, 256, 0.01, opts.seed + 1)?;
        differ += (a.points.data().iter().zip(b.points.data()).any(|(x, y)| x.to_bits() != y.to_bits())) as usize;
    }
    Ok(Outcome::merge(vec![
        ("sphere".into(), Outcome::below(norm_err, 1e-6, "max |‖p‖ − 1| on a noiseless sphere")),
        ("determinism".into(), Outcome::exact(differ, "kinds whose regeneration differs")),
    ]))
}
