//! Central-difference gradient verification.
//!
//! The relative error of a coordinate is `|a − n| / max(1e-8, |a| + |n|)`
//! where `a` is the analytic gradient and `n` the central difference
//! `(f(p + ε) − f(p − ε)) / 2ε`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which coordinates of each parameter get perturbed.
#[derive(Clone, Debug)]
pub enum Coords {
    All,
    /// Up to `per_param` coordinates per parameter, chosen with `seed`.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    pub coords: Coords,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords: Coords::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `value`.
pub fn compare_with_finite_differences<F>(
    mut value: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: &GradCheck,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(a, p)| a.shape() != p.shape())
    {
        return Err(Error::dim(
            "finite_difference_check",
            "analytic gradients do not match parameter shapes",
        ));
    }
    let first = value(params)?;
    let second = value(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
        pass: true,
    };
    let mut rng = match cfg.coords {
        Coords::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coords::All => None,
    };
    for pi in 0..params.len() {
        let len = params[pi].len();
        let coords: Vec<usize> = match (&cfg.coords, rng.as_mut()) {
            (Coords::Sample { per_param, .. }, Some(r)) if *per_param < len => {
                let mut v = sample(r, len, *per_param).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            work[pi] = perturbed(&params[pi], c, orig + cfg.eps);
            let plus = value(&work)?;
            work[pi] = perturbed(&params[pi], c, orig - cfg.eps);
            let minus = value(&work)?;
            work[pi] = params[pi].clone();

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[pi].data()[c];
            let rel = rel_err(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = Some((pi, c));
            }
        }
    }
    report.pass = report.max_rel_err < cfg.tol;
    Ok(report)
}

fn perturbed(t: &Tensor<f64>, coord: usize, v: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[coord] = v;
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Checks reverse-mode gradients of a scalar function built on a tape.
///
/// `f` receives a fresh tape with one grad-tracked leaf per parameter and
/// returns the scalar loss node.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor<f64>],
    cfg: &GradCheck,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = autodiff_gradients(&f, params)?;
    compare_with_finite_differences(
        |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        },
        params,
        &analytic,
        cfg,
    )
}

/// Reverse-mode gradients of `f` at `params`, zero-filled where unused.
pub(crate) fn autodiff_gradients<F>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_gradient_passes() {
        let params = [random(&[3, 4], 1), random(&[4, 2], 2)];
        let report = finite_difference_check(
            |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &params,
            &GradCheck {
                tol: 1e-5,
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.checked, 20);
    }

    #[test]
    fn scaled_gradient_is_caught() {
        let params = [random(&[3, 4], 3), random(&[4, 2], 4)];
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let y = tape.matmul(v[0], v[1])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        };
        let analytic: Vec<Tensor<f64>> = autodiff_gradients(&f, &params)
            .unwrap()
            .into_iter()
            .map(|g| g.scale(1.01))
            .collect();
        let report = compare_with_finite_differences(
            |ps| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
                let loss = f(&mut tape, &vars)?;
                Ok(tape.value(loss).item())
            },
            &params,
            &analytic,
            &GradCheck::default(),
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_err > 1e-3);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let params = [random(&[2], 5)];
        let mut calls = 0u32;
        let err = compare_with_finite_differences(
            |_| {
                calls += 1;
                Ok(calls as f64)
            },
            &params,
            &[Tensor::zeros(&[2])],
            &GradCheck::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 0.5) - 0.5 / 1.5).abs() < 1e-15);
    }
}
