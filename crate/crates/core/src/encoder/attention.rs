use std::cmp::Ordering as CmpOrdering;

use crate::error::{Error, Result};
use crate::geometry::knn_indices;
use crate::nn::{Binding, Init, Linear};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Where top-K attention picks the kept keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopKSpace {
    /// The K largest raw logits of each query row, per head.
    Feature,
    /// The K geometrically nearest patch centers; self is always kept.
    Geometry,
}

/// Additive attention mask selection for one forward pass.
#[derive(Clone, Debug)]
pub enum AttnMask<T> {
    Full,
    /// Fixed `N×N` mask of `0` (keep) and `-inf` (drop).
    Fixed(Tensor<T>),
    /// Feature-space top-K, recomputed from each head's logits.
    FeatureTopK(usize),
}

/// Builds an `N×N` mask keeping K entries per row.
///
/// `input` is the `N×N` logit matrix for [`TopKSpace::Feature`] and the
/// `N×3` centers for [`TopKSpace::Geometry`].
pub fn topk_attention_mask<T: Scalar>(input: &Tensor<T>, k: usize, space: TopKSpace) -> Result<Tensor<T>> {
    let n = input.rows();
    if k == 0 || k > n {
        return Err(Error::count("topk_attention_mask", format!("K = {k} with N = {n}")));
    }
    let mut mask = Tensor::full(&[n, n], T::neg_infinity()).into_data();
    match space {
        TopKSpace::Feature => {
            if input.shape() != [n, n] {
                return Err(Error::dim("topk_attention_mask", format!("logits {:?}", input.shape())));
            }
            let mut order: Vec<usize> = Vec::with_capacity(n);
            for r in 0..n {
                let row = input.row(r);
                order.clear();
                order.extend(0..n);
                order.sort_by(|&a, &b| {
                    row[b].partial_cmp(&row[a]).unwrap_or(CmpOrdering::Equal).then(a.cmp(&b))
                });
                for &j in &order[..k] {
                    mask[r * n + j] = T::zero();
                }
            }
        }
        TopKSpace::Geometry => {
            let table = knn_indices(input, input, k)?;
            for r in 0..n {
                let row = table.row(r);
                let keep_self = row.contains(&r);
                for (slot, &j) in row.iter().enumerate() {
                    let j = if !keep_self && slot + 1 == k { r } else { j };
                    mask[r * n + j] = T::zero();
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, n], mask))
}

/// Multi-head scaled dot-product self-attention with affine projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d = {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), d, d, true)?,
            k: Linear::new(init, &format!("{name}.k"), d, d, true)?,
            v: Linear::new(init, &format!("{name}.v"), d, d, true)?,
            o: Linear::new(init, &format!("{name}.o"), d, d, true)?,
            heads,
            d,
        })
    }

    pub fn num_params(&self) -> usize {
        4 * (self.d * self.d + self.d)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        x: Var,
        mask: &AttnMask<T>,
    ) -> Result<Var> {
        let dh = self.d / self.heads;
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let a = match mask {
                AttnMask::Full => tape.softmax_rows(s, None)?,
                AttnMask::Fixed(m) => tape.softmax_rows(s, Some(m))?,
                AttnMask::FeatureTopK(kk) => {
                    let m = topk_attention_mask(tape.value(s), *kk, TopKSpace::Feature)?;
                    tape.softmax_rows(s, Some(&m))?
                }
            };
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.o.forward(tape, p, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck_store, probe_loss, ParamStore};
    use crate::tensor::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn setup(d: usize, heads: usize, seed: u64) -> (ParamStore<f64>, Attention) {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut Init::new(&mut store, seed), "attn", d, heads).unwrap();
        store.randomize(seed + 1, 0.6);
        (store, attn)
    }

    fn run(store: &ParamStore<f64>, attn: &Attention, x: &Tensor<f64>, mask: &AttnMask<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = attn.forward(&mut tape, &p, xv, mask)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn single_token_is_output_of_value_projection() {
        let (store, attn) = setup(4, 2, 1);
        let x = random(&[1, 4], 2);
        let y = run(&store, &attn, &x, &AttnMask::Full).unwrap();
        let v = x.matmul(store.get(attn.v.weight)).unwrap();
        let v = v.zip_map(&store.get(attn.v.bias.unwrap()).clone().reshape(&[1, 4]).unwrap(), |a, b| a + b).unwrap();
        let o = v.matmul(store.get(attn.o.weight)).unwrap();
        let o = o.zip_map(&store.get(attn.o.bias.unwrap()).clone().reshape(&[1, 4]).unwrap(), |a, b| a + b).unwrap();
        assert!(y.max_abs_diff(&o) < 1e-12);
    }

    #[test]
    fn zero_mask_equals_no_mask_bitwise() {
        let (store, attn) = setup(6, 3, 3);
        let x = random(&[7, 6], 4);
        let full = run(&store, &attn, &x, &AttnMask::Full).unwrap();
        let zeros = run(&store, &attn, &x, &AttnMask::Fixed(Tensor::zeros(&[7, 7]))).unwrap();
        let topn = run(&store, &attn, &x, &AttnMask::FeatureTopK(7)).unwrap();
        assert_eq!(full, zeros);
        assert_eq!(full, topn);
    }

    #[test]
    fn geometry_k1_is_self_only() {
        let (store, attn) = setup(4, 1, 5);
        let x = random(&[6, 4], 6);
        let mut centers = random(&[6, 3], 7).into_data();
        centers.copy_within(0..3, 3);
        let centers = Tensor::new(&[6, 3], centers).unwrap();
        let mask = topk_attention_mask(&centers, 1, TopKSpace::Geometry).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(mask.at(r, c) == 0.0, r == c);
            }
        }
        let y = run(&store, &attn, &x, &AttnMask::Fixed(mask)).unwrap();
        for r in 0..6 {
            let single = run(&store, &attn, &x.select_rows(&[r]).unwrap(), &AttnMask::Full).unwrap();
            assert!((0..4).all(|c| (y.at(r, c) - single.at(0, c)).abs() < 1e-12));
        }
    }

    #[test]
    fn feature_mask_keeps_k_largest_with_index_ties() {
        let logits = Tensor::from_rows(&[vec![1.0, 3.0, 3.0, 0.0], vec![2.0, 2.0, 2.0, 2.0]]).unwrap();
        let logits = Tensor::new(&[2, 4], logits.into_data()).unwrap();
        let square = Tensor::from_fn(&[4, 4], |i| if i < 8 { logits.data()[i] } else { 0.0 });
        let m = topk_attention_mask(&square, 2, TopKSpace::Feature).unwrap();
        let kept = |r: usize| (0..4).filter(|&c| m.at(r, c) == 0.0).collect::<Vec<_>>();
        assert_eq!(kept(0), vec![1, 2]);
        assert_eq!(kept(1), vec![0, 1]);
        assert!(topk_attention_mask(&square, 5, TopKSpace::Feature).is_err());
    }

    #[test]
    fn gradient_passes_finite_differences() {
        let (store, attn) = setup(4, 2, 9);
        let x = random(&[5, 4], 10);
        let report = gradcheck_store(
            &store,
            &[x],
            |tape, p, v| {
                let y = attn.forward(tape, p, v[0], &AttnMask::Full)?;
                probe_loss(tape, y, 1)
            },
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
