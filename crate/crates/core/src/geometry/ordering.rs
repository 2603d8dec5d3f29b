use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn column(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// One serialization of patch centers into a 1-D sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ordering {
    X,
    Y,
    Z,
    Hilbert,
}

impl Ordering {
    fn letter(self) -> char {
        match self {
            Ordering::X => 'X',
            Ordering::Y => 'Y',
            Ordering::Z => 'Z',
            Ordering::Hilbert => 'H',
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "X" => Ok(Ordering::X),
            "Y" => Ok(Ordering::Y),
            "Z" => Ok(Ordering::Z),
            "H" | "HILBERT" => Ok(Ordering::Hilbert),
            other => Err(Error::Config(format!("unknown ordering '{other}'"))),
        }
    }
}

/// A single ordering or a concatenated combination (e.g. `HXYZ`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderingSpec {
    kinds: Vec<Ordering>,
    hilbert_bits: u32,
}

pub const DEFAULT_HILBERT_BITS: u32 = 8;

impl OrderingSpec {
    pub fn new(kinds: Vec<Ordering>, hilbert_bits: u32) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("ordering combination must not be empty".into()));
        }
        if !(1..=16).contains(&hilbert_bits) {
            return Err(Error::Config(format!(
                "hilbert_bits must be in [1, 16], got {hilbert_bits}"
            )));
        }
        Ok(Self {
            kinds,
            hilbert_bits,
        })
    }

    pub fn single(kind: Ordering) -> Self {
        Self {
            kinds: vec![kind],
            hilbert_bits: DEFAULT_HILBERT_BITS,
        }
    }

    pub fn with_bits(mut self, bits: u32) -> Result<Self> {
        self.hilbert_bits = bits;
        Self::new(self.kinds, bits)
    }

    pub fn kinds(&self) -> &[Ordering] {
        &self.kinds
    }

    pub fn hilbert_bits(&self) -> u32 {
        self.hilbert_bits
    }

    /// One permutation per ordering in the combination.
    pub fn permutations<T: Scalar>(&self, centers: &Tensor<T>) -> Vec<Vec<usize>> {
        self.kinds
            .iter()
            .map(|k| match k {
                Ordering::X => order_by_axis(centers, Axis::X),
                Ordering::Y => order_by_axis(centers, Axis::Y),
                Ordering::Z => order_by_axis(centers, Axis::Z),
                Ordering::Hilbert => hilbert_order(centers, self.hilbert_bits),
            })
            .collect()
    }
}

impl fmt::Display for OrderingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in &self.kinds {
            write!(f, "{}", k.letter())?;
        }
        Ok(())
    }
}

impl FromStr for OrderingSpec {
    type Err = Error;

    /// Parses letter strings such as `Y`, `H`, or `HXYZ`.
    fn from_str(s: &str) -> Result<Self> {
        let kinds = s
            .trim()
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'X' => Ok(Ordering::X),
                'Y' => Ok(Ordering::Y),
                'Z' => Ok(Ordering::Z),
                'H' => Ok(Ordering::Hilbert),
                other => Err(Error::Config(format!("unknown ordering letter '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(kinds, DEFAULT_HILBERT_BITS)
    }
}

/// Stable ascending sort of centers by one coordinate.
pub fn order_by_axis<T: Scalar>(centers: &Tensor<T>, axis: Axis) -> Vec<usize> {
    let col = axis.column();
    let mut perm: Vec<usize> = (0..centers.rows()).collect();
    perm.sort_by(|&a, &b| {
        centers
            .at(a, col)
            .partial_cmp(&centers.at(b, col))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    perm
}

/// Position of the cell `coords` (each `< 2^bits`) along the 3-D Hilbert
/// curve, via Skilling's transpose construction.
pub fn hilbert_index(coords: [u32; 3], bits: u32) -> u64 {
    let mut x = coords;
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }
    let mut index = 0u64;
    for b in (0..bits).rev() {
        for v in &x {
            index = (index << 1) | u64::from((v >> b) & 1);
        }
    }
    index
}

/// Sorts centers by the Hilbert index of their quantized cell after
/// bounding-box normalization to `[0, 1]³`; ties keep the original order.
pub fn hilbert_order<T: Scalar>(centers: &Tensor<T>, bits: u32) -> Vec<usize> {
    let bits = bits.clamp(1, 16);
    let n = centers.rows();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..n {
        for k in 0..3 {
            let v = centers.at(i, k).as_f64();
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let cells = f64::from(1u32 << bits);
    let max_cell = (1u32 << bits) - 1;
    let keys: Vec<u64> = (0..n)
        .map(|i| {
            let mut c = [0u32; 3];
            for k in 0..3 {
                let extent = hi[k] - lo[k];
                let unit = if extent > 0.0 {
                    ((centers.at(i, k).as_f64() - lo[k]) / extent).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                c[k] = ((unit * cells) as u32).min(max_cell);
            }
            hilbert_index(c, bits)
        })
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by_key(|&i| keys[i]);
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corners() -> Tensor<f64> {
        Tensor::from_fn(&[8, 3], |k| {
            let (i, axis) = (k / 3, k % 3);
            if (i >> axis) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
    }

    fn is_permutation(p: &[usize]) -> bool {
        let mut s = p.to_vec();
        s.sort_unstable();
        s == (0..p.len()).collect::<Vec<_>>()
    }

    #[test]
    fn axis_order_cases() {
        let sorted = Tensor::<f64>::from_fn(&[4, 3], |k| (k / 3) as f64);
        assert_eq!(order_by_axis(&sorted, Axis::X), vec![0, 1, 2, 3]);
        let rev = Tensor::<f64>::from_fn(&[4, 3], |k| 3.0 - (k / 3) as f64);
        assert_eq!(order_by_axis(&rev, Axis::Y), vec![3, 2, 1, 0]);
        let ties = Tensor::<f64>::new(&[3, 3], vec![1., 0., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        assert_eq!(order_by_axis(&ties, Axis::X), vec![1, 0, 2]);
        assert_eq!(order_by_axis(&ties, Axis::Z), vec![0, 1, 2]);
    }

    #[test]
    fn hilbert_corners_form_edge_path() {
        let c = corners();
        let perm = hilbert_order(&c, 1);
        assert!(is_permutation(&perm));
        for w in perm.windows(2) {
            let diff: usize = (0..3).filter(|&k| c.at(w[0], k) != c.at(w[1], k)).count();
            assert_eq!(diff, 1, "corners {} and {} are not edge-adjacent", w[0], w[1]);
        }
    }

    #[test]
    fn hilbert_full_grid_is_hamiltonian_path() {
        for bits in 1..=3u32 {
            let side = 1u32 << bits;
            let mut cells: Vec<([u32; 3], u64)> = Vec::new();
            for x in 0..side {
                for y in 0..side {
                    for z in 0..side {
                        cells.push(([x, y, z], hilbert_index([x, y, z], bits)));
                    }
                }
            }
            cells.sort_by_key(|c| c.1);
            let idx: Vec<u64> = cells.iter().map(|c| c.1).collect();
            assert_eq!(idx, (0..u64::from(side).pow(3)).collect::<Vec<_>>());
            for w in cells.windows(2) {
                let step: u32 = (0..3).map(|k| w[0].0[k].abs_diff(w[1].0[k])).sum();
                assert_eq!(step, 1);
            }
        }
    }

    #[test]
    fn hilbert_degenerate_inputs() {
        let one = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(hilbert_order(&one, 8), vec![0]);
        let same = Tensor::<f64>::full(&[5, 3], 0.25);
        assert_eq!(hilbert_order(&same, 8), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn spec_parsing() {
        let s: OrderingSpec = "hxyz".parse().unwrap();
        assert_eq!(s.to_string(), "HXYZ");
        assert_eq!(s.kinds().len(), 4);
        assert!("".parse::<OrderingSpec>().is_err());
        assert!("Q".parse::<OrderingSpec>().is_err());
        assert!(OrderingSpec::single(Ordering::Y).with_bits(0).is_err());
        assert!(OrderingSpec::single(Ordering::Y).with_bits(17).is_err());
        let perms = s.permutations(&corners());
        assert_eq!(perms.len(), 4);
        assert!(perms.iter().all(|p| is_permutation(p)));
    }
}
