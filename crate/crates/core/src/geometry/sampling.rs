use std::cmp::Ordering as CmpOrdering;

use super::sq_dist3;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-query neighbor lists, row-major `queries × k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborTable {
    pub fn new(k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 || !indices.len().is_multiple_of(k) {
            return Err(Error::count(
                "NeighborTable::new",
                format!("{} indices do not form rows of {k}", indices.len()),
            ));
        }
        Ok(Self { k, indices })
    }

    /// Every query is its own single neighbor.
    pub fn identity(n: usize) -> Self {
        Self {
            k: 1,
            indices: (0..n).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    /// Relabels under a permutation of both queries and keys: row `i` of the
    /// result describes old query `perm[i]` with keys in the new numbering.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let indices = perm
            .iter()
            .flat_map(|&old| self.row(old).iter().map(|&j| inv[j]))
            .collect();
        Self { k: self.k, indices }
    }
}

fn check_points<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<usize> {
    if t.shape().len() != 2 || t.cols() != 3 {
        return Err(Error::dim(op, format!("expected n×3, got {:?}", t.shape())));
    }
    Ok(t.rows())
}

/// Greedy max-min subsampling starting from `seed_idx`. Ties go to the
/// lowest index.
pub fn farthest_point_sample<T: Scalar>(
    points: &Tensor<T>,
    n: usize,
    seed_idx: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let l = check_points(points, "farthest_point_sample")?;
    if n == 0 || n > l {
        return Err(Error::count(
            "farthest_point_sample",
            format!("cannot select {n} of {l} points"),
        ));
    }
    if seed_idx >= l {
        return Err(Error::Index {
            op: "farthest_point_sample",
            index: seed_idx,
            extent: l,
        });
    }
    let mut selected = Vec::with_capacity(n);
    let mut min_d = vec![T::infinity(); l];
    let mut current = seed_idx;
    for _ in 0..n {
        selected.push(current);
        let c = points.row(current);
        let mut best = (T::neg_infinity(), 0usize);
        for (i, md) in min_d.iter_mut().enumerate() {
            let d = sq_dist3(points.row(i), c);
            if d < *md {
                *md = d;
            }
            if *md > best.0 {
                best = (*md, i);
            }
        }
        current = best.1;
    }
    let centers = points.select_rows(&selected)?;
    Ok((centers, selected))
}

fn by_distance<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> CmpOrdering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(CmpOrdering::Equal)
        .then(a.1.cmp(&b.1))
}

/// The `k` nearest keys of every query, ascending by Euclidean distance,
/// ties broken by lower key index.
pub fn knn_indices<T: Scalar>(
    queries: &Tensor<T>,
    keys: &Tensor<T>,
    k: usize,
) -> Result<NeighborTable> {
    let q = check_points(queries, "knn_indices")?;
    let m = check_points(keys, "knn_indices")?;
    if k == 0 || k > m {
        return Err(Error::count("knn_indices", format!("k = {k} with {m} keys")));
    }
    let mut indices = Vec::with_capacity(q * k);
    let mut scratch: Vec<(T, usize)> = Vec::with_capacity(m);
    for qi in 0..q {
        let p = queries.row(qi);
        scratch.clear();
        scratch.extend((0..m).map(|j| (sq_dist3(p, keys.row(j)), j)));
        if k < m {
            scratch.select_nth_unstable_by(k - 1, by_distance);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(by_distance);
        indices.extend(scratch.iter().map(|&(_, j)| j));
    }
    Ok(NeighborTable { k, indices })
}

/// Groups the `k_group` nearest points of each center, expressed relative
/// to that center. Returns `N×k_group×3` patches and the membership table.
pub fn group_patches<T: Scalar>(
    points: &Tensor<T>,
    centers: &Tensor<T>,
    k_group: usize,
) -> Result<(Tensor<T>, NeighborTable)> {
    let l = check_points(points, "group_patches")?;
    if k_group == 0 || k_group > l {
        return Err(Error::count(
            "group_patches",
            format!("k_group = {k_group} with {l} points"),
        ));
    }
    let table = knn_indices(centers, points, k_group)?;
    let n = centers.rows();
    let mut data = Vec::with_capacity(n * k_group * 3);
    for c in 0..n {
        let ctr = centers.row(c);
        for &j in table.row(c) {
            let p = points.row(j);
            data.extend_from_slice(&[p[0] - ctr[0], p[1] - ctr[1], p[2] - ctr[2]]);
        }
    }
    Ok((Tensor::from_parts(vec![n, k_group, 3], data), table))
}
