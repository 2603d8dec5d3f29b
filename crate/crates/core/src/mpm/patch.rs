use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, group_patches, PointCloud};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of patches left visible and the seed of the partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub unmask_ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(unmask_ratio: f64, seed: u64) -> Self {
        Self { unmask_ratio, seed }
    }

    /// `round(r·N)`, required to leave at least one patch on each side.
    pub fn visible_count(&self, n: usize) -> Result<usize> {
        let r = self.unmask_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("unmask ratio must lie in (0, 1), got {r}")));
        }
        let v = (r * n as f64).round() as usize;
        if v == 0 || v >= n {
            return Err(Error::count(
                "mask",
                format!("round({r}·{n}) = {v} leaves an empty visible or masked set"),
            ));
        }
        Ok(v)
    }

    /// Uniform random split of `0..n` into sorted visible and masked lists.
    pub fn partition(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let v = self.visible_count(n)?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let (mut vis, mut msk) = (idx[..v].to_vec(), idx[v..].to_vec());
        vis.sort_unstable();
        msk.sort_unstable();
        Ok((vis, msk))
    }
}

/// FPS centers with their grouped relative patches, before masking.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches<T> {
    /// `N×3`.
    pub centers: Tensor<T>,
    /// `N×K×3`, each row relative to its center.
    pub patches: Tensor<T>,
}

impl<T: Scalar> Patches<T> {
    pub fn n(&self) -> usize {
        self.centers.rows()
    }

    pub fn k_group(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Points of the listed patches stacked into `(len·K)×3`.
    pub fn points_of(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (n, k) = (self.n(), self.k_group());
        let flat = self.patches.clone().reshape(&[n, k * 3])?;
        flat.select_rows(idx)?.reshape(&[idx.len() * k, 3])
    }

    pub fn mask(&self, spec: &MaskSpec) -> Result<PatchSet<T>> {
        let (visible, masked) = spec.partition(self.n())?;
        Ok(PatchSet {
            patches: self.clone(),
            visible,
            masked,
            unmask_ratio: spec.unmask_ratio,
        })
    }
}

/// Patches with a visible/masked partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    pub patches: Patches<T>,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub unmask_ratio: f64,
}

impl<T: Scalar> PatchSet<T> {
    pub fn centers_visible(&self) -> Result<Tensor<T>> {
        self.patches.centers.select_rows(&self.visible)
    }

    pub fn centers_masked(&self) -> Result<Tensor<T>> {
        self.patches.centers.select_rows(&self.masked)
    }
}

/// Random anisotropic scaling in `[0.8, 1.25]` per axis followed by a
/// rotation about the z axis, applied to centers and relative patches alike.
pub fn augment<T: Scalar>(p: &Patches<T>, seed: u64) -> Patches<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.25));
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let map = |t: &Tensor<T>| {
        let mut data = t.data().to_vec();
        for v in data.chunks_mut(3) {
            let (x, y, z) = (v[0].as_f64() * s[0], v[1].as_f64() * s[1], v[2].as_f64() * s[2]);
            v[0] = T::of(cos * x - sin * y);
            v[1] = T::of(sin * x + cos * y);
            v[2] = T::of(z);
        }
        Tensor::from_parts(t.shape().to_vec(), data)
    };
    Patches {
        centers: map(&p.centers),
        patches: map(&p.patches),
    }
}

/// FPS (seeded at point 0) followed by KNN grouping.
pub fn patchify<T: Scalar>(pc: &PointCloud<T>, n: usize, k_group: usize) -> Result<Patches<T>> {
    let (centers, _) = farthest_point_sample(&pc.points, n, 0)?;
    let (patches, _) = group_patches(&pc.points, &centers, k_group)?;
    Ok(Patches { centers, patches })
}

pub fn patchify_and_mask<T: Scalar>(
    pc: &PointCloud<T>,
    n: usize,
    k_group: usize,
    mask: &MaskSpec,
) -> Result<PatchSet<T>> {
    mask.visible_count(n)?;
    patchify(pc, n, k_group)?.mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{synth_shape, ShapeKind};

    #[test]
    fn partition_sizes_and_determinism() {
        let spec = MaskSpec::new(0.4, 7);
        let (v, m) = spec.partition(64).unwrap();
        assert_eq!((v.len(), m.len()), (26, 38));
        let mut all: Vec<usize> = v.iter().chain(&m).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert_eq!(spec.partition(64).unwrap(), (v, m));
    }

    #[test]
    fn masking_arithmetic_grid() {
        for n in [2usize, 3, 8, 16, 64, 128] {
            for r in [0.1, 0.25, 0.4, 0.5, 0.6, 0.9] {
                let spec = MaskSpec::new(r, 1);
                match spec.partition(n) {
                    Ok((v, m)) => {
                        assert_eq!(v.len(), (r * n as f64).round() as usize);
                        assert_eq!(v.len() + m.len(), n);
                    }
                    Err(_) => {
                        let v = (r * n as f64).round() as usize;
                        assert!(v == 0 || v == n);
                    }
                }
            }
        }
        assert!(MaskSpec::new(1.0, 0).partition(10).is_err());
    }

    #[test]
    fn patches_are_relative_to_centers() {
        let pc: PointCloud<f64> = synth_shape(ShapeKind::Torus, 512, 0.0, 3).unwrap();
        let ps = patchify_and_mask(&pc, 32, 16, &MaskSpec::new(0.4, 1)).unwrap();
        let p = &ps.patches;
        for c in 0..32 {
            let mut radius = 0.0f64;
            let mut mean = [0.0; 3];
            for j in 0..16 {
                let base = (c * 16 + j) * 3;
                let v = &p.patches.data()[base..base + 3];
                radius = radius.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
                for a in 0..3 {
                    mean[a] += v[a] / 16.0;
                }
            }
            let off = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(off <= radius + 1e-12);
        }
        let pts = p.points_of(&ps.visible).unwrap();
        assert_eq!(pts.shape(), &[ps.visible.len() * 16, 3]);
        assert!(patchify_and_mask(&pc, 600, 16, &MaskSpec::new(0.4, 1)).is_err());
    }
}
