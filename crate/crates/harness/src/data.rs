//! Deterministic synthetic datasets and their manifests.
//!
//! Class `c` draws from seed `derive_seed(seed, [10, c])`; cloud `i` of a
//! split then uses `derive_seed(class_seed, [split, i])` with split 0 for
//! train and 1 for val. The manifest records the class seeds and a SHA-256
//! over every point so any cloud can be regenerated and verified.

use std::fs;
use std::path::Path;

use lcm_core::geometry::{synth_shape, write_xyz, PointCloud, ShapeKind};
use lcm_core::mpm::{derive_seed, patchify, write_atomic, Labeled, Patches};
use lcm_core::{Error, Result, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub label: usize,
    pub kind: String,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub points: usize,
    pub noise: f64,
    pub classes: Vec<ClassEntry>,
    /// Hex SHA-256 of all points (f64 little-endian, train then val, by class).
    pub sha256: String,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    /// Regenerates cloud `index` of class `label` in `split`.
    pub fn regenerate(&self, label: usize, split: Split, index: usize) -> Result<PointCloud<f64>> {
        let c = self
            .classes
            .get(label)
            .ok_or_else(|| Error::Data(format!("no class {label} in manifest")))?;
        let kind: ShapeKind = c.kind.parse()?;
        cloud(kind, label, c.seed, split, index, self.points, self.noise)
    }
}

fn cloud(kind: ShapeKind, label: usize, class_seed: u64, split: Split, i: usize, l: usize, noise: f64) -> Result<PointCloud<f64>> {
    let mut pc = synth_shape::<f64>(kind, l, noise, derive_seed(class_seed, &[split.index(), i as u64]))?;
    pc.label = Some(label);
    Ok(pc)
}

/// Raw clouds of both splits, labels 0..classes in `DataConfig::kinds` order.
#[derive(Clone, Debug)]
pub struct SynthSet {
    pub train: Vec<PointCloud<f64>>,
    pub val: Vec<PointCloud<f64>>,
    pub manifest: Manifest,
}

pub fn synthesize(cfg: &DataConfig, seed: u64, pool: &ThreadPool) -> Result<SynthSet> {
    if cfg.kinds.is_empty() || cfg.train_per_class == 0 || cfg.val_per_class == 0 {
        return Err(Error::Config("dataset needs at least one kind and positive per-class counts".into()));
    }
    let classes: Vec<ClassEntry> = cfg
        .kinds
        .iter()
        .enumerate()
        .map(|(label, kind)| ClassEntry {
            label,
            kind: kind.name().to_string(),
            seed: derive_seed(seed, &[10, label as u64]),
            train: cfg.train_per_class,
            val: cfg.val_per_class,
        })
        .collect();
    let gen = |split: Split, per_class: usize| -> Result<Vec<PointCloud<f64>>> {
        let jobs: Vec<(usize, usize)> =
            (0..classes.len()).flat_map(|c| (0..per_class).map(move |i| (c, i))).collect();
        pool.install(|| {
            jobs.par_iter()
                .map(|&(c, i)| cloud(cfg.kinds[c], c, classes[c].seed, split, i, cfg.points, cfg.noise))
                .collect()
        })
    };
    let train = gen(Split::Train, cfg.train_per_class)?;
    let val = gen(Split::Val, cfg.val_per_class)?;
    let mut h = Sha256::new();
    for pc in train.iter().chain(&val) {
        for v in pc.points.data() {
            h.update(v.to_le_bytes());
        }
    }
    let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let manifest = Manifest {
        seed,
        points: cfg.points,
        noise: cfg.noise,
        classes,
        sha256,
    };
    Ok(SynthSet { train, val, manifest })
}

/// FPS + KNN patches at f64, then cast to the training precision.
pub fn to_labeled<T: Scalar>(clouds: &[PointCloud<f64>], n: usize, k_group: usize, pool: &ThreadPool) -> Result<Vec<Labeled<T>>> {
    pool.install(|| {
        clouds
            .par_iter()
            .map(|pc| {
                let p = patchify(pc, n, k_group)?;
                Ok(Labeled {
                    patches: Patches {
                        centers: p.centers.cast(),
                        patches: p.patches.cast(),
                    },
                    label: pc.label.unwrap_or(0),
                })
            })
            .collect()
    })
}

/// Stratified subset: `ceil(fraction · count)` examples of every class,
/// chosen by a seeded shuffle and returned in original order.
pub fn stratified_subset<T: Clone>(data: &[Labeled<T>], fraction: f64, seed: u64) -> Vec<Labeled<T>> {
    if fraction >= 1.0 {
        return data.to_vec();
    }
    let classes = data.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut keep = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == c).collect();
        let take = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len());
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[11, c as u64])));
        keep.extend_from_slice(&idx[..take]);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| data[i].clone()).collect()
}

/// Writes `manifest.json` and, when asked, one `.xyz` file per cloud.
pub fn write_dataset(set: &SynthSet, dir: &Path, dump_xyz: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("manifest.json"), set.manifest.to_json()?.as_bytes())?;
    if dump_xyz {
        for (split, clouds) in [("train", &set.train), ("val", &set.val)] {
            let sub = dir.join("clouds").join(split);
            fs::create_dir_all(&sub)?;
            let per_class = clouds.len() / set.manifest.classes.len().max(1);
            for (j, pc) in clouds.iter().enumerate() {
                let c = &set.manifest.classes[pc.label.unwrap_or(0)];
                let mut buf = Vec::new();
                write_xyz(&pc.points, &mut buf)?;
                write_atomic(&sub.join(format!("{}_{:04}.xyz", c.kind, j % per_class.max(1))), &buf)?;
            }
        }
    }
    Ok(())
}

/// The `synth` command: generates the dataset and writes its manifest.
pub fn run_synth(cfg: &crate::config::RunConfig, out: &Path) -> Result<Manifest> {
    let pool = lcm_core::mpm::thread_pool(cfg.resolved_workers())?;
    let set = synthesize(&cfg.data, cfg.seed, &pool)?;
    write_dataset(&set, out, cfg.data.dump_xyz)?;
    log::info!(
        "{} classes, {} train + {} val clouds, sha256 {}",
        set.manifest.classes.len(),
        set.train.len(),
        set.val.len(),
        set.manifest.sha256
    );
    Ok(set.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcm_core::mpm::thread_pool;

    fn small() -> DataConfig {
        DataConfig {
            kinds: vec![ShapeKind::Sphere, ShapeKind::Helix, ShapeKind::Cone],
            train_per_class: 4,
            val_per_class: 2,
            points: 128,
            patches: 8,
            noise: 0.01,
            dump_xyz: false,
        }
    }

    #[test]
    fn manifest_counts_and_hash_are_stable() {
        let pool = thread_pool(2).unwrap();
        let a = synthesize(&small(), 5, &pool).unwrap();
        let b = synthesize(&small(), 5, &thread_pool(1).unwrap()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.val.len(), 6);
        assert!(a.manifest.classes.iter().all(|c| c.train == 4 && c.val == 2));
        let c = synthesize(&small(), 6, &pool).unwrap();
        assert_ne!(a.manifest.sha256, c.manifest.sha256);
    }

    #[test]
    fn manifest_regenerates_clouds_bit_exactly() {
        let pool = thread_pool(1).unwrap();
        let set = synthesize(&small(), 9, &pool).unwrap();
        let m = Manifest::from_json(&set.manifest.to_json().unwrap()).unwrap();
        for (j, pc) in set.val.iter().enumerate() {
            let again = m.regenerate(pc.label.unwrap(), Split::Val, j % 2).unwrap();
            let same = again.points.data().iter().zip(pc.points.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same && again.label == pc.label);
        }
    }

    #[test]
    fn stratified_subset_keeps_every_class() {
        let pool = thread_pool(1).unwrap();
        let set = synthesize(&small(), 1, &pool).unwrap();
        let data = to_labeled::<f32>(&set.train, 8, 8, &pool).unwrap();
        let sub = stratified_subset(&data, 0.25, 3);
        assert_eq!(sub.len(), 3);
        let mut labels: Vec<usize> = sub.iter().map(|e| e.label).collect();
        labels.dedup();
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(stratified_subset(&data, 1.0, 3).len(), 12);
    }
}
