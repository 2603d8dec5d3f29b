use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{normalize_unit_sphere, PointCloud};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Synthetic surface families used as the desk-scale dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    Pyramid,
    Helix,
    PlaneCross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Pyramid,
        ShapeKind::Helix,
        ShapeKind::PlaneCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Helix => "helix",
            ShapeKind::PlaneCross => "plane-cross",
        }
    }

    /// Class id: position in [`ShapeKind::ALL`].
    pub fn class_id(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap_or(0)
    }

    // Point-symmetric surfaces are sampled in ± pairs so their centroid is
    // exactly the origin.
    fn point_symmetric(self) -> bool {
        matches!(
            self,
            ShapeKind::Sphere
                | ShapeKind::Cube
                | ShapeKind::Torus
                | ShapeKind::Cylinder
                | ShapeKind::PlaneCross
        )
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown shape kind '{s}'")))
    }
}

fn unit_disk(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..2.0 * PI);
    (r * t.cos(), r * t.sin())
}

fn triangle(rng: &mut ChaCha8Rng, a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    std::array::from_fn(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]))
}

fn sample_surface(kind: ShapeKind, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match kind {
        ShapeKind::Sphere => loop {
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        },
        ShapeKind::Cube => {
            let face = rng.random_range(0..6usize);
            let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        ShapeKind::Torus => {
            let (major, minor) = (1.0, 0.4);
            let phi = loop {
                let phi = rng.random_range(0.0..2.0 * PI);
                if rng.random::<f64>() * (major + minor) <= major + minor * phi.cos() {
                    break phi;
                }
            };
            let theta = rng.random_range(0.0..2.0 * PI);
            let ring = major + minor * phi.cos();
            [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()]
        }
        ShapeKind::Cylinder => {
            let (r, h) = (0.6f64, 2.0f64);
            let side = 2.0 * PI * r * h;
            let caps = 2.0 * PI * r * r;
            if rng.random::<f64>() * (side + caps) < side {
                let t = rng.random_range(0.0..2.0 * PI);
                [r * t.cos(), r * t.sin(), rng.random_range(-1.0..1.0)]
            } else {
                let (x, y) = unit_disk(rng, r);
                [x, y, if rng.random::<bool>() { 1.0 } else { -1.0 }]
            }
        }
        ShapeKind::Cone => {
            let (r, h) = (0.8f64, 2.0f64);
            let slant = (r * r + h * h).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            if rng.random::<f64>() * (lateral + base) < lateral {
                let s = rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..2.0 * PI);
                [r * s * t.cos(), r * s * t.sin(), 1.0 - h * s]
            } else {
                let (x, y) = unit_disk(rng, r);
                [x, y, -1.0]
            }
        }
        ShapeKind::Pyramid => {
            let apex = [0.0, 0.0, 1.0];
            let base = [[-1.0, -1.0, -1.0], [1.0, -1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, 1.0, -1.0]];
            let side_area = 5f64.sqrt();
            let total = 4.0 + 4.0 * side_area;
            let pick = rng.random::<f64>() * total;
            if pick < 4.0 {
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0]
            } else {
                let f = (((pick - 4.0) / side_area) as usize).min(3);
                triangle(rng, base[f], base[(f + 1) % 4], apex)
            }
        }
        ShapeKind::Helix => {
            let (radius, tube, turns) = (0.8, 0.15, 3.0);
            let t = rng.random_range(0.0..2.0 * PI * turns);
            let pitch = 2.0 / (2.0 * PI * turns);
            let center = [radius * t.cos(), radius * t.sin(), -1.0 + pitch * t];
            let speed = (radius * radius + pitch * pitch).sqrt();
            let tangent = [-radius * t.sin() / speed, radius * t.cos() / speed, pitch / speed];
            let normal = [-t.cos(), -t.sin(), 0.0];
            let binormal = [
                tangent[1] * normal[2] - tangent[2] * normal[1],
                tangent[2] * normal[0] - tangent[0] * normal[2],
                tangent[0] * normal[1] - tangent[1] * normal[0],
            ];
            let a = rng.random_range(0.0..2.0 * PI);
            std::array::from_fn(|k| center[k] + tube * (a.cos() * normal[k] + a.sin() * binormal[k]))
        }
        ShapeKind::PlaneCross => {
            let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            match rng.random_range(0..3usize) {
                0 => [u, v, 0.0],
                1 => [0.0, u, v],
                _ => [u, 0.0, v],
            }
        }
    }
}

/// Samples `l` points uniformly on the surface of `kind`, adds isotropic
/// Gaussian jitter, then centers and scales to unit max radius.
pub fn synth_shape<T: Scalar>(
    kind: ShapeKind,
    l: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<PointCloud<T>> {
    if l < 64 {
        return Err(Error::count("synth_shape", format!("L = {l} < 64")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(l);
    if kind.point_symmetric() {
        while pts.len() + 1 < l {
            let p = sample_surface(kind, &mut rng);
            pts.push(p);
            pts.push([-p[0], -p[1], -p[2]]);
        }
    }
    while pts.len() < l {
        pts.push(sample_surface(kind, &mut rng));
    }
    if noise_sigma > 0.0 {
        let jitter = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
    }
    let raw = Tensor::from_parts(vec![l, 3], pts.concat());
    let points = normalize_unit_sphere(&raw).cast::<T>();
    PointCloud::new(points, Some(kind.class_id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_lies_on_unit_sphere() {
        let pc: PointCloud<f64> = synth_shape(ShapeKind::Sphere, 256, 0.0, 1).unwrap();
        for i in 0..pc.len() {
            let n: f64 = pc.points.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        for kind in ShapeKind::ALL {
            let a: PointCloud<f32> = synth_shape(kind, 128, 0.01, 9).unwrap();
            let b: PointCloud<f32> = synth_shape(kind, 128, 0.01, 9).unwrap();
            let bits = |p: &PointCloud<f32>| p.points.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "{kind}");
            assert_eq!(a.label, Some(kind.class_id()));
        }
    }

    #[test]
    fn cube_points_sit_on_faces() {
        let pc: PointCloud<f64> = synth_shape(ShapeKind::Cube, 512, 0.0, 2).unwrap();
        let face = |i: usize| pc.points.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let first = face(0);
        for i in 0..pc.len() {
            assert!((face(i) - first).abs() < 1e-9);
        }
    }

    #[test]
    fn every_kind_is_normalized() {
        for kind in ShapeKind::ALL {
            let pc: PointCloud<f64> = synth_shape(kind, 200, 0.02, 4).unwrap();
            let r = (0..pc.len())
                .map(|i| pc.points.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-9);
            for k in 0..3 {
                let m: f64 = (0..pc.len()).map(|i| pc.points.at(i, k)).sum::<f64>() / 200.0;
                assert!(m.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bad_arguments() {
        assert!(synth_shape::<f64>(ShapeKind::Sphere, 63, 0.0, 0).is_err());
        assert!("blob".parse::<ShapeKind>().is_err());
        assert_eq!("plane-cross".parse::<ShapeKind>().unwrap(), ShapeKind::PlaneCross);
    }
}
