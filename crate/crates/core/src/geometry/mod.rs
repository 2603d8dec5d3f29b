//! Point-cloud primitives: sampling, neighborhoods, Chamfer distance,
//! serial orderings, synthetic shapes.

mod io;
mod ordering;
mod sampling;
mod synth;

pub use io::{read_xyz, write_xyz};
pub use ordering::{hilbert_index, hilbert_order, order_by_axis, Axis, Ordering, OrderingSpec};
pub use sampling::{farthest_point_sample, group_patches, knn_indices, NeighborTable};
pub use synth::{synth_shape, ShapeKind};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// `L×3` coordinates with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub points: Tensor<T>,
    pub label: Option<usize>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Tensor<T>, label: Option<usize>) -> Result<Self> {
        if points.shape().len() != 2 || points.cols() != 3 {
            return Err(Error::dim(
                "PointCloud::new",
                format!("expected L×3 points, got {:?}", points.shape()),
            ));
        }
        if points.rows() == 0 {
            return Err(Error::count("PointCloud::new", "empty cloud"));
        }
        if !points.is_finite() {
            return Err(Error::Data("non-finite coordinates".into()));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Centers at the centroid and scales to unit maximum radius.
    pub fn normalized(&self) -> Self {
        Self {
            points: normalize_unit_sphere(&self.points),
            label: self.label,
        }
    }
}

pub(crate) fn normalize_unit_sphere<T: Scalar>(points: &Tensor<T>) -> Tensor<T> {
    let n = points.rows();
    let mut centroid = [T::zero(); 3];
    for i in 0..n {
        for (c, &v) in centroid.iter_mut().zip(points.row(i)) {
            *c += v;
        }
    }
    let inv = T::one() / T::of(n as f64);
    centroid.iter_mut().for_each(|c| *c *= inv);
    let mut data: Vec<T> = points
        .data()
        .chunks(3)
        .flat_map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let radius = data
        .chunks(3)
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(T::zero(), T::max);
    if radius > T::zero() {
        data.iter_mut().for_each(|v| *v /= radius);
    }
    Tensor::from_parts(vec![n, 3], data)
}

pub(crate) fn sq_dist3<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Squared-L2 Chamfer distance with mean reduction on each side.
pub fn chamfer_l2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::count("chamfer_l2", "empty point set"));
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let cd = tape.chamfer(va, vb, 1)?;
    Ok(tape.value(cd).item())
}
