//! Point-cloud kernels: nearest neighbors, Chamfer distance, resampling,
//! normalization and bilateral reflection.

mod kdtree;
pub mod oracle;
pub mod pcf;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub use kdtree::KdTree;

pub type Point3 = [f64; 3];

#[inline]
pub fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// An ordered, non-empty set of finite 3-d points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(PointCloud { points })
    }

    /// Build from a row-major `n x 3` buffer.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat buffer length {} is not a multiple of 3",
                values.len()
            )));
        }
        Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    /// Points at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

/// Per-query nearest target point and its squared distance.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborAssignment {
    pub indices: Vec<usize>,
    pub sq_dists: Vec<f64>,
}

/// Exact nearest neighbor in `target` for every point of `query`.
///
/// Equidistant candidates resolve to the lowest target index.
pub fn nearest_neighbors(query: &[Point3], target: &[Point3]) -> Result<NeighborAssignment> {
    if target.is_empty() {
        return Err(Error::EmptyNeighborTarget);
    }
    let tree = KdTree::new(target);
    Ok(nearest_with(&tree, query))
}

pub fn nearest_with(tree: &KdTree, query: &[Point3]) -> NeighborAssignment {
    let mut indices = Vec::with_capacity(query.len());
    let mut sq_dists = Vec::with_capacity(query.len());
    for q in query {
        let (j, d) = tree.nearest(q).expect("non-empty tree");
        indices.push(j);
        sq_dists.push(d);
    }
    NeighborAssignment { indices, sq_dists }
}

/// Symmetric Chamfer distance with squared point distances: the mean squared
/// nearest-neighbor distance from `a` into `b` plus the same from `b` into `a`.
pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ab = nearest_neighbors(a, b)?;
    let ba = nearest_neighbors(b, a)?;
    Ok(mean(&ab.sq_dists) + mean(&ba.sq_dists))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Indices for drawing `m` points from a set of `n`.
///
/// Without replacement when `m <= n`. When `m > n`, every input index appears
/// at least once and the remainder is drawn with replacement; the result is
/// shuffled.
pub fn resample_indices(n: usize, m: usize, rng: &mut rng::Rng) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::InvalidArgument("resample count must be positive".into()));
    }
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if m <= n {
        return Ok(index::sample(rng, n, m).into_vec());
    }
    let mut out: Vec<usize> = (0..n).collect();
    out.extend((n..m).map(|_| rng.random_range(0..n)));
    out.shuffle(rng);
    Ok(out)
}

pub fn resample_uniform(cloud: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = rng::seeded(seed);
    let idx = resample_indices(cloud.len(), m, &mut rng)?;
    cloud.select(&idx)
}

/// Translate the centroid to the origin and scale so the largest coordinate
/// magnitude is 1. Returns the normalized cloud with the `(center, scale)`
/// that [`denormalize`] inverts.
pub fn normalize_unit(cloud: &PointCloud) -> Result<(PointCloud, Point3, f64)> {
    let center = cloud.centroid();
    let scale = cloud
        .points()
        .iter()
        .flat_map(|p| (0..3).map(move |a| (p[a] - center[a]).abs()))
        .fold(0.0f64, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::ZeroExtent);
    }
    let pts = cloud
        .points()
        .iter()
        .map(|p| [(p[0] - center[0]) / scale, (p[1] - center[1]) / scale, (p[2] - center[2]) / scale])
        .collect();
    Ok((PointCloud::new(pts)?, center, scale))
}

pub fn denormalize(cloud: &PointCloud, center: Point3, scale: f64) -> Result<PointCloud> {
    PointCloud::new(
        cloud
            .points()
            .iter()
            .map(|p| [p[0] * scale + center[0], p[1] * scale + center[1], p[2] * scale + center[2]])
            .collect(),
    )
}

/// Mirror across the `x = 0` plane.
pub fn reflect_bilateral(cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points().iter().map(|p| [-p[0], p[1], p[2]]).collect(),
    }
}
