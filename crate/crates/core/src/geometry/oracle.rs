//! Brute-force reference implementations of the geometry kernels.
//!
//! Quadratic time, no indexing; used to check the indexed paths.

use super::{sq_dist, NeighborAssignment, Point3};

pub fn nearest_neighbors(query: &[Point3], target: &[Point3]) -> Option<NeighborAssignment> {
    if target.is_empty() {
        return None;
    }
    let mut indices = Vec::with_capacity(query.len());
    let mut sq_dists = Vec::with_capacity(query.len());
    for q in query {
        let mut best = (0usize, f64::INFINITY);
        for (j, t) in target.iter().enumerate() {
            let d = sq_dist(q, t);
            if d < best.1 {
                best = (j, d);
            }
        }
        indices.push(best.0);
        sq_dists.push(best.1);
    }
    Some(NeighborAssignment { indices, sq_dists })
}

pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ab = nearest_neighbors(a, b)?;
    let ba = nearest_neighbors(b, a)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(mean(&ab.sq_dists) + mean(&ba.sq_dists))
}
