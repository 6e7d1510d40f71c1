use super::{sq_dist, Point3};

const LEAF_SIZE: usize = 8;
const NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
struct Node {
    start: u32,
    end: u32,
    axis: u8,
    split: f64,
    left: u32,
    right: u32,
}

/// Static 3-d tree over a point set, answering exact nearest-neighbor queries.
///
/// Ties between equidistant points resolve to the lowest original index.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    index: Vec<u32>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Point3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build(points, &mut order, 0, points.len(), &mut nodes);
        }
        let reordered = order.iter().map(|&i| points[i as usize]).collect();
        KdTree {
            points: reordered,
            index: order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of, and squared distance to, the nearest stored point.
    ///
    /// Returns `None` for an empty tree.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best_d = f64::INFINITY;
        let mut best_i = usize::MAX;
        let mut stack: Vec<(u32, f64)> = Vec::with_capacity(64);
        stack.push((0, 0.0));
        while let Some((ni, bound)) = stack.pop() {
            if bound > best_d {
                continue;
            }
            let node = &self.nodes[ni as usize];
            if node.left == NONE {
                for k in node.start as usize..node.end as usize {
                    let d = sq_dist(q, &self.points[k]);
                    let idx = self.index[k] as usize;
                    if d < best_d || (d == best_d && idx < best_i) {
                        best_d = d;
                        best_i = idx;
                    }
                }
                continue;
            }
            let diff = q[node.axis as usize] - node.split;
            let (near, far) = if diff < 0.0 {
                (node.left, node.right)
            } else {
                (node.right, node.left)
            };
            // far first so that near is popped next
            stack.push((far, diff * diff));
            stack.push((near, 0.0));
        }
        Some((best_i, best_d))
    }
}

fn build(points: &[Point3], order: &mut [u32], start: usize, end: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    nodes.push(Node {
        start: start as u32,
        end: end as u32,
        axis: 0,
        split: 0.0,
        left: NONE,
        right: NONE,
    });
    if end - start <= LEAF_SIZE {
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        let p = points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[axis] - lo[axis] == 0.0 {
        // all points coincide
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a as usize][axis].total_cmp(&points[b as usize][axis]));
    let split = points[slice[mid] as usize][axis];
    let left = build(points, order, start, start + mid, nodes);
    let right = build(points, order, start + mid, end, nodes);
    let node = &mut nodes[id as usize];
    node.axis = axis as u8;
    node.split = split;
    node.left = left;
    node.right = right;
    id
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tree_has_no_neighbor() {
        let t = KdTree::new(&[]);
        assert!(t.nearest(&[0.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn coincident_points_break_ties_low() {
        let pts = vec![[1.0, 1.0, 1.0]; 40];
        let t = KdTree::new(&pts);
        assert_eq!(t.nearest(&[0.0, 0.0, 0.0]), Some((0, 3.0)));
    }
}
