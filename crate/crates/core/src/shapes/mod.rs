//! Procedural part-segmented box-assembly shapes and the source database.
//!
//! Shapes are y-up, bilaterally symmetric about `x = 0`, and scaled so the
//! assembly's bounding box is centered at the origin with a largest half
//! extent of 1. Point coordinates are rounded to `f32` precision so that they
//! survive a `PCF1` round trip bit-exactly.

mod database;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::rng;

pub(crate) use database::shape_seed;
pub use database::{build_database, load_database, save_database, DbEntry, SourceDatabase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Chair,
    Table,
    Cabinet,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Chair, Category::Table, Category::Cabinet];

    pub fn name(self) -> &'static str {
        match self {
            Category::Chair => "chair",
            Category::Table => "table",
            Category::Cabinet => "cabinet",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Category::Chair => 0,
            Category::Table => 1,
            Category::Cabinet => 2,
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chair" => Ok(Category::Chair),
            "table" => Ok(Category::Table),
            "cabinet" => Ok(Category::Cabinet),
            other => Err(Error::InvalidArgument(format!("unknown category `{other}`"))),
        }
    }
}

/// Axis-aligned part box: center and full extents along x (width),
/// y (height) and z (length).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartBox {
    pub part_id: u16,
    pub center: Point3,
    pub extents: [f64; 3],
}

impl PartBox {
    pub fn contains(&self, p: &Point3, slack: f64) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.extents[a] / 2.0 + slack)
    }

    fn touches(&self, other: &PartBox, eps: f64) -> bool {
        (0..3).all(|a| {
            let gap = (self.center[a] - other.center[a]).abs() - (self.extents[a] + other.extents[a]) / 2.0;
            gap <= eps
        })
    }

    fn area(&self) -> f64 {
        let [w, h, l] = self.extents;
        2.0 * (w * h + w * l + h * l)
    }

    fn sample_surface(&self, r: &mut rng::Rng) -> Point3 {
        let [w, h, l] = self.extents;
        let faces = [h * l, h * l, w * l, w * l, w * h, w * h];
        let face = WeightedIndex::new(faces).map(|d| d.sample(r)).unwrap_or(0);
        let axis = face / 2;
        let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
        let mut p = [0.0; 3];
        for (a, v) in p.iter_mut().enumerate() {
            *v = if a == axis {
                self.center[a] + sign * self.extents[a] / 2.0
            } else {
                self.center[a] + (r.random::<f64>() - 0.5) * self.extents[a]
            };
        }
        p
    }
}

/// A source or target shape: points with part labels, part boxes and the
/// part adjacency graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSegmentedShape {
    pub cloud: PointCloud,
    pub labels: Vec<u16>,
    pub parts: Vec<PartBox>,
    pub connectivity: Vec<(u16, u16)>,
    pub category: Category,
}

impl PartSegmentedShape {
    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Check labels, box containment (within `slack`) and connectivity.
    pub fn validate(&self, slack: f64) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::InvalidArgument("shape has no parts".into()));
        }
        if self.labels.len() != self.cloud.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} points",
                self.labels.len(),
                self.cloud.len()
            )));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.part_id as usize != i {
                return Err(Error::InvalidArgument(format!("part {i} has id {}", p.part_id)));
            }
            if p.extents.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::InvalidArgument(format!("part {i} has non-positive extent")));
            }
        }
        for (k, (p, &l)) in self.cloud.points().iter().zip(&self.labels).enumerate() {
            let part = self
                .parts
                .get(l as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("point {k} labeled with missing part {l}")))?;
            if !part.contains(p, slack) {
                return Err(Error::InvalidArgument(format!("point {k} lies outside part box {l}")));
            }
        }
        for &(a, b) in &self.connectivity {
            if a as usize >= self.parts.len() || b as usize >= self.parts.len() || a == b {
                return Err(Error::InvalidArgument(format!("bad connectivity edge ({a}, {b})")));
            }
        }
        Ok(())
    }

    /// Index of the part each part mirrors onto under `x -> -x` (itself for
    /// parts centered on the symmetry plane).
    pub fn mirror_partners(&self) -> Vec<usize> {
        self.parts
            .iter()
            .map(|p| {
                self.parts
                    .iter()
                    .position(|q| {
                        (q.center[0] + p.center[0]).abs() < 1e-9
                            && (q.center[1] - p.center[1]).abs() < 1e-9
                            && (q.center[2] - p.center[2]).abs() < 1e-9
                            && (0..3).all(|a| (q.extents[a] - p.extents[a]).abs() < 1e-9)
                    })
                    .unwrap_or(p.part_id as usize)
            })
            .collect()
    }

    /// Number of points carrying each label.
    pub fn part_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.parts.len()];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

struct Layout {
    boxes: Vec<PartBox>,
}

impl Layout {
    fn push(&mut self, center: Point3, extents: [f64; 3]) {
        let part_id = self.boxes.len() as u16;
        self.boxes.push(PartBox {
            part_id,
            center,
            extents,
        });
    }

    /// Four legs under a slab spanning `w x d`, with top at height `top`.
    fn legs(&mut self, w: f64, d: f64, lw: f64, top: f64) {
        let x = w / 2.0 - lw / 2.0;
        let z = d / 2.0 - lw / 2.0;
        for (sx, sz) in [(-1.0, 1.0), (1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
            self.push([sx * x, top / 2.0, sz * z], [lw, top, lw]);
        }
    }
}

fn layout(category: Category, r: &mut rng::Rng) -> Layout {
    let mut u = |lo: f64, hi: f64| r.random_range(lo..hi);
    let mut l = Layout { boxes: Vec::new() };
    match category {
        Category::Chair => {
            let (w, d, t) = (u(0.8, 1.2), u(0.8, 1.2), u(0.08, 0.15));
            let (lh, lw) = (u(0.8, 1.2), u(0.06, 0.14));
            let (bh, bt) = (u(0.8, 1.4), u(0.06, 0.14));
            l.push([0.0, lh + t / 2.0, 0.0], [w, t, d]);
            l.push([0.0, lh + t + bh / 2.0, -d / 2.0 + bt / 2.0], [w, bh, bt]);
            l.legs(w, d, lw, lh);
        }
        Category::Table => {
            let (w, d, t) = (u(1.2, 2.0), u(0.7, 1.2), u(0.05, 0.12));
            let (lh, lw) = (u(0.9, 1.3), u(0.06, 0.16));
            l.push([0.0, lh + t / 2.0, 0.0], [w, t, d]);
            l.legs(w, d, lw, lh);
        }
        Category::Cabinet => {
            let (w, h, d) = (u(0.8, 1.4), u(1.0, 1.8), u(0.5, 0.9));
            let (bh, inset) = (u(0.05, 0.15), u(0.02, 0.08));
            let (tt, over) = (u(0.03, 0.08), u(0.0, 0.06));
            l.push([0.0, bh + h / 2.0, 0.0], [w, h, d]);
            l.push([0.0, bh / 2.0, 0.0], [w - 2.0 * inset, bh, d - 2.0 * inset]);
            l.push([0.0, bh + h + tt / 2.0, 0.0], [w + 2.0 * over, tt, d + 2.0 * over]);
        }
    }
    // center the bounding box at the origin and scale the largest half extent to 1
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for b in &l.boxes {
        for a in 0..3 {
            lo[a] = lo[a].min(b.center[a] - b.extents[a] / 2.0);
            hi[a] = hi[a].max(b.center[a] + b.extents[a] / 2.0);
        }
    }
    let mid = [0.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let half = (0..3).map(|a| (hi[a] - lo[a]) / 2.0).fold(0.0, f64::max);
    for b in &mut l.boxes {
        for a in 0..3 {
            // bounds snapped to f32 so that rounded surface samples stay inside
            let lo = ((b.center[a] - b.extents[a] / 2.0 - mid[a]) / half) as f32 as f64;
            let hi = ((b.center[a] + b.extents[a] / 2.0 - mid[a]) / half) as f32 as f64;
            b.center[a] = (lo + hi) / 2.0;
            b.extents[a] = hi - lo;
        }
    }
    l
}

fn round_f32(p: Point3) -> Point3 {
    p.map(|v| v as f32 as f64)
}

/// Generate one shape of `category` with `m` points, deterministically per seed.
///
/// Half of the points are sampled area-proportionally on the `x <= 0` half of
/// the assembly and the rest are their mirror images, so the cloud is exactly
/// symmetric for even `m`.
pub fn generate_shape(category: Category, seed: u64, m: usize) -> Result<PartSegmentedShape> {
    if m == 0 {
        return Err(Error::InvalidArgument("point count must be positive".into()));
    }
    let mut r = rng::seeded(seed);
    let Layout { boxes } = layout(category, &mut r);
    let probe = PartSegmentedShape {
        cloud: PointCloud::new(vec![[0.0; 3]])?,
        labels: vec![],
        parts: boxes.clone(),
        connectivity: vec![],
        category,
    };
    let partner = probe.mirror_partners();
    // parts sampled directly: on-plane parts (folded) and the x < 0 member of each pair
    let primary: Vec<usize> = (0..boxes.len())
        .filter(|&i| partner[i] == i || boxes[i].center[0] < 0.0)
        .collect();
    let weights: Vec<f64> = primary
        .iter()
        .map(|&i| if partner[i] == i { boxes[i].area() / 2.0 } else { boxes[i].area() })
        .collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let half = m / 2;
    let n_primary = m - half;
    let mut pts = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for k in 0..n_primary {
        // one guaranteed point per sampled part keeps small clouds free of empty parts
        let i = match primary.get(k) {
            Some(&i) => i,
            None => primary[pick.sample(&mut r)],
        };
        let mut p = boxes[i].sample_surface(&mut r);
        if partner[i] == i {
            p[0] = -p[0].abs();
        }
        pts.push(round_f32(p));
        labels.push(i as u16);
    }
    for k in 0..half {
        let p = pts[k];
        pts.push([-p[0], p[1], p[2]]);
        labels.push(partner[labels[k] as usize] as u16);
    }

    let mut connectivity = Vec::new();
    for a in 0..boxes.len() {
        for b in a + 1..boxes.len() {
            if boxes[a].touches(&boxes[b], 1e-9) {
                connectivity.push((a as u16, b as u16));
            }
        }
    }
    let shape = PartSegmentedShape {
        cloud: PointCloud::new(pts)?,
        labels,
        parts: boxes,
        connectivity,
        category,
    };
    Ok(shape)
}

/// Mean of the feature rows sharing each part label, as an `n_parts x L`
/// tensor on the graph.
pub fn part_mean_pool(g: &mut Graph, features: Var, labels: &[usize], n_parts: usize) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "part_mean_pool",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let m = labels.len();
    let mut counts = vec![0usize; n_parts];
    for &l in labels {
        if l >= n_parts {
            return Err(Error::InvalidArgument(format!("label {l} out of {n_parts} parts")));
        }
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyPart(empty));
    }
    let mut pool = vec![0.0; n_parts * m];
    for (k, &l) in labels.iter().enumerate() {
        pool[l * m + k] = 1.0 / counts[l] as f64;
    }
    let pool = g.constant(Tensor::matrix(n_parts, m, pool)?);
    g.matmul(pool, features)
}
