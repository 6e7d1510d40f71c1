//! Per-part box deformation (center shift plus axis-aligned scaling about the
//! part's initial box center), a direct gradient-based fitter, and exhaustive
//! oracle retrieval.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, sq_dist, Point3, PointCloud};
use crate::losses::{loss_chamfer, loss_symmetry};
use crate::nets::{scales_from_raw, scales_from_raw_var};
use crate::shapes::{PartSegmentedShape, SourceDatabase};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartParams {
    pub cd: [f64; 3],
    pub s: [f64; 3],
}

impl PartParams {
    pub const IDENTITY: PartParams = PartParams {
        cd: [0.0; 3],
        s: [1.0; 3],
    };
}

/// Deformation parameters keyed by part id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartDeformParams {
    pub parts: BTreeMap<u16, PartParams>,
}

impl PartDeformParams {
    pub fn identity(n_parts: usize) -> Self {
        PartDeformParams {
            parts: (0..n_parts as u16).map(|i| (i, PartParams::IDENTITY)).collect(),
        }
    }

    /// From per-part rows `[cd_x, cd_y, cd_z, raw_w, raw_h, raw_l]`.
    pub fn from_raw_rows(rows: &Tensor) -> Result<Self> {
        if rows.rank() != 2 || rows.cols() != 6 {
            return Err(Error::ShapeMismatch {
                op: "from_raw_rows",
                lhs: rows.shape().to_vec(),
                rhs: vec![0, 6],
            });
        }
        let parts = (0..rows.rows())
            .map(|i| {
                let r = rows.row(i);
                let params = PartParams {
                    cd: [r[0], r[1], r[2]],
                    s: scales_from_raw([r[3], r[4], r[5]]),
                };
                (i as u16, params)
            })
            .collect();
        Ok(PartDeformParams { parts })
    }

    pub fn validate(&self) -> Result<()> {
        for (id, p) in &self.parts {
            if p.cd.iter().chain(&p.s).any(|v| !v.is_finite()) || p.s.iter().any(|&s| s <= 0.0) {
                return Err(Error::InvalidArgument(format!("part {id}: scales must be positive and finite")));
            }
        }
        Ok(())
    }

    fn table(&self, n_parts: usize) -> Result<Vec<PartParams>> {
        self.validate()?;
        (0..n_parts)
            .map(|i| self.parts.get(&(i as u16)).copied().ok_or(Error::MissingPart(i)))
            .collect()
    }
}

/// `p' = C0 + C_d + S (p - C0)` per point, evaluated as
/// `p + C_d + (s - 1)(p - C0)` so identity parameters reproduce `p` exactly.
pub fn apply_deformation(shape: &PartSegmentedShape, params: &PartDeformParams) -> Result<PointCloud> {
    let table = params.table(shape.n_parts())?;
    let pts = shape
        .cloud
        .points()
        .iter()
        .zip(&shape.labels)
        .map(|(p, &l)| {
            let (pp, c0) = (&table[l as usize], shape.parts[l as usize].center);
            std::array::from_fn(|a| p[a] + pp.cd[a] + (pp.s[a] - 1.0) * (p[a] - c0[a]))
        })
        .collect();
    PointCloud::new(pts)
}

/// Graph form of [`apply_deformation`]: `cd` and `s` are `N_p x 3`.
pub fn apply_deformation_var(g: &mut Graph, shape: &PartSegmentedShape, cd: Var, s: Var) -> Result<Var> {
    let n = shape.n_parts();
    for v in [cd, s] {
        if g.shape(v) != [n, 3] {
            return Err(Error::ShapeMismatch {
                op: "apply_deformation",
                lhs: g.shape(v).to_vec(),
                rhs: vec![n, 3],
            });
        }
    }
    let m = shape.cloud.len();
    let labels = shape.labels_usize();
    let p = Tensor::matrix(m, 3, shape.cloud.to_flat())?;
    let offs: Vec<f64> = shape
        .cloud
        .points()
        .iter()
        .zip(&labels)
        .flat_map(|(p, &l)| {
            let c0 = shape.parts[l].center;
            [p[0] - c0[0], p[1] - c0[1], p[2] - c0[2]]
        })
        .collect();
    let p = g.constant(p);
    let offs = g.constant(Tensor::matrix(m, 3, offs)?);
    let one = g.constant(Tensor::vector(vec![1.0; 3]));
    let cdp = g.gather_rows(cd, &labels)?;
    let sp = g.gather_rows(s, &labels)?;
    let sm1 = g.sub(sp, one)?;
    let stretch = g.mul(sm1, offs)?;
    let out = g.add(p, cdp)?;
    g.add(out, stretch)
}

/// Deform from per-part raw rows `[cd | raw scales]` (`N_p x 6`).
pub fn apply_raw_var(g: &mut Graph, shape: &PartSegmentedShape, raw: Var) -> Result<Var> {
    let cd = g.slice_cols(raw, 0, 3)?;
    let r = g.slice_cols(raw, 3, 6)?;
    let s = scales_from_raw_var(g, r);
    apply_deformation_var(g, shape, cd, s)
}

/// Closest labeled point pair `(i in a, j in b)` for every connectivity edge.
pub fn contact_pairs(shape: &PartSegmentedShape) -> Vec<(usize, usize)> {
    let pts = shape.cloud.points();
    shape
        .connectivity
        .iter()
        .filter_map(|&(a, b)| {
            let ia: Vec<usize> = (0..pts.len()).filter(|&k| shape.labels[k] == a).collect();
            let ib: Vec<usize> = (0..pts.len()).filter(|&k| shape.labels[k] == b).collect();
            let mut best: Option<(f64, usize, usize)> = None;
            for &i in &ia {
                for &j in &ib {
                    let d = sq_dist(&pts[i], &pts[j]);
                    if best.map_or(true, |(bd, _, _)| d < bd) {
                        best = Some((d, i, j));
                    }
                }
            }
            best.map(|(_, i, j)| (i, j))
        })
        .collect()
}

/// Mean squared change of the gap vector across each contact pair.
pub fn connectivity_penalty(g: &mut Graph, shape: &PartSegmentedShape, deformed: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (ia, ib): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let gap0: Vec<f64> = pairs
        .iter()
        .flat_map(|&(i, j)| {
            let (p, q) = (shape.cloud.points()[i], shape.cloud.points()[j]);
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
        })
        .collect();
    let a = g.gather_rows(deformed, &ia)?;
    let b = g.gather_rows(deformed, &ib)?;
    let gap = g.sub(b, a)?;
    let gap0 = g.constant(Tensor::matrix(pairs.len(), 3, gap0)?);
    let d = g.sub(gap, gap0)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / pairs.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub symmetry_weight: f64,
    pub connectivity_weight: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            steps: 500,
            lr: 0.02,
            symmetry_weight: 0.1,
            connectivity_weight: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: PartDeformParams,
    /// Chamfer to the target at the best parameters seen.
    pub chamfer: f64,
    pub initial_chamfer: f64,
}

/// Fit per-part parameters to `target` with AdamW from the identity.
pub fn fit_deformation_direct(source: &PartSegmentedShape, target: &PointCloud, steps: usize, lr: f64) -> Result<FitResult> {
    fit_deformation_with(source, target, &FitOptions { steps, lr, ..FitOptions::default() })
}

pub fn fit_deformation_with(source: &PartSegmentedShape, target: &PointCloud, opts: &FitOptions) -> Result<FitResult> {
    if opts.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let n = source.n_parts();
    let mut store = ParamStore::new();
    store.insert("raw", Tensor::zeros(&[n, 6]), true);
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let t = Tensor::matrix(target.len(), 3, target.to_flat())?;
    let pairs = if opts.connectivity_weight > 0.0 {
        contact_pairs(source)
    } else {
        Vec::new()
    };
    let mut best: Option<(f64, Tensor)> = None;
    let mut initial = f64::NAN;
    for step in 0..=opts.steps {
        let raw_value = store.entry(0).value.clone();
        let mut g = Graph::new();
        let raw = g.param(raw_value.clone());
        let tv = g.constant(t.clone());
        let d = apply_raw_var(&mut g, source, raw)?;
        let cd = loss_chamfer(&mut g, d, tv)?;
        let cdv = g.value(cd).item();
        if !cdv.is_finite() {
            return Err(Error::NonFiniteLoss("cd"));
        }
        if step == 0 {
            initial = cdv;
        }
        if best.as_ref().map_or(true, |(b, _)| cdv < *b) {
            best = Some((cdv, raw_value));
        }
        if step == opts.steps {
            break;
        }
        let mut loss = cd;
        if opts.symmetry_weight > 0.0 {
            let sym = loss_symmetry(&mut g, d)?;
            let sym = g.scale(sym, opts.symmetry_weight);
            loss = g.add(loss, sym)?;
        }
        if opts.connectivity_weight > 0.0 {
            let c = connectivity_penalty(&mut g, source, d, &pairs)?;
            let c = g.scale(c, opts.connectivity_weight);
            loss = g.add(loss, c)?;
        }
        g.backward(loss)?;
        opt.step(&mut store, &[g.grad(raw).map(Tensor::into_data)]);
    }
    let (chamfer, raw) = best.expect("at least one evaluation");
    Ok(FitResult {
        params: PartDeformParams::from_raw_rows(&raw)?,
        chamfer,
        initial_chamfer: initial,
    })
}

/// Anything that deforms a source toward a target cloud.
pub trait Deformer: Sync {
    fn deform(&self, source: &PartSegmentedShape, target: &PointCloud) -> Result<PointCloud>;
}

/// Leaves sources untouched (rigid retrieval baseline).
pub struct IdentityDeformer;

impl Deformer for IdentityDeformer {
    fn deform(&self, source: &PartSegmentedShape, _target: &PointCloud) -> Result<PointCloud> {
        Ok(source.cloud.clone())
    }
}

/// Per-source direct fit.
pub struct DirectFitDeformer(pub FitOptions);

impl Deformer for DirectFitDeformer {
    fn deform(&self, source: &PartSegmentedShape, target: &PointCloud) -> Result<PointCloud> {
        let fit = fit_deformation_with(source, target, &self.0)?;
        apply_deformation(source, &fit.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutcome {
    pub index: usize,
    pub id: String,
    pub chamfer: f64,
    /// Chamfer for every source, in database order.
    pub per_source: Vec<f64>,
}

/// Deform every source toward `target` and keep the closest.
pub fn oracle_retrieval(db: &SourceDatabase, target: &PointCloud, deformer: &dyn Deformer) -> Result<OracleOutcome> {
    oracle_retrieval_split(db, target, target, deformer)
}

/// As [`oracle_retrieval`], but fit to `fit_target` and score against
/// `eval_target` (e.g. fit the partial scan, score the full shape).
pub fn oracle_retrieval_split(
    db: &SourceDatabase,
    fit_target: &PointCloud,
    eval_target: &PointCloud,
    deformer: &dyn Deformer,
) -> Result<OracleOutcome> {
    if db.is_empty() {
        return Err(Error::InvalidArgument("empty database".into()));
    }
    let per_source = db
        .entries()
        .par_iter()
        .map(|e| {
            let d = deformer.deform(&e.shape, fit_target)?;
            chamfer_distance(d.points(), eval_target.points())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut index = 0;
    for (i, &c) in per_source.iter().enumerate() {
        if c < per_source[index] {
            index = i;
        }
    }
    Ok(OracleOutcome {
        index,
        id: db.get(index).id.clone(),
        chamfer: per_source[index],
        per_source,
    })
}

/// Random mirror-consistent parameters: partner parts get x-negated
/// displacements and equal scales, on-plane parts get no x displacement.
pub fn random_symmetric_params(shape: &PartSegmentedShape, r: &mut crate::rng::Rng, max_shift: f64, max_log_scale: f64) -> PartDeformParams {
    use rand::Rng as _;
    let partner = shape.mirror_partners();
    let mut parts = BTreeMap::new();
    for i in 0..shape.n_parts() {
        if parts.contains_key(&(i as u16)) {
            continue;
        }
        let mut cd: [f64; 3] = std::array::from_fn(|_| r.random_range(-max_shift..=max_shift));
        let s: [f64; 3] = std::array::from_fn(|_| r.random_range(-max_log_scale..=max_log_scale).exp());
        let j = partner[i];
        if j == i {
            cd[0] = 0.0;
        } else {
            parts.insert(j as u16, PartParams { cd: [-cd[0], cd[1], cd[2]], s });
        }
        parts.insert(i as u16, PartParams { cd, s });
    }
    PartDeformParams { parts }
}

/// Per-part bounding box `(center, extents)` of labeled points.
pub fn part_bounds(points: &[Point3], labels: &[u16], part: u16) -> Option<(Point3, [f64; 3])> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for (p, &l) in points.iter().zip(labels) {
        if l == part {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    any.then(|| (std::array::from_fn(|a| (lo[a] + hi[a]) / 2.0), std::array::from_fn(|a| hi[a] - lo[a])))
}

#[cfg(test)]
mod tests;
