//! Training objectives on the autodiff graph.
//!
//! Nearest-neighbor assignments are recomputed from forward values on every
//! call and treated as constants by the backward pass. The `*_with` variants
//! take the assignments explicitly so gradient checks can freeze them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{nearest_neighbors, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 3.0,
            lambda1: 0.3,
            lambda2: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cd: f64,
    pub sym: f64,
    pub recon: f64,
    pub re: f64,
    pub co1: f64,
    pub co2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_FIELDS: [&'static str; 7] = ["cd", "sym", "recon", "re", "co1", "co2", "total"];

    pub fn values(&self) -> [f64; 7] {
        [self.cd, self.sym, self.recon, self.re, self.co1, self.co2, self.total]
    }
}

/// Combine components into a breakdown:
/// `total = l0 (cd + sym + recon) + l1 re + l2 (co1 + co2)`.
pub fn loss_total(cd: f64, sym: f64, recon: f64, re: f64, co1: f64, co2: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("cd", cd), ("sym", sym), ("recon", recon), ("re", re), ("co1", co1), ("co2", co2)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    let total = w.lambda0 * (cd + sym + recon) + w.lambda1 * re + w.lambda2 * (co1 + co2);
    Ok(LossBreakdown {
        cd,
        sym,
        recon,
        re,
        co1,
        co2,
        total,
    })
}

/// Graph variables of each component, before weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cd: Var,
    pub sym: Var,
    pub recon: Var,
    pub re: Var,
    pub co1: Var,
    pub co2: Var,
}

impl LossVars {
    /// Weighted total on the graph, plus the breakdown of forward values.
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
        let v = |x: Var| g.value(x).item();
        let breakdown = loss_total(v(self.cd), v(self.sym), v(self.recon), v(self.re), v(self.co1), v(self.co2), w)?;
        let b = g.add(self.cd, self.sym)?;
        let b = g.add(b, self.recon)?;
        let b = g.scale(b, w.lambda0);
        let re = g.scale(self.re, w.lambda1);
        let co = g.add(self.co1, self.co2)?;
        let co = g.scale(co, w.lambda2);
        let t = g.add(b, re)?;
        let total = g.add(t, co)?;
        Ok((total, breakdown))
    }
}

fn check_cloud(g: &Graph, v: Var, op: &'static str) -> Result<usize> {
    let s = g.shape(v);
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 3],
        });
    }
    if s[0] == 0 {
        return Err(Error::EmptyCloud);
    }
    Ok(s[0])
}

pub fn points_of(g: &Graph, v: Var) -> Vec<Point3> {
    g.value(v).to_points()
}

/// Mean over rows of the squared row norm of `a`.
fn mean_row_sq(g: &mut Graph, a: Var) -> Var {
    let rows = g.shape(a)[0];
    let s = g.square(a);
    let s = g.sum(s);
    g.scale(s, 1.0 / rows as f64)
}

/// Nearest index in `q` for every row of `p` (forward values).
pub fn assign(g: &Graph, p: Var, q: Var) -> Result<Vec<usize>> {
    Ok(nearest_neighbors(&points_of(g, p), &points_of(g, q))?.indices)
}

/// `mean_i |P_i + R_i - Q_{nn(i)}|^2` with `nn` the nearest neighbor of
/// `P_i` in `Q`.
pub fn loss_re(g: &mut Graph, p: Var, r: Var, q: Var) -> Result<Var> {
    check_cloud(g, q, "loss_re").map_err(|e| match e {
        Error::EmptyCloud => Error::EmptyNeighborTarget,
        e => e,
    })?;
    let nn = assign(g, p, q)?;
    loss_re_with(g, p, r, q, &nn)
}

pub fn loss_re_with(g: &mut Graph, p: Var, r: Var, q: Var, nn: &[usize]) -> Result<Var> {
    check_cloud(g, p, "loss_re")?;
    let qi = g.gather_rows(q, nn)?;
    let d = g.add(p, r)?;
    let d = g.sub(d, qi)?;
    Ok(mean_row_sq(g, d))
}

/// Squared-distance Chamfer: both directional means of nearest-neighbor
/// squared distances, summed.
pub fn loss_chamfer(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_cloud(g, a, "loss_chamfer")?;
    check_cloud(g, b, "loss_chamfer")?;
    let ab = assign(g, a, b)?;
    let ba = assign(g, b, a)?;
    chamfer_with(g, a, b, &ab, &ba)
}

pub fn chamfer_with(g: &mut Graph, a: Var, b: Var, ab: &[usize], ba: &[usize]) -> Result<Var> {
    let bn = g.gather_rows(b, ab)?;
    let an = g.gather_rows(a, ba)?;
    let d1 = g.sub(a, bn)?;
    let d2 = g.sub(b, an)?;
    let m1 = mean_row_sq(g, d1);
    let m2 = mean_row_sq(g, d2);
    g.add(m1, m2)
}

/// Which directions of the Chamfer term fit a deformed source to a partial
/// observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartialChamfer {
    /// Both directional means, as for full targets.
    Symmetric,
    /// Observed points to the deformed source only; occluded regions are
    /// left to the cross-branch terms.
    Observed,
}

impl std::str::FromStr for PartialChamfer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(PartialChamfer::Symmetric),
            "observed" => Ok(PartialChamfer::Observed),
            o => Err(Error::InvalidArgument(format!("unknown chamfer mode `{o}`"))),
        }
    }
}

impl PartialChamfer {
    pub fn name(self) -> &'static str {
        match self {
            PartialChamfer::Symmetric => "symmetric",
            PartialChamfer::Observed => "observed",
        }
    }
}

/// `mean_j |b_j - a_{ba[j]}|^2`: how well `a` covers `b`.
pub fn coverage_with(g: &mut Graph, a: Var, b: Var, ba: &[usize]) -> Result<Var> {
    let an = g.gather_rows(a, ba)?;
    let d = g.sub(b, an)?;
    Ok(mean_row_sq(g, d))
}

fn reflect(g: &mut Graph, d: Var) -> Result<Var> {
    let flip = g.constant(Tensor::vector(vec![-1.0, 1.0, 1.0]));
    g.mul(d, flip)
}

/// Chamfer between a cloud and its mirror image about `x = 0`.
pub fn loss_symmetry(g: &mut Graph, d: Var) -> Result<Var> {
    check_cloud(g, d, "loss_symmetry")?;
    let m = reflect(g, d)?;
    loss_chamfer(g, d, m)
}

pub fn symmetry_with(g: &mut Graph, d: Var, ab: &[usize], ba: &[usize]) -> Result<Var> {
    let m = reflect(g, d)?;
    chamfer_with(g, d, m, ab, ba)
}

/// Set-to-set reconstruction error (Chamfer form).
pub fn loss_recon(g: &mut Graph, reconstructed: Var, input: Var) -> Result<Var> {
    loss_chamfer(g, reconstructed, input)
}

/// Cross-branch consistency: mean squared pointwise distance between the two
/// deformed clouds and between the two residual fields.
pub fn loss_consistency(g: &mut Graph, dp: Var, df: Var, rp: Var, rf: Var) -> Result<(Var, Var)> {
    for (a, b) in [(dp, df), (rp, rf)] {
        if g.shape(a) != g.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "loss_consistency",
                lhs: g.shape(a).to_vec(),
                rhs: g.shape(b).to_vec(),
            });
        }
        check_cloud(g, a, "loss_consistency")?;
    }
    let d = g.sub(dp, df)?;
    let r = g.sub(rp, rf)?;
    Ok((mean_row_sq(g, d), mean_row_sq(g, r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check_many, Tensor};
    use crate::geometry::{chamfer_distance, reflect_bilateral, PointCloud};
    use crate::rng;
    use crate::shapes::{generate_shape, Category};
    use rand::Rng as _;

    fn cloud(m: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(m, 3, (0..3 * m).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn scalar(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn residual_loss_cases() {
        let p = cloud(16, 1);
        let q = cloud(24, 2);
        // perfect residual: R_i = Q_nn(i) - P_i
        let nn = nearest_neighbors(&p.to_points(), &q.to_points()).unwrap().indices;
        let perfect: Vec<f64> = (0..16)
            .flat_map(|i| (0..3).map(move |a| (i, a)))
            .map(|(i, a)| q.row(nn[i])[a] - p.row(i)[a])
            .collect();
        let r = Tensor::matrix(16, 3, perfect).unwrap();
        let v = scalar(|g| {
            let (p, r, q) = (g.constant(p.clone()), g.constant(r), g.constant(q.clone()));
            loss_re(g, p, r, q)
        });
        assert!(v.abs() < 1e-24);

        let v = scalar(|g| {
            let (p, r, q) = (g.constant(p.clone()), g.constant(Tensor::zeros(&[16, 3])), g.constant(p.clone()));
            loss_re(g, p, r, q)
        });
        assert_eq!(v, 0.0);

        let v = scalar(|g| {
            let p = g.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0]]));
            let q = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0]]));
            let r = g.constant(Tensor::zeros(&[1, 3]));
            loss_re(g, p, r, q)
        });
        assert_eq!(v, 1.0);

        let mut g = Graph::new();
        let (p, r) = (g.constant(p.clone()), g.constant(Tensor::zeros(&[16, 3])));
        let q = g.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(loss_re(&mut g, p, r, q), Err(Error::EmptyNeighborTarget)));
    }

    #[test]
    fn chamfer_matches_geometry() {
        for seed in 0..10 {
            let (a, b) = (cloud(32, seed), cloud(20, seed + 50));
            let v = scalar(|g| {
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                loss_chamfer(g, x, y)
            });
            let want = chamfer_distance(&a.to_points(), &b.to_points()).unwrap();
            assert!((v - want).abs() <= 1e-12 * want.max(1.0));
        }
        let a = cloud(8, 3);
        let mut g = Graph::new();
        let x = g.param(a.clone());
        let y = g.constant(a);
        let l = loss_chamfer(&mut g, x, y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetry_cases() {
        let s = generate_shape(Category::Chair, 2, 256).unwrap();
        let v = scalar(|g| {
            let x = g.constant(Tensor::matrix(256, 3, s.cloud.to_flat()).unwrap());
            loss_symmetry(g, x)
        });
        assert_eq!(v, 0.0);
        let v = scalar(|g| {
            let x = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0]]));
            loss_symmetry(g, x)
        });
        assert_eq!(v, 8.0);
        let c = PointCloud::new(cloud(12, 4).to_points()).unwrap();
        let want = chamfer_distance(c.points(), reflect_bilateral(&c).points()).unwrap();
        let v = scalar(|g| {
            let x = g.constant(Tensor::matrix(12, 3, c.to_flat()).unwrap());
            loss_symmetry(g, x)
        });
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn recon_is_a_set_metric() {
        let (a, b) = (cloud(16, 7), cloud(16, 8));
        let base = scalar(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            loss_recon(g, x, y)
        });
        assert!((base - chamfer_distance(&a.to_points(), &b.to_points()).unwrap()).abs() < 1e-12);
        let rev: Vec<f64> = (0..16).rev().flat_map(|i| a.row(i).to_vec()).collect();
        let perm = scalar(|g| {
            let (x, y) = (g.constant(Tensor::matrix(16, 3, rev).unwrap()), g.constant(b.clone()));
            loss_recon(g, x, y)
        });
        assert!((perm - base).abs() < 1e-15);
        let same = scalar(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(a.clone()));
            loss_recon(g, x, y)
        });
        assert_eq!(same, 0.0);
    }

    #[test]
    fn consistency_cases() {
        let (d, r) = (cloud(16, 1), cloud(16, 2));
        let mut g = Graph::new();
        let (a, b, c, e) = (g.constant(d.clone()), g.constant(d.clone()), g.constant(r.clone()), g.constant(r.clone()));
        let (co1, co2) = loss_consistency(&mut g, a, b, c, e).unwrap();
        assert_eq!((g.value(co1).item(), g.value(co2).item()), (0.0, 0.0));

        let eps = 0.125;
        let shifted = g.constant(Tensor::new(vec![16, 3], d.data().iter().enumerate().map(|(k, v)| if k % 3 == 0 { v + eps } else { *v }).collect()).unwrap());
        let (co1, _) = loss_consistency(&mut g, a, shifted, c, e).unwrap();
        assert!((g.value(co1).item() - eps * eps).abs() < 1e-15);

        let short = g.constant(cloud(15, 3));
        assert!(loss_consistency(&mut g, a, short, c, e).is_err());
    }

    #[test]
    fn total_weights() {
        let w = LossWeights::default();
        assert_eq!(loss_total(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &w).unwrap().total, 0.0);
        assert_eq!(loss_total(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, &w).unwrap().total, 3.0);
        assert_eq!(loss_total(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, &w).unwrap().total, 0.3);
        let err = loss_total(0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0, &w).unwrap_err();
        assert_eq!(err.to_string(), "non-finite loss component `sym`");
    }

    #[test]
    fn frozen_assignment_gradients() {
        let (a, b, r) = (cloud(16, 11), cloud(16, 12), cloud(16, 13));
        let pa = a.to_points();
        let pb = b.to_points();
        let ab = nearest_neighbors(&pa, &pb).unwrap().indices;
        let ba = nearest_neighbors(&pb, &pa).unwrap().indices;
        let rep = finite_diff_check_many(|g, x| chamfer_with(g, x[0], x[1], &ab, &ba), &[a.clone(), b.clone()], 1e-4, 1e-6, None).unwrap();
        assert!(rep.passed, "{rep:?}");

        let ma: Vec<Point3> = pa.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let sab = nearest_neighbors(&pa, &ma).unwrap().indices;
        let sba = nearest_neighbors(&ma, &pa).unwrap().indices;
        let rep = finite_diff_check_many(|g, x| symmetry_with(g, x[0], &sab, &sba), &[a.clone()], 1e-4, 1e-6, None).unwrap();
        assert!(rep.passed, "{rep:?}");

        let rep = finite_diff_check_many(|g, x| loss_re_with(g, x[0], x[1], x[2], &ab), &[a.clone(), r.clone(), b.clone()], 1e-4, 1e-6, None).unwrap();
        assert!(rep.passed, "{rep:?}");

        let rep = finite_diff_check_many(
            |g, x| {
                let (c1, c2) = loss_consistency(g, x[0], x[1], x[2], x[3])?;
                g.add(c1, c2)
            },
            &[a.clone(), b.clone(), r.clone(), cloud(16, 14)],
            1e-4,
            1e-6,
            None,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn coverage_is_the_observed_half_of_chamfer() {
        let a = cloud(20, 21);
        let b = cloud(12, 22);
        let (pa, pb) = (a.to_points(), b.to_points());
        let ab = nearest_neighbors(&pa, &pb).unwrap().indices;
        let ba = nearest_neighbors(&pb, &pa).unwrap().indices;
        let cov = scalar(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            coverage_with(g, x, y, &ba)
        });
        let rev = scalar(|g| {
            let (x, y) = (g.constant(b.clone()), g.constant(a.clone()));
            coverage_with(g, x, y, &ab)
        });
        let cd = crate::geometry::chamfer_distance(&pa, &pb).unwrap();
        assert!((cov + rev - cd).abs() < 1e-12 * cd);

        // a superset of b covers it exactly
        let sup = Tensor::matrix(32, 3, a.data().iter().chain(b.data()).copied().collect()).unwrap();
        let ba = nearest_neighbors(&pb, &sup.to_points()).unwrap().indices;
        let v = scalar(|g| {
            let (x, y) = (g.constant(sup.clone()), g.constant(b.clone()));
            coverage_with(g, x, y, &ba)
        });
        assert_eq!(v, 0.0);

        let rep = finite_diff_check_many(|g, x| coverage_with(g, x[0], x[1], &ba), &[sup.clone(), b.clone()], 1e-4, 1e-6, None).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn partial_chamfer_names_round_trip() {
        for m in [PartialChamfer::Symmetric, PartialChamfer::Observed] {
            assert_eq!(m.name().parse::<PartialChamfer>().unwrap(), m);
        }
        assert!("both".parse::<PartialChamfer>().is_err());
    }
}
