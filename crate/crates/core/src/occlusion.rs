//! Partial-observation simulation: ball, plane and random-mask occlusion with
//! ratio control and additive Gaussian sensor noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resample_indices, sq_dist, Point3, PointCloud};
use crate::rng;

/// Allowed gap between the requested and the achieved removal ratio.
pub const RATIO_TOLERANCE: f64 = 0.02;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
const MAX_BISECTION: usize = 64;

/// Occlusion family. Anchors left as `None` are drawn from the spec seed: a
/// ball is centered on a random cloud point, a plane gets a random normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OcclusionKind {
    Ball { center: Option<Point3> },
    Plane { normal: Option<Point3> },
    Mask,
    Composite,
}

impl OcclusionKind {
    pub fn name(&self) -> &'static str {
        match self {
            OcclusionKind::Ball { .. } => "ball",
            OcclusionKind::Plane { .. } => "plane",
            OcclusionKind::Mask => "mask",
            OcclusionKind::Composite => "composite",
        }
    }
}

impl std::str::FromStr for OcclusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ball" => OcclusionKind::Ball { center: None },
            "plane" => OcclusionKind::Plane { normal: None },
            "mask" => OcclusionKind::Mask,
            "composite" => OcclusionKind::Composite,
            other => return Err(Error::InvalidArgument(format!("unknown occlusion kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    #[serde(flatten)]
    pub kind: OcclusionKind,
    pub target_ratio: f64,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl OcclusionSpec {
    pub fn new(kind: OcclusionKind, target_ratio: f64, seed: u64) -> Self {
        OcclusionSpec {
            kind,
            target_ratio,
            seed,
            noise_sigma: DEFAULT_NOISE_SIGMA,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_ratio) {
            return Err(Error::InvalidArgument(format!(
                "target_ratio {} outside [0, 1)",
                self.target_ratio
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if let OcclusionKind::Plane { normal: Some(n) } = self.kind {
            let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (len - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("plane normal has length {len}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialObservation {
    pub partial: PointCloud,
    /// Index into the full cloud for every partial point.
    pub correspondence: Vec<usize>,
    pub achieved_ratio: f64,
}

/// Indices of points at distance `>= radius` from `center`.
pub fn occlude_ball(cloud: &PointCloud, center: Point3, radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    (0..cloud.len())
        .filter(|&i| radius <= 0.0 || sq_dist(&cloud.points()[i], &center) >= r2)
        .collect()
}

/// Indices of points with `dot(p, normal) <= offset`.
pub fn occlude_plane(cloud: &PointCloud, normal: Point3, offset: f64) -> Vec<usize> {
    (0..cloud.len()).filter(|&i| dot(&cloud.points()[i], &normal) <= offset).collect()
}

/// Remove exactly `floor(fraction * M)` uniformly chosen points.
pub fn occlude_mask(cloud: &PointCloud, fraction: f64, seed: u64) -> Vec<usize> {
    let n = cloud.len();
    let drop = ((fraction.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    mask_drop(n, drop, &mut rng::seeded(seed))
}

fn mask_drop(n: usize, drop: usize, r: &mut rng::Rng) -> Vec<usize> {
    let mut dead = vec![false; n];
    for i in rand::seq::index::sample(r, n, drop) {
        dead[i] = true;
    }
    (0..n).filter(|&i| !dead[i]).collect()
}

fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn random_unit(r: &mut rng::Rng) -> Point3 {
    loop {
        let v: Point3 = [0, 1, 2].map(|_| StandardNormal.sample(r));
        let len = dot(&v, &v).sqrt();
        if len > 1e-12 {
            return v.map(|x| x / len);
        }
    }
}

/// Bisect a monotone removal count `removed(t)` (non-decreasing in `t` on
/// `[lo, hi]`) towards `want` removed points; returns the best parameter's
/// survivors.
fn bisect<F>(mut lo: f64, mut hi: f64, want: usize, total: usize, survivors: F) -> Result<Vec<usize>>
where
    F: Fn(f64) -> Vec<usize>,
{
    let ratio = |s: &Vec<usize>| (total - s.len()) as f64 / total as f64;
    let target = want as f64 / total as f64;
    let mut best = survivors(lo);
    for _ in 0..MAX_BISECTION {
        let mid = 0.5 * (lo + hi);
        let s = survivors(mid);
        let removed = total - s.len();
        if (ratio(&s) - target).abs() < (ratio(&best) - target).abs() {
            best = s;
        }
        if removed == want {
            break;
        }
        if removed < want {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let achieved = ratio(&best);
    if (achieved - target).abs() > RATIO_TOLERANCE {
        return Err(Error::UnreachableRatio { target, achieved });
    }
    Ok(best)
}

/// Remove about `want` of the points listed in `alive` (indices into `cloud`).
fn stage(kind: &OcclusionKind, cloud: &PointCloud, alive: &[usize], want: usize, r: &mut rng::Rng) -> Result<Vec<usize>> {
    if want == 0 {
        return Ok(alive.to_vec());
    }
    let sub = cloud.select(alive)?;
    let local = match *kind {
        OcclusionKind::Ball { center } => {
            let c = center.unwrap_or_else(|| sub.points()[r.random_range(0..sub.len())]);
            let far = sub.points().iter().map(|p| sq_dist(p, &c)).fold(0.0, f64::max).sqrt();
            bisect(0.0, far + 1.0, want, sub.len(), |rad| occlude_ball(&sub, c, rad))?
        }
        OcclusionKind::Plane { normal } => {
            let n = normal.unwrap_or_else(|| random_unit(r));
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in sub.points() {
                lo = lo.min(dot(p, &n));
                hi = hi.max(dot(p, &n));
            }
            // removal grows as the offset falls, so bisect on the negated offset
            bisect(-(hi + 1.0), -(lo - 1.0), want, sub.len(), |t| occlude_plane(&sub, n, -t))?
        }
        OcclusionKind::Mask => mask_drop(sub.len(), want.min(sub.len()), r),
        OcclusionKind::Composite => unreachable!("composite stages are expanded by the caller"),
    };
    Ok(local.into_iter().map(|i| alive[i]).collect())
}

/// Occlude `cloud` per `spec`, resample the survivors to `m_out` points and
/// add per-axis Gaussian noise after recording correspondences.
pub fn simulate(cloud: &PointCloud, spec: &OcclusionSpec, m_out: usize) -> Result<PartialObservation> {
    spec.validate()?;
    if m_out == 0 {
        return Err(Error::InvalidArgument("output point count must be positive".into()));
    }
    let n = cloud.len();
    let total_want = (spec.target_ratio * n as f64).round() as usize;
    let stages: Vec<(OcclusionKind, usize)> = match spec.kind {
        OcclusionKind::Composite => {
            // cumulative removal after stage k is k/3 of the requested count
            let cum = |k: usize| (spec.target_ratio * n as f64 * k as f64 / 3.0).round() as usize;
            vec![
                (OcclusionKind::Ball { center: None }, cum(1)),
                (OcclusionKind::Plane { normal: None }, cum(2) - cum(1)),
                (OcclusionKind::Mask, 0),
            ]
        }
        k => vec![(k, total_want)],
    };
    let mut r = rng::stream(spec.seed, rng::Stream::Occlusion);
    let mut alive: Vec<usize> = (0..n).collect();
    let last = stages.len() - 1;
    for (k, (kind, want)) in stages.iter().enumerate() {
        // the last composite stage tops the removal up to the exact total
        let want = if spec.kind == OcclusionKind::Composite && k == last {
            total_want.saturating_sub(n - alive.len())
        } else {
            *want
        };
        alive = stage(kind, cloud, &alive, want, &mut r)?;
    }
    if alive.is_empty() {
        return Err(Error::NoSurvivors);
    }
    let achieved_ratio = (n - alive.len()) as f64 / n as f64;
    if (achieved_ratio - spec.target_ratio).abs() > RATIO_TOLERANCE {
        return Err(Error::UnreachableRatio {
            target: spec.target_ratio,
            achieved: achieved_ratio,
        });
    }
    let picks = resample_indices(alive.len(), m_out, &mut r)?;
    let correspondence: Vec<usize> = picks.iter().map(|&i| alive[i]).collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let points = correspondence
        .iter()
        .map(|&i| {
            let p = cloud.points()[i];
            if spec.noise_sigma == 0.0 {
                p
            } else {
                p.map(|v| v + noise.sample(&mut r))
            }
        })
        .collect();
    Ok(PartialObservation {
        partial: PointCloud::new(points)?,
        correspondence,
        achieved_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{generate_shape, Category};
    use proptest::prelude::*;

    fn corners(h: f64) -> PointCloud {
        let mut v = Vec::new();
        for x in [-h, h] {
            for y in [-h, h] {
                for z in [-h, h] {
                    v.push([x, y, z]);
                }
            }
        }
        PointCloud::new(v).unwrap()
    }

    #[test]
    fn ball_cases() {
        let c = corners(1.0);
        assert_eq!(occlude_ball(&c, [0.5; 3], 0.0).len(), 8);
        assert!(occlude_ball(&c, c.centroid(), 10.0).is_empty());
        // corners sit at distances 0, 2, 2*sqrt(2), 2*sqrt(3) from (1,1,1)
        let s = occlude_ball(&c, [1.0; 3], 1.1);
        assert_eq!(s, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn plane_cases() {
        let c = corners(1.0);
        assert_eq!(occlude_plane(&c, [0.0, 0.0, 1.0], 1e300).len(), 8);
        let s = occlude_plane(&c, [0.0, 0.0, 1.0], 0.0);
        assert!(s.iter().all(|&i| c.points()[i][2] == -1.0));
        assert_eq!(s.len(), 4);
        let flip = occlude_plane(&c, [0.0, 0.0, -1.0], 0.0);
        let mut all: Vec<usize> = s.iter().chain(&flip).copied().collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn mask_cases() {
        let s = generate_shape(Category::Chair, 0, 1024).unwrap().cloud;
        assert_eq!(occlude_mask(&s, 0.0, 1).len(), 1024);
        assert_eq!(occlude_mask(&s, 0.5, 1).len(), 512);
        assert_eq!(occlude_mask(&s, 0.3, 7), occlude_mask(&s, 0.3, 7));
    }

    #[test]
    fn zero_ratio_without_noise_is_exact() {
        let s = generate_shape(Category::Table, 3, 1024).unwrap().cloud;
        let spec = OcclusionSpec::new(OcclusionKind::Ball { center: None }, 0.0, 1).with_noise(0.0);
        let obs = simulate(&s, &spec, 1024).unwrap();
        assert_eq!(obs.achieved_ratio, 0.0);
        for (p, &j) in obs.partial.points().iter().zip(&obs.correspondence) {
            assert_eq!(*p, s.points()[j]);
        }
    }

    #[test]
    fn ratio_control_for_every_kind() {
        let s = generate_shape(Category::Chair, 8, 1024).unwrap().cloud;
        for kind in ["ball", "plane", "mask", "composite"] {
            for t in [0.25, 0.5, 0.75] {
                for seed in 0..4 {
                    let spec = OcclusionSpec::new(kind.parse().unwrap(), t, seed);
                    let obs = simulate(&s, &spec, 1024).unwrap();
                    assert!((obs.achieved_ratio - t).abs() <= RATIO_TOLERANCE, "{kind} {t} {seed}");
                    assert_eq!(obs.partial.len(), 1024);
                }
            }
        }
    }

    #[test]
    fn degenerate_cloud_is_unreachable() {
        let c = PointCloud::new(vec![[0.5; 3]; 100]).unwrap();
        let spec = OcclusionSpec::new(OcclusionKind::Ball { center: None }, 0.5, 0);
        assert!(matches!(simulate(&c, &spec, 64), Err(Error::UnreachableRatio { .. })));
    }

    #[test]
    fn spec_validation() {
        let bad = OcclusionSpec::new(OcclusionKind::Mask, 1.0, 0);
        assert!(bad.validate().is_err());
        let bad = OcclusionSpec::new(OcclusionKind::Plane { normal: Some([1.0, 1.0, 0.0]) }, 0.2, 0);
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn larger_radius_never_keeps_more(seed in 0u64..1000, r1 in 0.0f64..2.0, dr in 0.0f64..1.0) {
            let s = generate_shape(Category::Cabinet, seed, 256).unwrap().cloud;
            let c = s.points()[0];
            prop_assert!(occlude_ball(&s, c, r1 + dr).len() <= occlude_ball(&s, c, r1).len());
        }

        #[test]
        fn noiseless_partials_match_their_sources(seed in 0u64..1000, t in 0.0f64..0.8) {
            let s = generate_shape(Category::Chair, seed, 256).unwrap().cloud;
            let spec = OcclusionSpec::new(OcclusionKind::Composite, t, seed).with_noise(0.0);
            let obs = simulate(&s, &spec, 256).unwrap();
            for (p, &j) in obs.partial.points().iter().zip(&obs.correspondence) {
                prop_assert!(j < s.len());
                prop_assert_eq!(*p, s.points()[j]);
            }
        }

        #[test]
        fn survivors_are_sorted_subsets(seed in 0u64..1000, f in 0.0f64..0.99) {
            let s = generate_shape(Category::Table, seed, 128).unwrap().cloud;
            let alive = occlude_mask(&s, f, seed);
            prop_assert_eq!(alive.len(), 128 - (f * 128.0).floor() as usize);
            prop_assert!(alive.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
