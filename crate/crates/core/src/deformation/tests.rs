use super::*;
use crate::autodiff::finite_diff_check_many;
use crate::geometry::reflect_bilateral;
use crate::rng;
use crate::shapes::{build_database, generate_shape, Category, DbEntry};
use rand::Rng as _;

fn with_box_corners(shape: &PartSegmentedShape) -> PartSegmentedShape {
    let mut pts = shape.cloud.points().to_vec();
    let mut labels = shape.labels.clone();
    for b in &shape.parts {
        for k in 0..8 {
            let sign = |bit: usize| if k >> bit & 1 == 1 { 0.5 } else { -0.5 };
            pts.push(std::array::from_fn(|a| b.center[a] + sign(a) * b.extents[a]));
            labels.push(b.part_id);
        }
    }
    PartSegmentedShape {
        cloud: PointCloud::new(pts).unwrap(),
        labels,
        ..shape.clone()
    }
}

#[test]
fn identity_is_bitwise() {
    for cat in Category::ALL {
        let s = generate_shape(cat, 3, 512).unwrap();
        let out = apply_deformation(&s, &PartDeformParams::identity(s.n_parts())).unwrap();
        assert_eq!(out, s.cloud);
        let mut g = Graph::new();
        let cd = g.constant(Tensor::zeros(&[s.n_parts(), 3]));
        let sc = g.constant(Tensor::full(&[s.n_parts(), 3], 1.0));
        let d = apply_deformation_var(&mut g, &s, cd, sc).unwrap();
        assert_eq!(g.value(d).data(), s.cloud.to_flat().as_slice());
    }
}

#[test]
fn uniform_scale_doubles_offsets() {
    let s = generate_shape(Category::Cabinet, 1, 128).unwrap();
    let mut params = PartDeformParams::identity(3);
    params.parts.get_mut(&0).unwrap().s = [2.0; 3];
    let out = apply_deformation(&s, &params).unwrap();
    let c0 = s.parts[0].center;
    for ((p, q), &l) in s.cloud.points().iter().zip(out.points()).zip(&s.labels) {
        if l == 0 {
            for a in 0..3 {
                assert!((q[a] - c0[a] - 2.0 * (p[a] - c0[a])).abs() < 1e-12);
            }
        } else {
            assert_eq!(p, q);
        }
    }
}

#[test]
fn recomputed_boxes_follow_the_parameters() {
    let mut r = rng::seeded(5);
    for k in 0..30 {
        let cat = Category::ALL[k % 3];
        let s = with_box_corners(&generate_shape(cat, k as u64, 256).unwrap());
        let params = PartDeformParams {
            parts: (0..s.n_parts() as u16)
                .map(|i| {
                    let cd = std::array::from_fn(|_| r.random_range(-0.5..0.5));
                    let sc = std::array::from_fn(|_| r.random_range(0.3..3.0));
                    (i, PartParams { cd, s: sc })
                })
                .collect(),
        };
        let out = apply_deformation(&s, &params).unwrap();
        for b in &s.parts {
            let (c, e) = part_bounds(out.points(), &s.labels, b.part_id).unwrap();
            let p = params.parts[&b.part_id];
            for a in 0..3 {
                assert!((c[a] - (b.center[a] + p.cd[a])).abs() < 1e-9);
                assert!((e[a] - p.s[a] * b.extents[a]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn pure_scalings_compose() {
    let s = generate_shape(Category::Chair, 2, 128).unwrap();
    let mut r = rng::seeded(1);
    let mk = |r: &mut rng::Rng| PartDeformParams {
        parts: (0..6u16)
            .map(|i| (i, PartParams { cd: [0.0; 3], s: std::array::from_fn(|_| r.random_range(0.5..2.0)) }))
            .collect(),
    };
    let (a, b) = (mk(&mut r), mk(&mut r));
    let ab = PartDeformParams {
        parts: a
            .parts
            .iter()
            .map(|(i, p)| (*i, PartParams { cd: [0.0; 3], s: std::array::from_fn(|k| p.s[k] * b.parts[i].s[k]) }))
            .collect(),
    };
    let once = apply_deformation(&s, &a).unwrap();
    let twice = apply_deformation(&PartSegmentedShape { cloud: once, ..s.clone() }, &b).unwrap();
    let direct = apply_deformation(&s, &ab).unwrap();
    for (p, q) in twice.points().iter().zip(direct.points()) {
        assert!(sq_dist(p, q) < 1e-24);
    }
}

#[test]
fn missing_parts_and_bad_scales_are_errors() {
    let s = generate_shape(Category::Table, 1, 64).unwrap();
    let mut p = PartDeformParams::identity(5);
    p.parts.remove(&3);
    assert!(matches!(apply_deformation(&s, &p), Err(Error::MissingPart(3))));
    let mut p = PartDeformParams::identity(5);
    p.parts.get_mut(&1).unwrap().s[2] = 0.0;
    assert!(apply_deformation(&s, &p).is_err());
}

#[test]
fn params_json_round_trip() {
    let s = generate_shape(Category::Chair, 4, 64).unwrap();
    let p = random_symmetric_params(&s, &mut rng::seeded(2), 0.1, 0.2);
    let text = serde_json::to_string(&p).unwrap();
    assert!(text.starts_with("{\"0\":{\"cd\":["));
    assert_eq!(serde_json::from_str::<PartDeformParams>(&text).unwrap(), p);
}

#[test]
fn deformation_gradient_matches_finite_differences() {
    let s = generate_shape(Category::Chair, 6, 32).unwrap();
    let mut r = rng::seeded(3);
    let raw = Tensor::matrix(6, 6, (0..36).map(|_| r.random_range(-0.5..0.5)).collect()).unwrap();
    let w = Tensor::matrix(32, 3, (0..96).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let rep = finite_diff_check_many(
        |g, x| {
            let d = apply_raw_var(g, &s, x[0])?;
            let wv = g.constant(w.clone());
            let y = g.mul(d, wv)?;
            Ok(g.sum(y))
        },
        &[raw],
        1e-4,
        1e-6,
        None,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn symmetric_planted_params_keep_symmetry() {
    let s = generate_shape(Category::Chair, 9, 512).unwrap();
    let p = random_symmetric_params(&s, &mut rng::seeded(4), 0.15, 0.3);
    let out = apply_deformation(&s, &p).unwrap();
    let cd = chamfer_distance(out.points(), reflect_bilateral(&out).points()).unwrap();
    assert!(cd < 1e-12, "{cd}");
}

#[test]
fn fitter_stays_at_identity_on_its_own_source() {
    let s = generate_shape(Category::Table, 1, 128).unwrap();
    let fit = fit_deformation_direct(&s, &s.cloud, 20, 0.02).unwrap();
    assert_eq!(fit.chamfer, 0.0);
    assert_eq!(fit.params, PartDeformParams::identity(5));
}

#[test]
fn fitter_recovers_planted_deformations() {
    let mut ok = 0;
    for seed in 0..4 {
        let s = generate_shape(Category::ALL[seed % 3], seed as u64 + 40, 256).unwrap();
        let p = random_symmetric_params(&s, &mut rng::seeded(seed as u64), 0.15, 0.3);
        let target = apply_deformation(&s, &p).unwrap();
        let fit = fit_deformation_direct(&s, &target, 500, 0.02).unwrap();
        assert!(fit.chamfer <= fit.initial_chamfer);
        if fit.chamfer < 0.05 * fit.initial_chamfer {
            ok += 1;
        }
    }
    assert!(ok >= 3, "{ok}/4 recovered");
}

#[test]
fn connectivity_penalty_is_zero_for_translations_only() {
    let s = generate_shape(Category::Chair, 3, 128).unwrap();
    let pairs = contact_pairs(&s);
    assert_eq!(pairs.len(), s.connectivity.len());
    let mut g = Graph::new();
    let base = g.constant(Tensor::matrix(128, 3, s.cloud.to_flat()).unwrap());
    let shift = g.constant(Tensor::vector(vec![0.3, -0.1, 0.2]));
    let moved = g.add(base, shift).unwrap();
    let pen = connectivity_penalty(&mut g, &s, moved, &pairs).unwrap();
    assert!(g.value(pen).item() < 1e-24);

    let mut p = PartDeformParams::identity(6);
    p.parts.get_mut(&1).unwrap().cd = [0.0, 0.5, 0.0];
    let fit = fit_deformation_with(
        &s,
        &apply_deformation(&s, &p).unwrap(),
        &FitOptions { steps: 50, connectivity_weight: 1.0, ..FitOptions::default() },
    )
    .unwrap();
    assert!(fit.chamfer <= fit.initial_chamfer);
}

#[test]
fn oracle_retrieval_cases() {
    let db = build_database(2, 7, 128).unwrap();
    let k = 3;
    let out = oracle_retrieval(&db, &db.get(k).shape.cloud, &IdentityDeformer).unwrap();
    assert_eq!((out.index, out.chamfer), (k, 0.0));

    // five-shape toy database against an exhaustive loop
    let small = SourceDatabase::new(db.entries()[..5].to_vec(), None).unwrap();
    let target = generate_shape(Category::Chair, 99, 128).unwrap().cloud;
    let fit = DirectFitDeformer(FitOptions { steps: 30, ..FitOptions::default() });
    let out = oracle_retrieval(&small, &target, &fit).unwrap();
    let mut best = (f64::INFINITY, 0);
    for (i, DbEntry { shape, .. }) in small.entries().iter().enumerate() {
        let c = chamfer_distance(fit.deform(shape, &target).unwrap().points(), target.points()).unwrap();
        assert_eq!(c, out.per_source[i]);
        if c < best.0 {
            best = (c, i);
        }
    }
    assert_eq!((out.index, out.chamfer), (best.1, best.0));
    assert!(out.per_source.iter().all(|&c| out.chamfer <= c));
}
