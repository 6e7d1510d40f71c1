use std::collections::BTreeMap;

use proptest::prelude::*;
use red_forge::autodiff::{Graph, Tensor};
use red_forge::deformation::{apply_deformation, PartDeformParams, PartParams};
use red_forge::geometry::{chamfer_distance, pcf, reflect_bilateral, resample_uniform, PointCloud};
use red_forge::nets::{ArchConfig, Model, ResidualScorer};
use red_forge::retrieval::{argmin_votes, retrieve_otm, trimmed_score, RetrievalOptions, ScoreMode, SourceCache};
use red_forge::shapes::{build_database, generate_shape, load_database, save_database, Category};

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0]
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(point(), 1..=max)
}

fn category() -> impl Strategy<Value = Category> {
    prop::sample::select(Category::ALL.to_vec())
}

fn scales() -> impl Strategy<Value = [f64; 3]> {
    [0.3f64..3.0, 0.3f64..3.0, 0.3f64..3.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chamfer_self_is_zero(a in cloud(64)) {
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn resampling_draws_from_the_input(a in cloud(40), m in 1usize..100, seed in any::<u64>()) {
        let c = PointCloud::new(a.clone()).unwrap();
        let out = resample_uniform(&c, m, seed).unwrap();
        prop_assert_eq!(out.len(), m);
        for p in out.points() {
            prop_assert!(a.contains(p));
        }
        if m <= a.len() {
            // without replacement: each input point is used at most as often as it occurs
            for p in out.points() {
                let used = out.points().iter().filter(|q| *q == p).count();
                let have = a.iter().filter(|q| *q == p).count();
                prop_assert!(used <= have);
            }
        }
    }

    #[test]
    fn reflecting_both_clouds_keeps_chamfer(a in cloud(48), b in cloud(48)) {
        let (ca, cb) = (PointCloud::new(a).unwrap(), PointCloud::new(b).unwrap());
        let before = chamfer_distance(ca.points(), cb.points()).unwrap();
        let after = chamfer_distance(reflect_bilateral(&ca).points(), reflect_bilateral(&cb).points()).unwrap();
        prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));
    }

    #[test]
    fn generated_boxes_contain_their_points(cat in category(), seed in any::<u64>()) {
        let s = generate_shape(cat, seed, 128).unwrap();
        for (p, &l) in s.cloud.points().iter().zip(&s.labels) {
            prop_assert!(s.parts[l as usize].contains(p, 1e-6));
        }
    }

    #[test]
    fn identity_deformation_is_bitwise(cat in category(), seed in any::<u64>()) {
        let s = generate_shape(cat, seed, 64).unwrap();
        let out = apply_deformation(&s, &PartDeformParams::identity(s.n_parts())).unwrap();
        prop_assert_eq!(out.points(), s.cloud.points());
    }

    #[test]
    fn pure_scalings_compose(cat in category(), seed in 0u64..1000, s1 in scales(), s2 in scales()) {
        let shape = generate_shape(cat, seed, 64).unwrap();
        let n = shape.n_parts() as u16;
        let uniform = |s: [f64; 3]| PartDeformParams {
            parts: (0..n).map(|i| (i, PartParams { cd: [0.0; 3], s })).collect::<BTreeMap<_, _>>(),
        };
        let once = apply_deformation(&shape, &uniform(s1)).unwrap();
        let twice = apply_deformation(&red_forge::shapes::PartSegmentedShape { cloud: once, ..shape.clone() }, &uniform(s2)).unwrap();
        let both = apply_deformation(&shape, &uniform(std::array::from_fn(|a| s1[a] * s2[a]))).unwrap();
        for (p, q) in twice.points().iter().zip(both.points()) {
            for a in 0..3 {
                prop_assert!((p[a] - q[a]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn trimmed_score_ignores_point_order_and_scales(
        field in prop::collection::vec(-1.0f64..1.0, 30..90),
        c in 0.01f64..100.0,
        shift in 0usize..30,
    ) {
        let m = field.len() / 3 * 3;
        let f = &field[..m];
        let mut rows: Vec<&[f64]> = f.chunks(3).collect();
        let k = shift % rows.len();
        rows.rotate_left(k);
        let permuted: Vec<f64> = rows.concat();
        let scaled: Vec<f64> = f.iter().map(|x| x * c).collect();
        for mode in [ScoreMode::Mean, ScoreMode::Max] {
            let base = trimmed_score(f, 0.1, mode).unwrap();
            prop_assert_eq!(trimmed_score(&permuted, 0.1, mode).unwrap(), base);
            let s = trimmed_score(&scaled, 0.1, mode).unwrap();
            prop_assert!((s - c * base).abs() <= 1e-12 * (c * base).max(1e-300));
        }
    }

    #[test]
    fn votes_sum_to_the_sample_count(table in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 0..50)) {
        let votes = argmin_votes(&table, 4);
        prop_assert_eq!(votes.iter().sum::<usize>(), table.len());
    }
}

#[test]
fn gradient_of_a_reused_value_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.5, -2.0]));
    let y = g.add(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn database_round_trip_keeps_id_order() {
    let db = build_database(3, 5, 64).unwrap();
    let ids: Vec<&str> = db.entries().iter().map(|e| e.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    let dir = tempfile::tempdir().unwrap();
    save_database(&db, dir.path()).unwrap();
    let back = load_database(dir.path()).unwrap();
    assert_eq!(back.len(), db.len());
    for (a, b) in db.entries().iter().zip(back.entries()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.shape, b.shape);
    }
}

#[test]
fn pcf_round_trip_is_bitwise() {
    let s = generate_shape(Category::Table, 3, 100).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pcf");
    pcf::write(&path, &s.cloud).unwrap();
    assert_eq!(pcf::read(&path).unwrap(), s.cloud);
    assert_eq!(pcf::read_any(&path).unwrap(), s.cloud);
}

#[test]
fn cached_and_uncached_retrieval_agree() {
    let db = build_database(2, 4, 64).unwrap();
    let model = Model::init(ArchConfig { points: 64, ..ArchConfig::desk() }, 8).unwrap();
    let scorer = ResidualScorer::new(&model).unwrap();
    let cache = SourceCache::build(&model, &scorer, &db).unwrap();
    let opts = RetrievalOptions { n_samples: 25, ..RetrievalOptions::default() };
    let target = &db.get(3).shape.cloud;
    let a = retrieve_otm(&db, target, &model, &opts, None).unwrap();
    let b = retrieve_otm(&db, target, &model, &opts, Some(&cache)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.results.iter().map(|r| r.votes).sum::<usize>(), 25);
}
