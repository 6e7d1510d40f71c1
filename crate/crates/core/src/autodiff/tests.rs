use super::cases::{primitives, project, rand_tensor};
use super::*;
use crate::error::Error;
use crate::rng;

#[test]
fn every_primitive_passes_finite_differences() {
    let mut r = rng::seeded(11);
    for (name, shapes, op) in primitives() {
        for trial in 0..10 {
            let xs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut r)).collect();
            let seed = 1000 + trial;
            let f = |g: &mut Graph, v: &[Var]| {
                let y = op(g, v)?;
                project(g, y, seed)
            };
            let rep = finite_diff_check_many(f, &xs, 1e-4, 1e-6, None).unwrap();
            assert!(rep.passed, "{name} trial {trial}: rel err {}", rep.max_rel_err);
        }
    }
}

#[test]
fn matmul_identity() {
    let mut r = rng::seeded(1);
    let a = rand_tensor(&[3, 5], &mut r);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn matmul_matches_scalar_reference() {
    let mut r = rng::seeded(2);
    let (m, k, n) = (7, 5, 9);
    let a = rand_tensor(&[m, k], &mut r);
    let b = rand_tensor(&[k, n], &mut r);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(av, bv).unwrap();
    for i in 0..m {
        for j in 0..n {
            let want: f64 = (0..k).map(|l| a.data()[i * k + l] * b.data()[l * n + j]).sum();
            assert!((g.value(y).data()[i * n + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_closed_form() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let row = g.reshape(y, &[1, 2]).unwrap();
    let first = g.slice_cols(row, 0, 1).unwrap();
    let root = g.sum(first);
    g.backward(root).unwrap();
    let grad = g.grad(x).unwrap();
    assert!((grad.data()[0] - 0.25).abs() < 1e-15);
    assert!((grad.data()[1] + 0.25).abs() < 1e-15);
}

#[test]
fn l2_normalize_345() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = g.l2_normalize(x, 0, 1e-12).unwrap();
    assert_eq!(g.value(y).data(), &[0.6, 0.8]);
}

#[test]
fn quadratic_and_relu_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let root = g.sum(sq);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![-1.0, 2.0]));
    let r = g.relu(x);
    let root = g.mean(r);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.5]);
}

#[test]
fn reused_value_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.5, -0.5]));
    let y = g.add(x, x).unwrap();
    let root = g.sum(y);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn non_scalar_root_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros(&[4]));
    let err = g.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[4]"), "{err}");
}

#[test]
fn max_pool_ties_route_to_first() {
    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(3, 1, vec![2.0, 5.0, 5.0]).unwrap());
    let m = g.max_pool(x, 0).unwrap();
    let root = g.sum(m);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn batch_norm_eval_is_fixed_affine_and_train_reports_stats() {
    let mut r = rng::seeded(5);
    let x = rand_tensor(&[6, 2], &mut r);
    let mean = [0.2, -0.1];
    let var = [0.9, 0.4];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::vector(vec![1.5, 0.5]));
    let beta = g.constant(Tensor::vector(vec![0.1, -0.3]));
    let (y1, s1) = g
        .batch_norm(xv, gamma, beta, NormMode::Eval { mean: &mean, var: &var }, 1e-5)
        .unwrap();
    let (y2, _) = g
        .batch_norm(xv, gamma, beta, NormMode::Eval { mean: &mean, var: &var }, 1e-5)
        .unwrap();
    assert!(s1.is_none());
    assert_eq!(g.value(y1), g.value(y2));
    for i in 0..6 {
        for j in 0..2 {
            let gm = [1.5, 0.5][j];
            let bt = [0.1, -0.3][j];
            let want = gm * (x.data()[i * 2 + j] - mean[j]) / (var[j] + 1e-5f64).sqrt() + bt;
            assert!((g.value(y1).data()[i * 2 + j] - want).abs() < 1e-14);
        }
    }
    let (_, stats) = g.batch_norm(xv, gamma, beta, NormMode::Train, 1e-5).unwrap();
    let stats = stats.unwrap();
    let col0: Vec<f64> = (0..6).map(|i| x.data()[i * 2]).collect();
    let m0 = col0.iter().sum::<f64>() / 6.0;
    let v0 = col0.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / 5.0;
    assert!((stats.mean[0] - m0).abs() < 1e-15);
    assert!((stats.var[0] - v0).abs() < 1e-15);
}

#[test]
fn finite_diff_check_on_quadratic() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
    let rep = finite_diff_check(
        |g, v| {
            let s = g.square(v);
            Ok(g.sum(s))
        },
        &x,
        1e-4,
        1e-8,
    )
    .unwrap();
    assert!(rep.passed, "{}", rep.max_rel_err);
}

#[test]
fn injected_fault_is_caught() {
    let mut r = rng::seeded(4);
    let x = rand_tensor(&[7], &mut r);
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.exp(v[0]);
        project(g, y, 3)
    };
    let bad = with_backward_fault("exp", || finite_diff_check_many(f, std::slice::from_ref(&x), 1e-4, 1e-6, None).unwrap());
    assert!(!bad.passed);
    let good = finite_diff_check_many(f, std::slice::from_ref(&x), 1e-4, 1e-6, None).unwrap();
    assert!(good.passed);
}
