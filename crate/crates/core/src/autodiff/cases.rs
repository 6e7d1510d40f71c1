//! Shared gradient-check cases for every primitive op.

use rand::Rng as _;

use super::{Graph, NormMode, Tensor, Var};
use crate::error::Error;
use crate::rng;

/// Random entries with magnitude in `[0.1, 1)` and random sign.
pub fn rand_tensor(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    // stay away from the relu/clamp kinks at 0
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce to a scalar through a fixed random weighting so every output
/// coordinate contributes a distinct amount.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, Error> {
    let mut r = rng::seeded(seed);
    let w = rand_tensor(g.shape(y), &mut r);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub type Prim = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> Result<Var, Error>);

pub fn primitives() -> Vec<Prim> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, x| g.matmul(x[0], x[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, x| g.add(x[0], x[1])),
        ("add_rows", vec![vec![3, 4], vec![4]], |g, x| g.add(x[0], x[1])),
        ("sub", vec![vec![3, 4], vec![1, 4]], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, x| g.mul(x[0], x[1])),
        ("mul_rows", vec![vec![3, 4], vec![4]], |g, x| g.mul(x[0], x[1])),
        ("scale", vec![vec![5]], |g, x| Ok(g.scale(x[0], -1.7))),
        ("relu", vec![vec![2, 5]], |g, x| Ok(g.relu(x[0]))),
        ("leaky_relu", vec![vec![2, 5]], |g, x| Ok(g.leaky_relu(x[0], 0.01))),
        ("softmax0", vec![vec![3, 4]], |g, x| g.softmax(x[0], 0)),
        ("softmax1", vec![vec![3, 4]], |g, x| g.softmax(x[0], 1)),
        ("concat0", vec![vec![2, 3], vec![1, 3]], |g, x| g.concat(&[x[0], x[1]], 0)),
        ("concat1", vec![vec![2, 3], vec![2, 2]], |g, x| g.concat(&[x[0], x[1]], 1)),
        ("max_pool0", vec![vec![5, 3]], |g, x| g.max_pool(x[0], 0)),
        ("max_pool1", vec![vec![5, 3]], |g, x| g.max_pool(x[0], 1)),
        ("mean_pool0", vec![vec![5, 3]], |g, x| g.mean_pool(x[0], 0)),
        ("mean_pool1", vec![vec![5, 3]], |g, x| g.mean_pool(x[0], 1)),
        ("l2_normalize", vec![vec![3, 4]], |g, x| g.l2_normalize(x[0], 1, 1e-12)),
        ("batch_norm_train", vec![vec![6, 3], vec![3], vec![3]], |g, x| {
            Ok(g.batch_norm(x[0], x[1], x[2], NormMode::Train, 1e-5)?.0)
        }),
        ("batch_norm_eval", vec![vec![6, 3], vec![3], vec![3]], |g, x| {
            let mean = [0.1, -0.2, 0.3];
            let var = [0.5, 1.5, 2.0];
            Ok(g.batch_norm(x[0], x[1], x[2], NormMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
        }),
        ("sum", vec![vec![3, 2]], |g, x| Ok(g.sum(x[0]))),
        ("mean", vec![vec![3, 2]], |g, x| Ok(g.mean(x[0]))),
        ("square", vec![vec![7]], |g, x| Ok(g.square(x[0]))),
        ("sqrt", vec![vec![7]], |g, x| {
            let s = g.square(x[0]);
            Ok(g.sqrt(s))
        }),
        ("exp", vec![vec![7]], |g, x| Ok(g.exp(x[0]))),
        ("gather_rows", vec![vec![4, 3]], |g, x| g.gather_rows(x[0], &[3, 0, 3, 1])),
        ("transpose", vec![vec![2, 5]], |g, x| g.transpose(x[0])),
        ("reshape", vec![vec![2, 6]], |g, x| g.reshape(x[0], &[3, 4])),
        ("slice_cols", vec![vec![3, 5]], |g, x| g.slice_cols(x[0], 1, 4)),
        ("repeat_rows", vec![vec![4]], |g, x| g.repeat_rows(x[0], 3)),
        ("clamp", vec![vec![8]], |g, x| Ok(g.clamp(x[0], -0.5, 0.5))),
    ]
}

