//! Tape-free residual evaluation for retrieval.
//!
//! The first residual layer acts on `[F_i; G^p; G^d; v]`, so it splits into a
//! per-target term `F W_f + G^p W_g + b`, a per-source row `G^d W_d` and a
//! per-indicator row `v W_v`. Scoring many (indicator, source) pairs then
//! costs only the layers after the first.

use super::{Model, INDICATOR_TOL};
use crate::autodiff::{gemm, Tensor};
use crate::error::{Error, Result};

struct Dense {
    w: Vec<f64>,
    b: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

/// Residual head frozen at evaluation-mode normalization.
pub struct ResidualScorer {
    feat: usize,
    width: usize,
    w_target: Vec<f64>,
    w_partial_global: Vec<f64>,
    w_source: Vec<f64>,
    w_indicator: Vec<f64>,
    b_first: Vec<f64>,
    /// Per hidden layer: `(mean, inv_std, gamma, beta)` of its normalization.
    norms: Vec<[Vec<f64>; 4]>,
    rest: Vec<Dense>,
    slope: f64,
}

/// First-layer pre-activations shared by every pair scored for one target.
#[derive(Clone, Debug)]
pub struct TargetBase {
    points: usize,
    base: Vec<f64>,
}

impl TargetBase {
    pub fn points(&self) -> usize {
        self.points
    }
}

fn tensor<'a>(model: &'a Model, name: &str) -> Result<&'a Tensor> {
    model
        .params
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

fn row_times(v: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    gemm(1, v.len(), n, v, v.len(), 1, w, n, 1, 0.0, &mut out);
    out
}

impl ResidualScorer {
    pub fn new(model: &Model) -> Result<Self> {
        let arch = &model.arch;
        let l = arch.feat;
        let hidden = arch.residual_hidden.len();
        let w1 = tensor(model, "res.l0.w")?;
        let width = w1.cols();
        let block = |k: usize| w1.data()[k * l * width..(k + 1) * l * width].to_vec();
        let mut norms = Vec::with_capacity(hidden);
        for k in 0..hidden {
            let var = tensor(model, &format!("res.bn{k}.rvar"))?;
            let inv_std = var.data().iter().map(|v| 1.0 / (v + arch.bn_eps).sqrt()).collect();
            norms.push([
                tensor(model, &format!("res.bn{k}.rmean"))?.data().to_vec(),
                inv_std,
                tensor(model, &format!("res.bn{k}.gamma"))?.data().to_vec(),
                tensor(model, &format!("res.bn{k}.beta"))?.data().to_vec(),
            ]);
        }
        let mut rest = Vec::with_capacity(hidden);
        for k in 1..=hidden {
            let w = tensor(model, &format!("res.l{k}.w"))?;
            rest.push(Dense {
                w: w.data().to_vec(),
                b: tensor(model, &format!("res.l{k}.b"))?.data().to_vec(),
                fan_in: w.rows(),
                fan_out: w.cols(),
            });
        }
        Ok(ResidualScorer {
            feat: l,
            width,
            w_target: block(0),
            w_partial_global: block(1),
            w_source: block(2),
            w_indicator: block(3),
            b_first: tensor(model, "res.l0.b")?.data().to_vec(),
            norms,
            rest,
            slope: arch.leaky_slope,
        })
    }

    fn check_len(&self, v: &[f64], what: &'static str) -> Result<()> {
        if v.len() != self.feat {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: vec![v.len()],
                rhs: vec![self.feat],
            });
        }
        Ok(())
    }

    /// Precompute `F W_f + G^p W_g + b` for a target's pointwise features
    /// (`M x L`) and global feature.
    pub fn target_base(&self, pointwise: &Tensor, global: &[f64]) -> Result<TargetBase> {
        self.check_len(global, "target_base")?;
        if pointwise.rank() != 2 || pointwise.cols() != self.feat {
            return Err(Error::ShapeMismatch {
                op: "target_base",
                lhs: pointwise.shape().to_vec(),
                rhs: vec![self.feat],
            });
        }
        let m = pointwise.rows();
        let n = self.width;
        let row = row_times(global, &self.w_partial_global, n);
        let mut base = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                base[i * n + j] = row[j] + self.b_first[j];
            }
        }
        gemm(m, self.feat, n, pointwise.data(), self.feat, 1, &self.w_target, n, 1, 1.0, &mut base);
        Ok(TargetBase { points: m, base })
    }

    /// `G^d W_d` for a source global feature.
    pub fn source_row(&self, global: &[f64]) -> Result<Vec<f64>> {
        self.check_len(global, "source_row")?;
        Ok(row_times(global, &self.w_source, self.width))
    }

    /// `v W_v` for a unit indicator.
    pub fn indicator_row(&self, indicator: &[f64]) -> Result<Vec<f64>> {
        self.check_len(indicator, "indicator_row")?;
        let norm = indicator.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= INDICATOR_TOL) {
            return Err(Error::IndicatorOffSphere(norm));
        }
        Ok(row_times(indicator, &self.w_indicator, self.width))
    }

    fn activate(&self, x: &mut [f64], layer: usize) {
        let [mean, inv_std, gamma, beta] = &self.norms[layer];
        let n = mean.len();
        for row in x.chunks_exact_mut(n) {
            for j in 0..n {
                let h = gamma[j] * ((row[j] - mean[j]) * inv_std[j]) + beta[j];
                row[j] = if h > 0.0 { h } else { self.slope * h };
            }
        }
    }

    /// Residual field (`M x 3`, row-major) for one (target, source, indicator).
    pub fn residual(&self, base: &TargetBase, source_row: &[f64], indicator_row: &[f64]) -> Vec<f64> {
        let (m, n) = (base.points, self.width);
        let mut x = base.base.clone();
        for row in x.chunks_exact_mut(n) {
            for j in 0..n {
                row[j] += source_row[j] + indicator_row[j];
            }
        }
        self.activate(&mut x, 0);
        for (k, d) in self.rest.iter().enumerate() {
            let mut y = vec![0.0; m * d.fan_out];
            for row in y.chunks_exact_mut(d.fan_out) {
                row.copy_from_slice(&d.b);
            }
            gemm(m, d.fan_in, d.fan_out, &x, d.fan_in, 1, &d.w, d.fan_out, 1, 1.0, &mut y);
            x = y;
            if k + 1 < self.norms.len() {
                self.activate(&mut x, k + 1);
            }
        }
        x
    }
}
