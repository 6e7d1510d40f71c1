//! Network blocks: shared-MLP point encoders, the per-point residual head,
//! the attention-based part deformer and the reconstruction decoders.
//!
//! Parameters live in a [`ParamStore`] under dotted names; a [`Ctx`] binds
//! them lazily onto a [`Graph`] for one forward pass and collects batch-norm
//! statistics for the caller to fold into the running estimates.

mod blocks;
mod scorer;

use rand::Rng as _;

use crate::autodiff::{rel_err, BatchStats, GradCheckReport, Graph, NormMode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub use blocks::{FeaturePair, agnn_deform, encode, predict_residual, reconstruct, scales_from_raw, scales_from_raw_var};
pub use scorer::{ResidualScorer, TargetBase};

/// Indicator norm tolerance accepted by the residual head.
pub const INDICATOR_TOL: f64 = 1e-6;

/// How batch-norm layers normalize while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPolicy {
    /// Normalize with the current cloud's statistics (classic training mode).
    Batch,
    /// Normalize with the running statistics, which are still updated from
    /// each training batch. Row-constant inputs (global features, the
    /// indicator) keep their influence under this policy.
    Running,
}

impl std::str::FromStr for NormPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormPolicy::Batch),
            "running" => Ok(NormPolicy::Running),
            o => Err(Error::Config(format!("unknown norm policy `{o}`"))),
        }
    }
}

impl NormPolicy {
    pub fn name(self) -> &'static str {
        match self {
            NormPolicy::Batch => "batch",
            NormPolicy::Running => "running",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Points per cloud (M).
    pub points: usize,
    /// Feature dimension (L), shared by every encoder.
    pub feat: usize,
    pub encoder_hidden: Vec<usize>,
    pub residual_hidden: Vec<usize>,
    pub heads: usize,
    pub agnn_blocks: usize,
    pub regressor_hidden: Vec<usize>,
    pub recon_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub norm: NormPolicy,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            points: 1024,
            feat: 256,
            encoder_hidden: vec![64, 128],
            residual_hidden: vec![512, 512, 256, 128],
            heads: 4,
            agnn_blocks: 2,
            regressor_hidden: vec![128, 64],
            recon_hidden: vec![256, 512],
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            norm: NormPolicy::Running,
        }
    }
}

impl ArchConfig {
    /// Single-machine preset: 256 points and narrow heads.
    pub fn desk() -> Self {
        ArchConfig {
            points: 256,
            feat: 32,
            residual_hidden: vec![64, 64, 32, 16],
            regressor_hidden: vec![32, 16],
            ..Self::default()
        }
    }

    /// Tiny sizes for gradient checks.
    pub fn toy() -> Self {
        ArchConfig {
            points: 16,
            feat: 8,
            encoder_hidden: vec![8, 8],
            residual_hidden: vec![8, 8, 8, 8],
            heads: 4,
            agnn_blocks: 2,
            regressor_hidden: vec![8, 8],
            recon_hidden: vec![8, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.feat == 0 {
            return Err(Error::Config("points and feat must be positive".into()));
        }
        if self.heads == 0 || self.feat % self.heads != 0 {
            return Err(Error::Config(format!(
                "feat {} is not divisible by {} heads",
                self.feat, self.heads
            )));
        }
        if self.residual_hidden.is_empty() || self.encoder_hidden.is_empty() {
            return Err(Error::Config("hidden width lists must be non-empty".into()));
        }
        let widths = [&self.encoder_hidden, &self.residual_hidden, &self.regressor_hidden, &self.recon_hidden];
        if widths.iter().any(|w| w.contains(&0)) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("bad batch-norm momentum or eps".into()));
        }
        Ok(())
    }
}

/// The three parallel point encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoder {
    Partial,
    Full,
    Source,
}

impl Encoder {
    pub fn prefix(self) -> &'static str {
        match self {
            Encoder::Partial => "enc_partial",
            Encoder::Full => "enc_full",
            Encoder::Source => "enc_source",
        }
    }
}

/// Reconstruction decoders for the partial-target and source globals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    Partial,
    Source,
}

impl Decoder {
    pub fn prefix(self) -> &'static str {
        match self {
            Decoder::Partial => "recon_partial",
            Decoder::Source => "recon_source",
        }
    }
}

/// Architecture plus its parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    r: rng::Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let bound = gain / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| self.r.random_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| self.r.random_range(-bound..bound)).collect();
        self.store
            .insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w).expect("sized"), true);
        self.store.insert(format!("{name}.b"), Tensor::vector(b), true);
    }

    fn bn(&mut self, name: &str, n: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[n], 1.0), true);
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[n]), true);
        self.store.insert(format!("{name}.rmean"), Tensor::zeros(&[n]), false);
        self.store.insert(format!("{name}.rvar"), Tensor::full(&[n], 1.0), false);
    }
}

impl Model {
    /// Randomly initialized model (uniform `±1/sqrt(fan_in)` weights).
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut it = Init {
            store: &mut store,
            r: rng::stream(seed, rng::Stream::Init),
        };
        let l = arch.feat;
        for enc in [Encoder::Partial, Encoder::Full, Encoder::Source] {
            let mut fan_in = 3;
            let widths: Vec<usize> = arch.encoder_hidden.iter().copied().chain([l]).collect();
            for (k, &w) in widths.iter().enumerate() {
                it.linear(&format!("{}.l{k}", enc.prefix()), fan_in, w, 1.0);
                it.bn(&format!("{}.bn{k}", enc.prefix()), w);
                fan_in = w;
            }
        }
        let mut fan_in = 4 * l;
        for (k, &w) in arch.residual_hidden.iter().enumerate() {
            it.linear(&format!("res.l{k}"), fan_in, w, 1.0);
            it.bn(&format!("res.bn{k}"), w);
            fan_in = w;
        }
        // residuals and part offsets both start near zero
        it.linear(&format!("res.l{}", arch.residual_hidden.len()), fan_in, 3, 0.01);
        for b in 0..arch.agnn_blocks {
            for stage in ["self", "cross"] {
                let p = format!("agnn.b{b}.{stage}");
                for m in ["q", "k", "v", "o"] {
                    it.linear(&format!("{p}.{m}"), l, l, 1.0);
                }
                it.linear(&format!("{p}.mlp0"), l, l, 1.0);
                it.linear(&format!("{p}.mlp1"), l, l, 1.0);
            }
        }
        let mut fan_in = l;
        for (k, &w) in arch.regressor_hidden.iter().enumerate() {
            it.linear(&format!("reg.l{k}"), fan_in, w, 1.0);
            fan_in = w;
        }
        it.linear(&format!("reg.l{}", arch.regressor_hidden.len()), fan_in, 6, 0.01);
        for dec in [Decoder::Partial, Decoder::Source] {
            let mut fan_in = l;
            for (k, &w) in arch.recon_hidden.iter().enumerate() {
                it.linear(&format!("{}.l{k}", dec.prefix()), fan_in, w, 1.0);
                fan_in = w;
            }
            it.linear(&format!("{}.l{}", dec.prefix(), arch.recon_hidden.len()), fan_in, 3 * arch.points, 1.0);
        }
        Ok(Model { arch, params: store })
    }

    /// Same layout as [`Model::init`] with every value (including running
    /// statistics) set to zero.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        let mut m = Model::init(arch, 0)?;
        m.params.zero_all();
        Ok(m)
    }

    /// Fold training-mode batch statistics into the running estimates, in order.
    pub fn apply_stats(&mut self, updates: &[StatUpdate]) {
        let mom = self.arch.bn_momentum;
        for u in updates {
            for (id, fresh) in [(u.mean_id, &u.stats.mean), (u.var_id, &u.stats.var)] {
                let t = &mut self.params.entries_mut()[id].value;
                for (r, f) in t.data_mut().iter_mut().zip(fresh) {
                    *r = (1.0 - mom) * *r + mom * f;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics from one training-mode normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub mean_id: usize,
    pub var_id: usize,
    pub stats: BatchStats,
}

/// One forward pass's view of a [`Model`].
pub struct Ctx<'a> {
    pub model: &'a Model,
    pub mode: Mode,
    vars: Vec<Option<Var>>,
    stats: Vec<StatUpdate>,
}

fn column_stats(t: &Tensor) -> BatchStats {
    let (m, n) = (t.rows(), t.cols());
    let d = t.data();
    let mut mean = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            mean[j] += d[i * n + j];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            let e = d[i * n + j] - mean[j];
            var[j] += e * e;
        }
    }
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    var.iter_mut().for_each(|v| *v /= denom);
    BatchStats { mean, var }
}

impl<'a> Ctx<'a> {
    pub fn new(model: &'a Model, mode: Mode) -> Self {
        Ctx {
            model,
            mode,
            vars: vec![None; model.params.len()],
            stats: Vec::new(),
        }
    }

    pub fn arch(&self) -> &'a ArchConfig {
        &self.model.arch
    }

    fn lookup(&self, name: &str) -> Result<usize> {
        self.model
            .params
            .id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Graph variable for a trainable parameter, created on first use.
    pub fn param(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let id = self.lookup(name)?;
        if let Some(v) = self.vars[id] {
            return Ok(v);
        }
        let v = g.param(self.model.params.entry(id).value.clone());
        self.vars[id] = Some(v);
        Ok(v)
    }

    /// `x W + b` for the layer `name`.
    pub fn linear(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.param(g, &format!("{name}.w"))?;
        let b = self.param(g, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn batch_norm(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(g, &format!("{name}.gamma"))?;
        let beta = self.param(g, &format!("{name}.beta"))?;
        let mean_id = self.lookup(&format!("{name}.rmean"))?;
        let var_id = self.lookup(&format!("{name}.rvar"))?;
        let store = &self.model.params;
        let running = NormMode::Eval {
            mean: store.entry(mean_id).value.data(),
            var: store.entry(var_id).value.data(),
        };
        let eps = self.model.arch.bn_eps;
        let (y, stats) = match (self.mode, self.model.arch.norm) {
            (Mode::Eval, _) => (g.batch_norm(x, gamma, beta, running, eps)?.0, None),
            (Mode::Train, NormPolicy::Batch) => g.batch_norm(x, gamma, beta, NormMode::Train, eps)?,
            (Mode::Train, NormPolicy::Running) => {
                let stats = column_stats(g.value(x));
                (g.batch_norm(x, gamma, beta, running, eps)?.0, Some(stats))
            }
        };
        if let Some(stats) = stats {
            self.stats.push(StatUpdate { mean_id, var_id, stats });
        }
        Ok(y)
    }

    /// Gradients of every store entry touched in this pass, aligned with the store.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| g.grad(v)).map(Tensor::into_data))
            .collect()
    }

    pub fn take_stats(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stats)
    }
}

/// Evaluation-mode features of one cloud: pointwise (`M x L`) and global.
pub fn encode_eval(model: &Model, which: Encoder, cloud: &crate::geometry::PointCloud) -> Result<(Tensor, Vec<f64>)> {
    let mut ctx = Ctx::new(model, Mode::Eval);
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(cloud.len(), 3, cloud.to_flat())?);
    let f = encode(&mut ctx, &mut g, which, x)?;
    Ok((g.value(f.pointwise).clone(), g.value(f.global).data().to_vec()))
}

/// Up to `n` distinct random `(entry, coordinate)` pairs over trainable entries.
pub fn sample_param_coords(model: &Model, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = model
        .params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(i, e)| (0..e.value.len()).map(move |k| (i, k)))
        .collect();
    let mut r = rng::seeded(seed);
    rand::seq::index::sample(&mut r, all.len(), n.min(all.len()))
        .into_iter()
        .map(|i| all[i])
        .collect()
}

/// Central finite-difference check of a scalar forward pass with respect to
/// the model parameters listed in `picks`. `worst` reports `(entry, coordinate)`.
pub fn finite_diff_params<F>(
    model: &Model,
    mode: Mode,
    forward: F,
    picks: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_>, &mut Graph) -> Result<Var>,
{
    let eval = |m: &Model| -> Result<f64> {
        let mut ctx = Ctx::new(m, mode);
        let mut g = Graph::new();
        let root = forward(&mut ctx, &mut g)?;
        Ok(g.value(root).item())
    };
    let mut ctx = Ctx::new(model, mode);
    let mut g = Graph::new();
    let root = forward(&mut ctx, &mut g)?;
    g.backward(root)?;
    let grads = ctx.grads(&g);
    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
        passed: true,
    };
    for &(i, k) in picks {
        let orig = work.params.entry(i).value.data()[k];
        work.params.entries_mut()[i].value.data_mut()[k] = orig + h;
        let plus = eval(&work)?;
        work.params.entries_mut()[i].value.data_mut()[k] = orig - h;
        let minus = eval(&work)?;
        work.params.entries_mut()[i].value.data_mut()[k] = orig;
        let analytic = grads[i].as_ref().map_or(0.0, |g| g[k]);
        let e = rel_err(analytic, (plus - minus) / (2.0 * h));
        report.checked += 1;
        if e > report.max_rel_err || e.is_nan() {
            report.max_rel_err = e;
            report.worst = (i, k);
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
