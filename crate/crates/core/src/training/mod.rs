//! Joint two-branch training, evaluation and gradient-check registry.
//!
//! Each step pairs a target (full cloud plus an occluded partial copy) with a
//! same-category source. The partial branch sees the partial cloud, the full
//! branch the complete one; both share every head and are tied together by
//! consistency terms. Only the partial branch exists at inference.

mod checks;
mod config;
mod dataset;
mod eval;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checks::{registry, run_checks, CheckOutcome, GradCheck, GradModule};
pub use config::{OcclusionDefaults, TrainConfig};
pub use dataset::{
    generate_dataset, load_dataset, planted_cases, reocclude, save_dataset, Dataset, Sample, DATASET_FORMAT,
};
pub use eval::{evaluate, oracle_report, CategoryScores, EvalOptions, EvalReport, InstanceResult, NetDeformer};

use crate::autodiff::{AdamW, Graph, Tensor, Var};
use crate::deformation::apply_raw_var;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{
    assign, chamfer_with, coverage_with, loss_consistency, loss_re_with, symmetry_with, LossBreakdown, LossVars, LossWeights, PartialChamfer,
};
use crate::nets::{agnn_deform, encode, predict_residual, reconstruct, Ctx, Decoder, Encoder, Mode, Model, StatUpdate};
use crate::occlusion::{simulate, OcclusionSpec, PartialObservation};
use crate::rng;
use crate::shapes::{part_mean_pool, Category, PartSegmentedShape, SourceDatabase};

/// One training example: a full target, its partial observation and a source.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub full: PointCloud,
    pub partial: PartialObservation,
    /// Database index of the source shape.
    pub source: usize,
    pub category: Category,
}

/// Uniform same-category source for `category`, deterministic per seed.
pub fn draw_source(db: &SourceDatabase, category: Category, seed: u64) -> Result<usize> {
    let pool: Vec<usize> = db.of_category(category).map(|(i, _)| i).collect();
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!("database has no {category} shapes")));
    }
    let mut r = rng::stream(seed, rng::Stream::Pairing);
    Ok(pool[r.random_range(0..pool.len())])
}

/// Occlude `target` and draw a source for it.
pub fn make_pair(target: &PartSegmentedShape, db: &SourceDatabase, spec: &OcclusionSpec, seed: u64) -> Result<TrainingPair> {
    if db.is_empty() {
        return Err(Error::InvalidArgument("empty database".into()));
    }
    let partial = simulate(&target.cloud, spec, target.cloud.len())?;
    Ok(TrainingPair {
        full: target.cloud.clone(),
        partial,
        source: draw_source(db, target.category, seed)?,
        category: target.category,
    })
}

/// Nearest-neighbor assignments used by one forward pass. Passing them back
/// in freezes the piecewise-constant matching, which makes the loss smooth
/// for finite-difference checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignments {
    cd: (Vec<usize>, Vec<usize>),
    cd_f: (Vec<usize>, Vec<usize>),
    sym: Option<(Vec<usize>, Vec<usize>)>,
    sym_f: Option<(Vec<usize>, Vec<usize>)>,
    recon_p: (Vec<usize>, Vec<usize>),
    recon_s: (Vec<usize>, Vec<usize>),
    recon_f: (Vec<usize>, Vec<usize>),
    re_p: Vec<usize>,
    re_f: Vec<usize>,
}

/// Loss settings of one joint pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointOptions {
    pub weights: LossWeights,
    pub symmetry: bool,
    /// Apply the Chamfer, symmetry and reconstruction terms to the full
    /// branch as well (summed into the same components).
    pub full_branch_basic: bool,
    pub partial_chamfer: PartialChamfer,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions {
            weights: LossWeights::default(),
            symmetry: true,
            full_branch_basic: true,
            partial_chamfer: PartialChamfer::Observed,
        }
    }
}

impl TrainConfig {
    pub fn joint_options(&self, category: Category) -> JointOptions {
        JointOptions {
            weights: self.weights,
            symmetry: self.symmetry_categories.contains(&category),
            full_branch_basic: self.full_branch_basic,
            partial_chamfer: self.partial_chamfer,
        }
    }
}

/// Forward values of interest from one joint pass.
pub struct JointOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub deformed_partial: Var,
    pub deformed_full: Var,
    pub residual_partial: Var,
    pub residual_full: Var,
    /// Unweighted loss terms.
    pub terms: LossVars,
    pub assignments: Assignments,
}

fn cloud_var(g: &mut Graph, c: &PointCloud) -> Result<Var> {
    Ok(g.constant(Tensor::matrix(c.len(), 3, c.to_flat())?))
}

fn pair_both(g: &Graph, a: Var, b: Var, frozen: Option<&(Vec<usize>, Vec<usize>)>) -> Result<(Vec<usize>, Vec<usize>)> {
    match frozen {
        Some(p) => Ok(p.clone()),
        None => Ok((assign(g, a, b)?, assign(g, b, a)?)),
    }
}

/// Both branches and every loss term for one pair.
pub fn forward_joint(
    ctx: &mut Ctx<'_>,
    g: &mut Graph,
    pair: &TrainingPair,
    source: &PartSegmentedShape,
    opts: &JointOptions,
    frozen: Option<&Assignments>,
) -> Result<JointOutput> {
    let tp = cloud_var(g, &pair.partial.partial)?;
    let tf = cloud_var(g, &pair.full)?;
    let oc = cloud_var(g, &source.cloud)?;

    let fp = encode(ctx, g, Encoder::Partial, tp)?;
    let ff = encode(ctx, g, Encoder::Full, tf)?;
    let fs = encode(ctx, g, Encoder::Source, oc)?;
    let parts = part_mean_pool(g, fs.pointwise, &source.labels_usize(), source.n_parts())?;
    let indicator = g.l2_normalize(ff.global, 0, 0.0)?;

    let raw_p = agnn_deform(ctx, g, parts, fp.global, fs.global)?;
    let raw_f = agnn_deform(ctx, g, parts, ff.global, fs.global)?;
    let dp = apply_raw_var(g, source, raw_p)?;
    let df = apply_raw_var(g, source, raw_f)?;
    let rp = predict_residual(ctx, g, fp.pointwise, fp.global, fs.global, indicator)?;
    let rf = predict_residual(ctx, g, ff.pointwise, ff.global, fs.global, indicator)?;

    let mut asg = Assignments::default();
    let mut cd = match opts.partial_chamfer {
        PartialChamfer::Symmetric => basic_chamfer(g, dp, tp, frozen.map(|a| &a.cd), &mut asg.cd)?,
        PartialChamfer::Observed => {
            let ba = match frozen {
                Some(a) => a.cd.1.clone(),
                None => assign(g, tp, dp)?,
            };
            let v = coverage_with(g, dp, tp, &ba)?;
            asg.cd = (Vec::new(), ba);
            v
        }
    };
    let mut sym = match opts.symmetry {
        true => symmetry_term(g, dp, frozen.and_then(|a| a.sym.as_ref()), &mut asg.sym)?,
        false => g.constant(Tensor::scalar(0.0)),
    };
    let rec_p = reconstruct(ctx, g, Decoder::Partial, fp.global)?;
    let rec_s = reconstruct(ctx, g, Decoder::Source, fs.global)?;
    let l_rp = basic_chamfer(g, rec_p, tp, frozen.map(|a| &a.recon_p), &mut asg.recon_p)?;
    let l_rs = basic_chamfer(g, rec_s, oc, frozen.map(|a| &a.recon_s), &mut asg.recon_s)?;
    let mut recon = g.add(l_rp, l_rs)?;

    if opts.full_branch_basic {
        // the full branch carries the same basic losses against the full cloud
        let cd_f = basic_chamfer(g, df, tf, frozen.map(|a| &a.cd_f), &mut asg.cd_f)?;
        cd = g.add(cd, cd_f)?;
        if opts.symmetry {
            let sym_f = symmetry_term(g, df, frozen.and_then(|a| a.sym_f.as_ref()), &mut asg.sym_f)?;
            sym = g.add(sym, sym_f)?;
        }
        let rec_f = reconstruct(ctx, g, Decoder::Partial, ff.global)?;
        let l_rf = basic_chamfer(g, rec_f, tf, frozen.map(|a| &a.recon_f), &mut asg.recon_f)?;
        recon = g.add(recon, l_rf)?;
    }

    let re_p_nn = match frozen {
        Some(a) => a.re_p.clone(),
        None => assign(g, tp, dp)?,
    };
    let re_f_nn = match frozen {
        Some(a) => a.re_f.clone(),
        None => assign(g, tf, df)?,
    };
    let re_p = loss_re_with(g, tp, rp, dp, &re_p_nn)?;
    let re_f = loss_re_with(g, tf, rf, df, &re_f_nn)?;
    let re = g.add(re_p, re_f)?;

    let rf_at_partial = g.gather_rows(rf, &pair.partial.correspondence)?;
    let (co1, co2) = loss_consistency(g, dp, df, rp, rf_at_partial)?;

    let terms = LossVars { cd, sym, recon, re, co1, co2 };
    let (total, breakdown) = terms.total(g, &opts.weights)?;
    asg.re_p = re_p_nn;
    asg.re_f = re_f_nn;
    Ok(JointOutput {
        total,
        breakdown,
        deformed_partial: dp,
        deformed_full: df,
        residual_partial: rp,
        residual_full: rf,
        terms,
        assignments: asg,
    })
}

fn basic_chamfer(
    g: &mut Graph,
    a: Var,
    b: Var,
    frozen: Option<&(Vec<usize>, Vec<usize>)>,
    used: &mut (Vec<usize>, Vec<usize>),
) -> Result<Var> {
    *used = pair_both(g, a, b, frozen)?;
    chamfer_with(g, a, b, &used.0, &used.1)
}

fn symmetry_term(
    g: &mut Graph,
    d: Var,
    frozen: Option<&(Vec<usize>, Vec<usize>)>,
    used: &mut Option<(Vec<usize>, Vec<usize>)>,
) -> Result<Var> {
    let nn = match frozen {
        Some(p) => p.clone(),
        None => {
            let pts = crate::losses::points_of(g, d);
            let mirror: Vec<_> = pts.iter().map(|p| [-p[0], p[1], p[2]]).collect();
            let ab = crate::geometry::nearest_neighbors(&pts, &mirror)?.indices;
            let ba = crate::geometry::nearest_neighbors(&mirror, &pts)?.indices;
            (ab, ba)
        }
    };
    let v = symmetry_with(g, d, &nn.0, &nn.1)?;
    *used = Some(nn);
    Ok(v)
}

/// Loss, gradients and batch statistics of one pair under `model`.
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Option<Vec<f64>>>,
    pub stats: Vec<StatUpdate>,
}

pub fn train_step(model: &Model, pair: &TrainingPair, db: &SourceDatabase, cfg: &TrainConfig) -> Result<StepResult> {
    let source = &db.get(pair.source).shape;
    let mut ctx = Ctx::new(model, Mode::Train);
    let mut g = Graph::new();
    let out = forward_joint(&mut ctx, &mut g, pair, source, &cfg.joint_options(pair.category), None)?;
    g.backward(out.total)?;
    Ok(StepResult {
        breakdown: out.breakdown,
        grads: ctx.grads(&g),
        stats: ctx.take_stats(),
    })
}

/// One logged training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    /// Index of the target within the training set.
    pub sample: usize,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "epoch,sample,cd,sym,recon,re,co1,co2,total";

impl LogRow {
    pub fn csv(&self) -> String {
        let vals: Vec<String> = self.loss.values().iter().map(f64::to_string).collect();
        format!("{},{},{}", self.epoch, self.sample, vals.join(","))
    }
}

pub struct TrainOutput {
    pub model: Model,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub log: Vec<LogRow>,
}

/// Mean of each window of `w` consecutive values (length `n - w + 1`).
pub fn smoothed(values: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || values.len() < w {
        return Vec::new();
    }
    values.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

fn pair_for(sample: &Sample, idx: usize, epoch: usize, db: &SourceDatabase, cfg: &TrainConfig) -> Result<TrainingPair> {
    let round = if cfg.resample_sources { epoch as u64 } else { 0 };
    let seed = rng::derive_seed(cfg.seed, &[0x5e1, round, idx as u64]);
    Ok(TrainingPair {
        full: sample.shape.cloud.clone(),
        partial: sample.partial.clone(),
        source: draw_source(db, sample.shape.category, seed)?,
        category: sample.shape.category,
    })
}

/// Train a freshly initialized model on `targets`. With `out_dir`, writes
/// `loss.csv`, a checkpoint every `checkpoint_every` epochs and `model.ckpt`.
pub fn train(db: &SourceDatabase, targets: &[Sample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    let model = Model::init(cfg.arch.clone(), rng::derive_seed(cfg.seed, &[0x1a17]))?;
    train_from(model, db, targets, cfg, out_dir)
}

pub fn train_from(mut model: Model, db: &SourceDatabase, targets: &[Sample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    if db.is_empty() || targets.is_empty() {
        return Err(Error::InvalidArgument("training needs a non-empty database and target set".into()));
    }
    if let Some(s) = targets.iter().find(|s| s.shape.cloud.len() != cfg.arch.points || s.partial.partial.len() != cfg.arch.points) {
        return Err(Error::InvalidArgument(format!("target `{}` does not have {} points", s.id, cfg.arch.points)));
    }
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.csv");
            let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    if cfg.calibrate > 0 {
        calibrate_stats(&mut model, db, targets, cfg)?;
    }
    let mut opt = AdamW::new(cfg.optim);
    let mut shuffle = rng::stream(cfg.seed, rng::Stream::Shuffle);
    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut initial: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..targets.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        let mut sum = 0.0;
        for window in order.chunks(cfg.accumulate) {
            let results: Vec<StepResult> = window
                .par_iter()
                .map(|&i| {
                    let pair = pair_for(&targets[i], i, epoch, db, cfg)?;
                    train_step(&model, &pair, db, cfg)
                })
                .collect::<Result<_>>()?;
            let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
            let inv = 1.0 / window.len() as f64;
            for (&i, r) in window.iter().zip(&results) {
                let total = r.breakdown.total;
                let first = *initial.get_or_insert(total);
                let limit = cfg.divergence_factor * first.max(f64::MIN_POSITIVE);
                if total > limit {
                    return Err(Error::Diverged { epoch, loss: total, limit });
                }
                sum += total;
                let row = LogRow { epoch, sample: i, loss: r.breakdown };
                if let Some((f, path)) = csv.as_mut() {
                    writeln!(f, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
                }
                log.push(row);
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    if let Some(g) = g {
                        let a = a.get_or_insert_with(|| vec![0.0; g.len()]);
                        a.iter_mut().zip(g).for_each(|(a, g)| *a += inv * g);
                    }
                }
            }
            opt.step(&mut model.params, &acc);
            for r in &results {
                model.apply_stats(&r.stats);
            }
        }
        epoch_losses.push(sum / targets.len() as f64);
        if let Some(dir) = out_dir {
            if (epoch + 1) % cfg.checkpoint_every == 0 {
                model.params.save(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    if let Some((mut f, path)) = csv {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        model.params.save(&dir.join("model.ckpt"))?;
    }
    Ok(TrainOutput { model, epoch_losses, log })
}

/// Set every running normalization statistic to its average over the first
/// `cfg.calibrate` training pairs, one pass per normalization depth so each
/// layer sees inputs already normalized by the layers before it.
pub fn calibrate_stats(model: &mut Model, db: &SourceDatabase, targets: &[Sample], cfg: &TrainConfig) -> Result<()> {
    let n = cfg.calibrate.min(targets.len());
    let pairs: Vec<TrainingPair> = (0..n).map(|i| pair_for(&targets[i], i, 0, db, cfg)).collect::<Result<_>>()?;
    let depth = cfg.arch.encoder_hidden.len() + 1 + cfg.arch.residual_hidden.len();
    for _ in 0..depth {
        let stats: Vec<Vec<StatUpdate>> = pairs
            .par_iter()
            .map(|pair| {
                let mut ctx = Ctx::new(model, Mode::Train);
                let mut g = Graph::new();
                let opts = cfg.joint_options(pair.category);
                forward_joint(&mut ctx, &mut g, pair, &db.get(pair.source).shape, &opts, None)?;
                Ok(ctx.take_stats())
            })
            .collect::<Result<_>>()?;
        let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
        for u in stats.iter().flatten() {
            for (id, v) in [(u.mean_id, &u.stats.mean), (u.var_id, &u.stats.var)] {
                let e = sums.entry(id).or_insert_with(|| (vec![0.0; v.len()], 0));
                e.0.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                e.1 += 1;
            }
        }
        for (id, (sum, count)) in sums {
            let t = &mut model.params.entries_mut()[id].value;
            t.data_mut().iter_mut().zip(&sum).for_each(|(r, s)| *r = s / count as f64);
        }
    }
    Ok(())
}

/// Load a checkpoint written for `cfg.arch`.
pub fn load_model(cfg: &TrainConfig, path: &Path) -> Result<Model> {
    let mut model = Model::init(cfg.arch.clone(), 0)?;
    model.params.load(path)?;
    Ok(model)
}
