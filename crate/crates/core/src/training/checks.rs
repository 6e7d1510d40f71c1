//! Registry of finite-difference gradient checks over every primitive, every
//! composite loss and every network head, on toy sizes (16 points, a
//! three-part cabinet source, 8 feature channels).

use std::str::FromStr;

use rand::Rng as _;

use super::{forward_joint, make_pair, Assignments, JointOptions};
use crate::autodiff::cases::{primitives, project, rand_tensor};
use crate::autodiff::{finite_diff_check_many, Graph, GradCheckReport, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{loss_chamfer, loss_consistency, loss_re, loss_recon, loss_symmetry, LossVars, LossWeights};
use crate::nets::{
    agnn_deform, encode, finite_diff_params, predict_residual, reconstruct, sample_param_coords, ArchConfig, Ctx,
    Decoder, Encoder, Mode, Model,
};
use crate::occlusion::{OcclusionKind, OcclusionSpec};
use crate::rng;
use crate::shapes::{generate_shape, part_mean_pool, Category, DbEntry, PartSegmentedShape, SourceDatabase};

const STEP: f64 = 1e-6;
const TOY_POINTS: usize = 16;
const PARAM_PICKS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum GradModule {
    Autodiff,
    Losses,
    Nets,
}

impl GradModule {
    pub fn name(self) -> &'static str {
        match self {
            GradModule::Autodiff => "autodiff",
            GradModule::Losses => "losses",
            GradModule::Nets => "nets",
        }
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autodiff" => Ok(GradModule::Autodiff),
            "losses" => Ok(GradModule::Losses),
            "nets" => Ok(GradModule::Nets),
            other => Err(Error::InvalidArgument(format!("unknown module `{other}`"))),
        }
    }
}

type CheckFn = Box<dyn Fn(f64) -> Result<GradCheckReport> + Send + Sync>;

pub struct GradCheck {
    pub module: GradModule,
    pub name: String,
    run: CheckFn,
}

impl GradCheck {
    pub fn run(&self, tol: f64) -> Result<GradCheckReport> {
        (self.run)(tol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub module: GradModule,
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

fn check(module: GradModule, name: impl Into<String>, run: impl Fn(f64) -> Result<GradCheckReport> + Send + Sync + 'static) -> GradCheck {
    GradCheck {
        module,
        name: name.into(),
        run: Box::new(run),
    }
}

fn toy_cloud(seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    rand_tensor(&[TOY_POINTS, 3], &mut r)
}

fn toy_source() -> Result<PartSegmentedShape> {
    generate_shape(Category::Cabinet, 11, TOY_POINTS)
}

/// Toy model with non-trivial normalization statistics and a regressor
/// large enough to move the parts.
pub(crate) fn toy_model(seed: u64) -> Result<Model> {
    let mut m = Model::init(ArchConfig::toy(), seed)?;
    let mut r = rng::seeded(seed ^ 0x70e);
    for e in m.params.entries_mut() {
        let d = e.value.data_mut().iter_mut();
        if e.name.ends_with(".rmean") {
            d.for_each(|v| *v = r.random_range(-0.3..0.3));
        } else if e.name.ends_with(".rvar") {
            d.for_each(|v| *v = r.random_range(0.5..2.0));
        } else if e.name.ends_with(".gamma") || e.name.ends_with(".beta") {
            d.for_each(|v| *v += r.random_range(-0.2..0.2));
        } else if e.name.starts_with("reg.") {
            d.for_each(|v| *v *= 30.0);
        }
    }
    Ok(m)
}

fn loss_check<F>(name: &'static str, n_inputs: usize, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + Copy + 'static,
{
    check(GradModule::Losses, name, move |tol| {
        let xs: Vec<Tensor> = (0..n_inputs).map(|i| toy_cloud(100 + i as u64)).collect();
        finite_diff_check_many(f, &xs, STEP, tol, None)
    })
}

fn nets_check<F>(name: &'static str, f: F) -> GradCheck
where
    F: Fn(&mut Ctx<'_>, &mut Graph) -> Result<Var> + Send + Sync + Copy + 'static,
{
    check(GradModule::Nets, name, move |tol| {
        let model = toy_model(12)?;
        let picks = sample_param_coords(&model, PARAM_PICKS, 5);
        finite_diff_params(&model, Mode::Train, f, &picks, STEP, tol)
    })
}

fn square_mean(g: &mut Graph, x: Var) -> Var {
    let s = g.square(x);
    g.mean(s)
}

fn toy_joint() -> Result<(super::TrainingPair, SourceDatabase)> {
    let target = generate_shape(Category::Cabinet, 23, TOY_POINTS)?;
    let db = SourceDatabase::new(vec![DbEntry { id: "cabinet-000".into(), shape: toy_source()? }], None)?;
    let spec = OcclusionSpec::new(OcclusionKind::Ball { center: None }, 0.25, 3);
    let pair = make_pair(&target, &db, &spec, 4)?;
    Ok((pair, db))
}

/// Every registered check, in a stable order.
pub fn registry() -> Vec<GradCheck> {
    let mut out: Vec<GradCheck> = primitives()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            check(GradModule::Autodiff, name, move |tol| {
                let mut r = rng::seeded(1000 + i as u64);
                let xs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut r)).collect();
                finite_diff_check_many(
                    |g, v| {
                        let y = f(g, v)?;
                        project(g, y, 7)
                    },
                    &xs,
                    STEP,
                    tol,
                    None,
                )
            })
        })
        .collect();

    out.push(loss_check("chamfer", 2, |g, x| loss_chamfer(g, x[0], x[1])));
    out.push(loss_check("symmetry", 1, |g, x| loss_symmetry(g, x[0])));
    out.push(loss_check("recon", 2, |g, x| loss_recon(g, x[0], x[1])));
    out.push(loss_check("residual", 3, |g, x| loss_re(g, x[0], x[1], x[2])));
    out.push(loss_check("consistency", 4, |g, x| {
        let (a, b) = loss_consistency(g, x[0], x[1], x[2], x[3])?;
        let b = g.scale(b, 0.7);
        g.add(a, b)
    }));
    out.push(loss_check("weighted_total", 4, |g, x| {
        let cd = loss_chamfer(g, x[0], x[1])?;
        let sym = loss_symmetry(g, x[0])?;
        let recon = loss_recon(g, x[2], x[1])?;
        let re = loss_re(g, x[1], x[3], x[0])?;
        let (co1, co2) = loss_consistency(g, x[0], x[2], x[3], x[1])?;
        Ok(LossVars { cd, sym, recon, re, co1, co2 }.total(g, &LossWeights::default())?.0)
    }));
    out.push(check(GradModule::Losses, "joint_total", |tol| {
        let (pair, db) = toy_joint()?;
        let model = toy_model(12)?;
        let source = &db.get(0).shape;
        let opts = JointOptions::default();
        let frozen: Assignments = {
            let mut ctx = Ctx::new(&model, Mode::Train);
            let mut g = Graph::new();
            forward_joint(&mut ctx, &mut g, &pair, source, &opts, None)?.assignments
        };
        let picks = sample_param_coords(&model, 2 * PARAM_PICKS, 6);
        finite_diff_params(
            &model,
            Mode::Train,
            |ctx, g| Ok(forward_joint(ctx, g, &pair, source, &opts, Some(&frozen))?.total),
            &picks,
            STEP,
            tol,
        )
    }));

    out.push(nets_check("encoder", |ctx, g| {
        let x = g.constant(toy_cloud(21));
        let f = encode(ctx, g, Encoder::Partial, x)?;
        let a = square_mean(g, f.pointwise);
        let b = square_mean(g, f.global);
        g.add(a, b)
    }));
    out.push(nets_check("residual_head", |ctx, g| {
        let shape = toy_source()?;
        let x = g.constant(toy_cloud(21));
        let s = g.constant(Tensor::matrix(TOY_POINTS, 3, shape.cloud.to_flat())?);
        let ft = encode(ctx, g, Encoder::Partial, x)?;
        let ff = encode(ctx, g, Encoder::Full, x)?;
        let fs = encode(ctx, g, Encoder::Source, s)?;
        let ind = g.l2_normalize(ff.global, 0, 0.0)?;
        let r = predict_residual(ctx, g, ft.pointwise, ft.global, fs.global, ind)?;
        Ok(square_mean(g, r))
    }));
    out.push(nets_check("agnn", |ctx, g| {
        let shape = toy_source()?;
        let x = g.constant(toy_cloud(21));
        let s = g.constant(Tensor::matrix(TOY_POINTS, 3, shape.cloud.to_flat())?);
        let ft = encode(ctx, g, Encoder::Partial, x)?;
        let fs = encode(ctx, g, Encoder::Source, s)?;
        let parts = part_mean_pool(g, fs.pointwise, &shape.labels_usize(), shape.n_parts())?;
        let d = agnn_deform(ctx, g, parts, ft.global, fs.global)?;
        Ok(square_mean(g, d))
    }));
    out.push(nets_check("recon_decoder", |ctx, g| {
        let x = g.constant(toy_cloud(21));
        let ft = encode(ctx, g, Encoder::Source, x)?;
        let rec = reconstruct(ctx, g, Decoder::Source, ft.global)?;
        Ok(square_mean(g, rec))
    }));
    out
}

/// Run the registered checks of `module` (all when `None`) sequentially, so
/// that a thread-local fault injected by the caller reaches every check.
pub fn run_checks(module: Option<GradModule>, tol: f64) -> Result<Vec<CheckOutcome>> {
    registry()
        .into_iter()
        .filter(|c| module.is_none_or(|m| c.module == m))
        .map(|c| {
            let rep = c.run(tol)?;
            Ok(CheckOutcome {
                module: c.module,
                name: c.name,
                max_rel_err: rep.max_rel_err,
                checked: rep.checked,
                passed: rep.passed,
            })
        })
        .collect()
}
