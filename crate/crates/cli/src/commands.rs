//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::Path;

use red_forge::autodiff::{with_backward_fault, OP_NAMES};
use red_forge::deformation::{apply_deformation, fit_deformation_with, DirectFitDeformer, IdentityDeformer};
use red_forge::geometry::{chamfer_distance, pcf, PointCloud};
use red_forge::retrieval::retrieve_otm;
use red_forge::shapes::{build_database, load_database, save_database, Category, SourceDatabase};
use red_forge::training::{
    self, evaluate, generate_dataset, load_dataset, load_model, oracle_report, planted_cases, reocclude, run_checks,
    save_dataset, CategoryScores, EvalReport, GradModule, NetDeformer, TrainConfig,
};
use red_forge::Error;
use serde::{Deserialize, Serialize};

use crate::config::{self, CONFIG_FILE};
use crate::{AblateArgs, DeformArgs, EvalArgs, GenDataArgs, GenDbArgs, GradCheckArgs, ModuleArg, RetrieveArgs, Split, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, files or configuration (exit 2).
    Usage(String),
    /// A check ran and failed (exit 1).
    Check(String),
    Core(Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Check(_) | CliError::Core(Error::Diverged { .. }) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn open_db(dir: &Path, cfg: &TrainConfig) -> Result<SourceDatabase> {
    let db = load_database(dir).map_err(|e| CliError::Usage(e.to_string()))?;
    if db.points() != cfg.arch.points {
        return Err(CliError::Usage(format!(
            "database has {} points per shape but the configuration expects {}",
            db.points(),
            cfg.arch.points
        )));
    }
    Ok(db)
}

fn open_model(cfg: &TrainConfig, checkpoint: &Path) -> Result<red_forge::nets::Model> {
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    load_model(cfg, checkpoint).map_err(|e| CliError::Usage(e.to_string()))
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    pcf::read_any(path).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn gen_db(a: GenDbArgs) -> Result<()> {
    let mut cfg = a.config.resolve(None)?;
    if let Some(n) = a.per_category {
        cfg.db_per_category = n as usize;
    }
    let db = build_database(cfg.db_per_category, cfg.seed, cfg.arch.points)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    save_database(&db, &a.out).map_err(|e| CliError::Usage(e.to_string()))?;
    config::write(&cfg, &a.out.join(CONFIG_FILE))?;
    println!("wrote {} shapes ({} points each) to {}", db.len(), db.points(), a.out.display());
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = a.config.resolve(None)?;
    let ds = generate_dataset(&cfg)?;
    save_dataset(&ds, &a.out).map_err(|e| CliError::Usage(e.to_string()))?;
    config::write(&cfg, &a.out.join(CONFIG_FILE))?;
    println!("wrote {} training and {} test targets to {}", ds.train.len(), ds.test.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve(None)?;
    let db = open_db(&a.db, &cfg)?;
    let ds = load_dataset(&a.data).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    config::write(&cfg, &a.out.join(CONFIG_FILE))?;
    let out = training::train(&db, &ds.train, &cfg, Some(&a.out))?;
    let first = out.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = out.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!("trained {} epochs: mean loss {first:.6} -> {last:.6}; run in {}", cfg.epochs, a.out.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_category: CategoryScores,
    pub instance_average: f64,
}

impl From<&EvalReport> for Summary {
    fn from(r: &EvalReport) -> Self {
        Summary {
            per_category: r.per_category.clone(),
            instance_average: r.instance_average,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSummary {
    pub recall: f64,
    pub per_category: CategoryScores,
    pub instance_average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Best undeformed source per target.
    pub rigid: Summary,
    /// Best directly fitted source per target.
    pub direct: Summary,
}

/// `eval` report; Chamfer distances are x100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub per_category: CategoryScores,
    pub instance_average: f64,
    pub instances: Vec<training::InstanceResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baselines: Option<Baselines>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.config.resolve(Some(&config::beside(&a.checkpoint)))?;
    let model = open_model(&cfg, &a.checkpoint)?;
    let db = open_db(&a.db, &cfg)?;
    let ds = load_dataset(&a.data).map_err(|e| CliError::Usage(e.to_string()))?;
    let samples = match a.split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    if samples.is_empty() {
        return Err(CliError::Usage("the selected split has no targets".into()));
    }
    let opts = cfg.eval_options();
    let report = evaluate(&db, &model, samples, &opts)?;
    let planted = if a.planted {
        let cases = planted_cases(&db, &cfg.occlusion, cfg.occlusion.eval_ratio, cfg.seed)?;
        let r = evaluate(&db, &model, &cases, &opts)?;
        Some(PlantedSummary {
            recall: r.planted_recall().unwrap_or(0.0),
            per_category: r.per_category.clone(),
            instance_average: r.instance_average,
        })
    } else {
        None
    };
    let baselines = if a.baselines {
        let rigid = oracle_report(&db, samples, &IdentityDeformer, cfg.within_category)?;
        let direct = oracle_report(&db, samples, &DirectFitDeformer(cfg.fit), cfg.within_category)?;
        Some(Baselines {
            rigid: (&rigid).into(),
            direct: (&direct).into(),
        })
    } else {
        None
    };
    let out = EvalOutput {
        per_category: report.per_category,
        instance_average: report.instance_average,
        instances: report.instances,
        planted,
        baselines,
    };
    write_json(&out, &a.out)?;
    config::write(&cfg, &config::for_file(&a.out))?;
    println!("instance average {:.4} (x1e-2) over {} targets", out.instance_average, out.instances.len());
    if let Some(p) = &out.planted {
        println!("planted recall {:.3}", p.recall);
    }
    if let Some(b) = &out.baselines {
        println!("rigid oracle {:.4}, direct oracle {:.4}", b.rigid.instance_average, b.direct.instance_average);
    }
    Ok(())
}

pub fn retrieve(a: RetrieveArgs) -> Result<()> {
    let cfg = a.config.resolve(Some(&config::beside(&a.checkpoint)))?;
    let model = open_model(&cfg, &a.checkpoint)?;
    let mut db = open_db(&a.db, &cfg)?;
    if let Some(c) = &a.category {
        let cat: Category = c.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
        if cfg.within_category {
            let entries = db.of_category(cat).map(|(_, e)| e.clone()).collect();
            db = SourceDatabase::new(entries, db.seed()).map_err(|_| CliError::Usage(format!("database has no {cat} shapes")))?;
        }
    }
    let target = read_cloud(&a.target)?;
    let mut out = retrieve_otm(&db, &target, &model, &cfg.retrieval, None)?;
    out.target = a.target.display().to_string();
    write_json(&out, &a.out)?;
    config::write(&cfg, &config::for_file(&a.out))?;
    println!("top-{}: {}", out.top_k.len(), out.top_k.join(", "));
    Ok(())
}

pub fn deform(a: DeformArgs) -> Result<()> {
    let fallback = a.checkpoint.as_deref().map(config::beside);
    let cfg = a.config.resolve(fallback.as_deref())?;
    let db = open_db(&a.db, &cfg)?;
    let idx = db
        .find(&a.source)
        .ok_or_else(|| CliError::Usage(format!("no source `{}` in the database", a.source)))?;
    let source = &db.get(idx).shape;
    let target = read_cloud(&a.target)?;
    let params = match (&a.checkpoint, a.direct) {
        (Some(c), false) => {
            let model = open_model(&cfg, c)?;
            NetDeformer(&model).params(source, &target)?
        }
        (None, true) => fit_deformation_with(source, &target, &cfg.fit)?.params,
        _ => return Err(CliError::Usage("pass exactly one of --checkpoint and --direct".into())),
    };
    let deformed = apply_deformation(source, &params)?;
    let before = chamfer_distance(source.cloud.points(), target.points())?;
    let after = chamfer_distance(deformed.points(), target.points())?;
    write_json(&params, &a.out)?;
    if let Some(p) = &a.cloud_out {
        pcf::write(p, &deformed).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    config::write(&cfg, &config::for_file(&a.out))?;
    println!("chamfer {before:.6} -> {after:.6}");
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ratio: f64,
    pub per_category: CategoryScores,
    pub instance_average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    if a.ratios.is_empty() || a.ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(CliError::Usage("ratios must lie in [0, 1)".into()));
    }
    let cfg = a.config.resolve(Some(&config::beside(&a.checkpoint)))?;
    let model = open_model(&cfg, &a.checkpoint)?;
    let db = open_db(&a.db, &cfg)?;
    let ds = load_dataset(&a.data).map_err(|e| CliError::Usage(e.to_string()))?;
    if ds.test.is_empty() {
        return Err(CliError::Usage("the dataset has no test targets".into()));
    }
    let mut rows = Vec::with_capacity(a.ratios.len());
    for &ratio in &a.ratios {
        let samples = reocclude(&ds.test, ratio)?;
        let r = evaluate(&db, &model, &samples, &cfg.eval_options())?;
        println!("ratio {ratio:.2}: instance average {:.4}", r.instance_average);
        rows.push(AblationRow {
            ratio,
            per_category: r.per_category,
            instance_average: r.instance_average,
        });
    }
    write_json(&AblationReport { rows }, &a.out)?;
    config::write(&cfg, &config::for_file(&a.out))
}

pub fn grad_check(a: GradCheckArgs) -> Result<()> {
    if !(a.tol > 0.0) {
        return Err(CliError::Usage("--tol must be positive".into()));
    }
    let module = match a.module {
        ModuleArg::All => None,
        ModuleArg::Autodiff => Some(GradModule::Autodiff),
        ModuleArg::Losses => Some(GradModule::Losses),
        ModuleArg::Nets => Some(GradModule::Nets),
    };
    let outcomes = match a.inject_fault {
        Some(op) => {
            if !OP_NAMES.contains(&op.as_str()) {
                return Err(CliError::Usage(format!("unknown op `{op}`; expected one of {}", OP_NAMES.join(", "))));
            }
            let op: &'static str = Box::leak(op.into_boxed_str());
            with_backward_fault(op, || run_checks(module, a.tol))?
        }
        None => run_checks(module, a.tol)?,
    };
    let mut failed = Vec::new();
    for o in &outcomes {
        let status = if o.passed { "ok" } else { "FAIL" };
        println!("{:<9} {:<24} max rel err {:.3e} ({} coords) {status}", o.module.name(), o.name, o.max_rel_err, o.checked);
        if !o.passed {
            failed.push(format!("{}/{}", o.module.name(), o.name));
        }
    }
    if failed.is_empty() {
        println!("{} checks passed at tol {:e}", outcomes.len(), a.tol);
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}
