//! Held-out evaluation: retrieve, deform the top candidates, score against
//! the full target.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::autodiff::{Graph, Tensor};
use crate::deformation::{apply_deformation, oracle_retrieval_split, Deformer, PartDeformParams};
use crate::error::Result;
use crate::geometry::{chamfer_distance, PointCloud};
use crate::nets::{agnn_deform, encode, Ctx, Encoder, Mode, Model, ResidualScorer};
use crate::retrieval::{retrieve_otm, RetrievalOptions, SourceCache};
use crate::shapes::{part_mean_pool, Category, PartSegmentedShape, SourceDatabase};

/// Deforms a source with the partial branch of a trained model.
pub struct NetDeformer<'a>(pub &'a Model);

impl NetDeformer<'_> {
    pub fn params(&self, source: &PartSegmentedShape, target: &PointCloud) -> Result<PartDeformParams> {
        let mut ctx = Ctx::new(self.0, Mode::Eval);
        let mut g = Graph::new();
        let t = g.constant(Tensor::matrix(target.len(), 3, target.to_flat())?);
        let o = g.constant(Tensor::matrix(source.cloud.len(), 3, source.cloud.to_flat())?);
        let fp = encode(&mut ctx, &mut g, Encoder::Partial, t)?;
        let fs = encode(&mut ctx, &mut g, Encoder::Source, o)?;
        let parts = part_mean_pool(&mut g, fs.pointwise, &source.labels_usize(), source.n_parts())?;
        let raw = agnn_deform(&mut ctx, &mut g, parts, fp.global, fs.global)?;
        PartDeformParams::from_raw_rows(g.value(raw))
    }
}

impl Deformer for NetDeformer<'_> {
    fn deform(&self, source: &PartSegmentedShape, target: &PointCloud) -> Result<PointCloud> {
        apply_deformation(source, &self.params(source, target)?)
    }
}

/// Mean Chamfer distance per category (x100); `None` when a category has no
/// test targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub chair: Option<f64>,
    pub table: Option<f64>,
    pub cabinet: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub category: Category,
    /// Raw Chamfer distance of the best deformed candidate to the full target.
    pub chamfer: f64,
    pub best_source: String,
    /// Candidates considered, best first by retrieval rank.
    pub candidates: Vec<String>,
    /// For planted targets: whether the planted source is among the candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_hit: Option<bool>,
}

/// Evaluation report. Chamfer distances are reported x100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: CategoryScores,
    pub instance_average: f64,
    pub instances: Vec<InstanceResult>,
}

impl EvalReport {
    pub fn from_instances(instances: Vec<InstanceResult>) -> Self {
        let mean = |cat: Option<Category>| {
            let v: Vec<f64> = instances
                .iter()
                .filter(|r| cat.is_none_or(|c| r.category == c))
                .map(|r| r.chamfer)
                .collect();
            (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
        };
        EvalReport {
            per_category: CategoryScores {
                chair: mean(Some(Category::Chair)),
                table: mean(Some(Category::Table)),
                cabinet: mean(Some(Category::Cabinet)),
            },
            instance_average: mean(None).unwrap_or(f64::NAN),
            instances,
        }
    }

    /// Fraction of planted targets whose source was retrieved.
    pub fn planted_recall(&self) -> Option<f64> {
        let hits: Vec<bool> = self.instances.iter().filter_map(|r| r.planted_hit).collect();
        (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }
}

/// Inference settings for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub retrieval: RetrievalOptions,
    /// Search only sources of the target's (known) category.
    pub within_category: bool,
}

/// The sources a target may be matched against, with their database indices.
struct Scope {
    db: SourceDatabase,
    index: Vec<usize>,
}

fn scopes(db: &SourceDatabase, samples: &[Sample], within_category: bool) -> Result<Vec<Option<Scope>>> {
    Category::ALL
        .iter()
        .map(|&c| {
            if !within_category || !samples.iter().any(|s| s.shape.category == c) {
                return Ok(None);
            }
            let index: Vec<usize> = db.of_category(c).map(|(i, _)| i).collect();
            if index.is_empty() {
                return Err(crate::error::Error::InvalidArgument(format!("database has no {c} shapes")));
            }
            let entries = index.iter().map(|&i| db.get(i).clone()).collect();
            Ok(Some(Scope { db: SourceDatabase::new(entries, db.seed())?, index }))
        })
        .collect()
}

/// Retrieve with sphere sampling, deform each retrieved candidate with the
/// network and keep the lowest Chamfer distance to the held-out full shape.
pub fn evaluate(db: &SourceDatabase, model: &Model, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    let scorer = ResidualScorer::new(model)?;
    let scoped = scopes(db, samples, opts.within_category)?;
    let all = SourceCache::build(model, &scorer, db)?;
    let caches = scoped
        .iter()
        .map(|s| s.as_ref().map(|s| SourceCache::build(model, &scorer, &s.db)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let deformer = NetDeformer(model);
    let instances = samples
        .par_iter()
        .map(|s| {
            let target = &s.partial.partial;
            let k = s.shape.category.index();
            let (sdb, cache, map) = match (&scoped[k], &caches[k]) {
                (Some(sc), Some(c)) => (&sc.db, c, Some(&sc.index)),
                _ => (db, &all, None),
            };
            let out = retrieve_otm(sdb, target, model, &opts.retrieval, Some(cache))?;
            let to_db = |j: usize| map.map_or(j, |m| m[j]);
            let mut best = (f64::INFINITY, 0);
            for &j in &out.top_k_indices {
                let d = deformer.deform(&db.get(to_db(j)).shape, target)?;
                let c = chamfer_distance(d.points(), s.shape.cloud.points())?;
                if c < best.0 {
                    best = (c, to_db(j));
                }
            }
            Ok(InstanceResult {
                id: s.id.clone(),
                category: s.shape.category,
                chamfer: best.0,
                best_source: db.get(best.1).id.clone(),
                candidates: out.top_k,
                planted_hit: s.planted.map(|p| out.top_k_indices.iter().any(|&j| to_db(j) == p)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_instances(instances))
}

/// Exhaustive baseline: deform every candidate source toward the partial
/// observation and keep the best Chamfer distance to the full shape.
pub fn oracle_report(db: &SourceDatabase, samples: &[Sample], deformer: &dyn Deformer, within_category: bool) -> Result<EvalReport> {
    let scoped = scopes(db, samples, within_category)?;
    let instances = samples
        .iter()
        .map(|s| {
            let (sdb, map) = match &scoped[s.shape.category.index()] {
                Some(sc) => (&sc.db, Some(&sc.index)),
                None => (db, None),
            };
            let o = oracle_retrieval_split(sdb, &s.partial.partial, &s.shape.cloud, deformer)?;
            let index = map.map_or(o.index, |m| m[o.index]);
            Ok(InstanceResult {
                id: s.id.clone(),
                category: s.shape.category,
                chamfer: o.chamfer,
                best_source: o.id.clone(),
                candidates: vec![o.id],
                planted_hit: s.planted.map(|p| p == index),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_instances(instances))
}
