//! One-to-many retrieval: score every source under many sampled full-shape
//! indicators with the residual head, take the per-sample argmin and vote.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nets::{encode_eval, Encoder, Model, ResidualScorer, INDICATOR_TOL};
use crate::rng;
use crate::shapes::SourceDatabase;

/// Unit-norm full-shape indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct Indicator(Vec<f64>);

impl Indicator {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() < INDICATOR_TOL) {
            return Err(Error::IndicatorOffSphere(norm));
        }
        Ok(Indicator(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// `g / |g|`.
pub fn indicator_from_full(g: &[f64]) -> Result<Indicator> {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Indicator::new(g.iter().map(|x| x / norm).collect())
}

/// `n` indicators drawn uniformly from the unit sphere in `dim` dimensions.
pub fn sample_sphere(n: usize, dim: usize, seed: u64) -> Result<Vec<Indicator>> {
    if n == 0 || dim < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 1 and dim >= 2, got n={n}, dim={dim}")));
    }
    let mut r = rng::stream(seed, rng::Stream::Sphere);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.push(Indicator(v.into_iter().map(|x| x / norm).collect()));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Mean,
    Max,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ScoreMode::Mean),
            "max" => Ok(ScoreMode::Max),
            o => Err(Error::InvalidArgument(format!("unknown score mode `{o}`"))),
        }
    }
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::Mean => "mean",
            ScoreMode::Max => "max",
        }
    }
}

/// Number of points dropped for a trim fraction: `ceil(trim * m)`, with a
/// small allowance so that e.g. `0.1 * 30` drops 3, not 4.
pub fn trim_count(m: usize, trim: f64) -> usize {
    (trim * m as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Drop the `trim_count` largest norms, then average (or take the max of)
/// the rest.
pub fn trimmed_score_norms(norms: &[f64], trim: f64, mode: ScoreMode) -> Result<f64> {
    if !(0.0..1.0).contains(&trim) {
        return Err(Error::InvalidArgument(format!("trim fraction {trim} outside [0, 1)")));
    }
    let drop = trim_count(norms.len(), trim);
    if drop >= norms.len() {
        return Err(Error::AllTrimmed);
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let kept = &sorted[drop..];
    Ok(match mode {
        ScoreMode::Max => kept[0],
        ScoreMode::Mean => kept.iter().sum::<f64>() / kept.len() as f64,
    })
}

/// Trimmed score of a row-major `M x 3` residual field.
pub fn trimmed_score(r: &[f64], trim: f64, mode: ScoreMode) -> Result<f64> {
    if r.len() % 3 != 0 {
        return Err(Error::ShapeMismatch {
            op: "trimmed_score",
            lhs: vec![r.len()],
            rhs: vec![0, 3],
        });
    }
    let norms: Vec<f64> = r.chunks_exact(3).map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).collect();
    trimmed_score_norms(&norms, trim, mode)
}

/// Per-sample winner over a `samples x sources` score table (ties to the
/// lowest index).
pub fn argmin_votes(scores: &[Vec<f64>], n_sources: usize) -> Vec<usize> {
    let mut votes = vec![0; n_sources];
    for row in scores {
        let mut best = 0;
        for (j, &s) in row.iter().enumerate() {
            if s < row[best] {
                best = j;
            }
        }
        if !row.is_empty() {
            votes[best] += 1;
        }
    }
    votes
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOptions {
    pub n_samples: usize,
    pub top_k: usize,
    pub trim: f64,
    pub mode: ScoreMode,
    pub seed: u64,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions {
            n_samples: 1000,
            top_k: 10,
            trim: 0.1,
            mode: ScoreMode::Mean,
            seed: 0,
        }
    }
}

/// Source-side features, computed once per model and database.
pub struct SourceCache {
    rows: Vec<Vec<f64>>,
    globals: Vec<Vec<f64>>,
}

impl SourceCache {
    pub fn build(model: &Model, scorer: &ResidualScorer, db: &SourceDatabase) -> Result<Self> {
        let globals = db
            .entries()
            .par_iter()
            .map(|e| encode_eval(model, Encoder::Source, &e.shape.cloud).map(|(_, g)| g))
            .collect::<Result<Vec<_>>>()?;
        let rows = globals.iter().map(|g| scorer.source_row(g)).collect::<Result<_>>()?;
        Ok(SourceCache { rows, globals })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn global(&self, i: usize) -> &[f64] {
        &self.globals[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceResult {
    pub id: String,
    pub votes: usize,
    /// Lowest trimmed score over all samples.
    pub best_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub target: String,
    pub n_samples: usize,
    pub mode: ScoreMode,
    pub trim: f64,
    /// Every source, by descending votes then id.
    pub results: Vec<SourceResult>,
    /// Up to `top_k` ids that received votes, in `results` order.
    pub top_k: Vec<String>,
    /// Database index per `top_k` entry.
    #[serde(skip)]
    pub top_k_indices: Vec<usize>,
    /// `samples x sources` score table, in database order.
    #[serde(skip)]
    pub scores: Vec<Vec<f64>>,
    /// Votes per source in database order.
    #[serde(skip)]
    pub votes: Vec<usize>,
}

/// Retrieve sources for a partial target by sphere-sampled indicators.
pub fn retrieve_otm(
    db: &SourceDatabase,
    target: &PointCloud,
    model: &Model,
    opts: &RetrievalOptions,
    cache: Option<&SourceCache>,
) -> Result<RetrievalOutcome> {
    if db.is_empty() {
        return Err(Error::InvalidArgument("empty database".into()));
    }
    let scorer = ResidualScorer::new(model)?;
    let built;
    let cache = match cache {
        Some(c) => c,
        None => {
            built = SourceCache::build(model, &scorer, db)?;
            &built
        }
    };
    if cache.len() != db.len() {
        return Err(Error::InvalidArgument("source cache does not match the database".into()));
    }
    let (fp, gp) = encode_eval(model, Encoder::Partial, target)?;
    let base = scorer.target_base(&fp, &gp)?;
    let indicators = sample_sphere(opts.n_samples, model.arch.feat, opts.seed)?;
    let scores = indicators
        .par_iter()
        .map(|ind| {
            let irow = scorer.indicator_row(ind.as_slice())?;
            cache
                .rows
                .iter()
                .map(|srow| trimmed_score(&scorer.residual(&base, srow, &irow), opts.trim, opts.mode))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let votes = argmin_votes(&scores, db.len());
    let mut order: Vec<usize> = (0..db.len()).collect();
    // database order is id order, so a stable sort breaks vote ties by id
    order.sort_by(|&a, &b| votes[b].cmp(&votes[a]));
    let results = order
        .iter()
        .map(|&j| SourceResult {
            id: db.get(j).id.clone(),
            votes: votes[j],
            best_score: scores.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min),
        })
        .collect();
    let top_k_indices: Vec<usize> = order.iter().copied().filter(|&j| votes[j] > 0).take(opts.top_k).collect();
    Ok(RetrievalOutcome {
        target: String::new(),
        n_samples: opts.n_samples,
        mode: opts.mode,
        trim: opts.trim,
        results,
        top_k: top_k_indices.iter().map(|&j| db.get(j).id.clone()).collect(),
        top_k_indices,
        scores,
        votes,
    })
}
