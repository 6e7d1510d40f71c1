//! Generated training and test targets with their partial observations.
//!
//! On disk a dataset directory holds `dataset.json`, one `SDB1` database per
//! split (`train/`, `test/`) with the full part-segmented targets, and per
//! sample a `PCF1` partial cloud plus a `.idx` correspondence file (one
//! little-endian `u32` full-cloud index per partial point).

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::{pcf, PointCloud};
use crate::occlusion::{simulate, OcclusionSpec, PartialObservation};
use crate::rng;
use crate::shapes::{generate_shape, load_database, save_database, shape_seed, DbEntry, PartSegmentedShape, SourceDatabase};

pub const DATASET_FORMAT: &str = "RFD1";
const TRAIN_PURPOSE: u64 = 0x7a;
const TEST_PURPOSE: u64 = 0x7e;

/// A full target, its occluded observation and the spec that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub shape: PartSegmentedShape,
    pub partial: PartialObservation,
    pub spec: OcclusionSpec,
    /// Database index when the target is a copy of a database shape.
    pub planted: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub points: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn occluded(id: String, shape: PartSegmentedShape, spec: OcclusionSpec, planted: Option<usize>) -> Result<Sample> {
    let mut partial = simulate(&shape.cloud, &spec, shape.cloud.len())?;
    // stored as f32 on disk; keep memory and disk identical
    let pts = partial.partial.points().iter().map(|p| p.map(|v| v as f32 as f64)).collect();
    partial.partial = PointCloud::new(pts)?;
    Ok(Sample { id, shape, partial, spec, planted })
}

fn split(cfg: &TrainConfig, purpose: u64, per_category: usize, test: bool) -> Result<Vec<Sample>> {
    let jobs: Vec<_> = cfg
        .categories
        .iter()
        .flat_map(|&c| (0..per_category).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(cat, i)| {
            let seed = shape_seed(cfg.seed, purpose, cat, i);
            let shape = generate_shape(cat, seed, cfg.arch.points)?;
            let o = &cfg.occlusion;
            let ratio = if test {
                o.eval_ratio
            } else {
                rng::stream(seed, rng::Stream::Occlusion).random_range(o.ratio_min..=o.ratio_max)
            };
            // whole points only: the achieved ratio moves in steps of 1/M
            let m = cfg.arch.points as f64;
            let ratio = ((ratio * m).round() / m).clamp(o.ratio_min.min(o.ratio_max), o.ratio_max);
            let spec = o.spec(ratio, rng::derive_seed(seed, &[0x0cc]));
            let kind = if test { "test" } else { "train" };
            occluded(format!("{kind}-{}-{i:03}", cat.name()), shape, spec, None)
        })
        .collect()
}

/// Training and test targets for `cfg`. Train ratios are drawn per sample
/// from the configured range; test partials use the evaluation ratio.
pub fn generate_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        seed: cfg.seed,
        points: cfg.arch.points,
        train: split(cfg, TRAIN_PURPOSE, cfg.train_per_category, false)?,
        test: split(cfg, TEST_PURPOSE, cfg.test_per_category, true)?,
    })
}

/// Re-occlude existing samples at a new ratio, keeping their anchors' seeds.
pub fn reocclude(samples: &[Sample], ratio: f64) -> Result<Vec<Sample>> {
    samples
        .par_iter()
        .map(|s| {
            let spec = OcclusionSpec { target_ratio: ratio, ..s.spec };
            occluded(s.id.clone(), s.shape.clone(), spec, s.planted)
        })
        .collect()
}

/// One occluded copy of every database shape, with the copy's source index.
pub fn planted_cases(db: &SourceDatabase, occlusion: &super::OcclusionDefaults, ratio: f64, seed: u64) -> Result<Vec<Sample>> {
    (0..db.len())
        .into_par_iter()
        .map(|j| {
            let e = db.get(j);
            let spec = occlusion.spec(ratio, rng::derive_seed(seed, &[0x91a, j as u64]));
            occluded(format!("planted-{}", e.id), e.shape.clone(), spec, Some(j))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    points: usize,
    train: Vec<ManifestSample>,
    test: Vec<ManifestSample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    occlusion: OcclusionSpec,
    achieved_ratio: f64,
    partial: String,
    correspondence: String,
}

fn write_split(dir: &Path, name: &str, samples: &[Sample], seed: u64) -> Result<Vec<ManifestSample>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let entries = samples
        .iter()
        .map(|s| DbEntry { id: s.id.clone(), shape: s.shape.clone() })
        .collect();
    let db = SourceDatabase::new(entries, Some(seed))?;
    save_database(&db, &dir.join(name))?;
    let pdir = dir.join("partials");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    samples
        .iter()
        .map(|s| {
            let partial = format!("partials/{}.pcf", s.id);
            let correspondence = format!("partials/{}.idx", s.id);
            pcf::write(&dir.join(&partial), &s.partial.partial)?;
            let bytes: Vec<u8> = s.partial.correspondence.iter().flat_map(|&i| (i as u32).to_le_bytes()).collect();
            let cp = dir.join(&correspondence);
            fs::write(&cp, bytes).map_err(|e| Error::io(&cp, e))?;
            Ok(ManifestSample {
                id: s.id.clone(),
                occlusion: s.spec,
                achieved_ratio: s.partial.achieved_ratio,
                partial,
                correspondence,
            })
        })
        .collect()
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        seed: ds.seed,
        points: ds.points,
        train: write_split(dir, "train", &ds.train, ds.seed)?,
        test: write_split(dir, "test", &ds.test, ds.seed)?,
    };
    let mp = dir.join("dataset.json");
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

fn read_split(dir: &Path, name: &str, rows: Vec<ManifestSample>, points: usize) -> Result<Vec<Sample>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let db = load_database(&dir.join(name))?;
    rows.into_iter()
        .map(|m| {
            let j = db
                .find(&m.id)
                .ok_or_else(|| Error::parse("dataset.json", name, 0, format!("sample `{}` missing from {name}/", m.id)))?;
            let shape = db.get(j).shape.clone();
            let partial = pcf::read(&dir.join(&m.partial))?;
            let cp = dir.join(&m.correspondence);
            let bytes = fs::read(&cp).map_err(|e| Error::io(&cp, e))?;
            let file = cp.display().to_string();
            if bytes.len() != 4 * partial.len() {
                let offset = (bytes.len().min(4 * partial.len()) & !3) as u64;
                return Err(Error::parse(&file, "indices", offset, format!("expected {} indices", partial.len())));
            }
            let correspondence: Vec<usize> = bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            if let Some(k) = correspondence.iter().position(|&i| i >= shape.cloud.len()) {
                return Err(Error::parse(&file, "indices", 4 * k as u64, "index beyond the full cloud"));
            }
            if shape.cloud.len() != points {
                return Err(Error::parse("dataset.json", name, 0, format!("`{}` does not have {points} points", m.id)));
            }
            Ok(Sample {
                id: m.id,
                shape,
                partial: PartialObservation { partial, correspondence, achieved_ratio: m.achieved_ratio },
                spec: m.occlusion,
                planted: None,
            })
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mp = dir.join("dataset.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(mp.display().to_string(), "manifest", 0, e.to_string()))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::parse(mp.display().to_string(), "manifest", 0, format!("unknown format `{}`", m.format)));
    }
    Ok(Dataset {
        seed: m.seed,
        points: m.points,
        train: read_split(dir, "train", m.train, m.points)?,
        test: read_split(dir, "test", m.test, m.points)?,
    })
}
