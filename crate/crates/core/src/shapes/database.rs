//! `SDB1` source databases.
//!
//! A database directory holds `manifest.json`, one `PCF1` cloud per shape
//! under `clouds/` and one label file per shape under `labels/` (a `u16`
//! little-endian part id per point).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_shape, Category, PartBox, PartSegmentedShape};
use crate::error::{Error, Result};
use crate::geometry::pcf;
use crate::rng;

pub const FORMAT: &str = "SDB1";
const MANIFEST: &str = "manifest.json";
/// Containment slack applied when a database is validated.
const BOX_SLACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub id: String,
    pub shape: PartSegmentedShape,
}

/// Immutable, id-sorted collection of source shapes sharing one point count.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDatabase {
    entries: Vec<DbEntry>,
    points: usize,
    seed: Option<u64>,
}

impl SourceDatabase {
    pub fn new(mut entries: Vec<DbEntry>, seed: Option<u64>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::InvalidArgument("database has no shapes".into()))?;
        let points = first.shape.cloud.len();
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        for w in entries.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::InvalidArgument(format!("duplicate shape id `{}`", w[0].id)));
            }
        }
        for e in &entries {
            if e.shape.cloud.len() != points {
                return Err(Error::InvalidArgument(format!(
                    "shape `{}` has {} points, expected {points}",
                    e.id,
                    e.shape.cloud.len()
                )));
            }
        }
        Ok(SourceDatabase { entries, points, seed })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &DbEntry {
        &self.entries[i]
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.id.as_str().cmp(id)).ok()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn of_category(&self, cat: Category) -> impl Iterator<Item = (usize, &DbEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.shape.category == cat)
    }
}

/// Seed for shape `index` of `cat` within a generation `purpose`.
pub(crate) fn shape_seed(seed: u64, purpose: u64, cat: Category, index: usize) -> u64 {
    rng::derive_seed(seed, &[purpose, cat.index() as u64, index as u64])
}

/// Generate `n_per_category` shapes of each category with `m` points.
pub fn build_database(n_per_category: usize, seed: u64, m: usize) -> Result<SourceDatabase> {
    if n_per_category == 0 {
        return Err(Error::InvalidArgument("n_per_category must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(3 * n_per_category);
    for cat in Category::ALL {
        for i in 0..n_per_category {
            let shape = generate_shape(cat, shape_seed(seed, 0xdb, cat, i), m)?;
            shape.validate(BOX_SLACK)?;
            entries.push(DbEntry {
                id: format!("{}-{i:03}", cat.name()),
                shape,
            });
        }
    }
    SourceDatabase::new(entries, Some(seed))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    shapes: Vec<ManifestShape>,
    invariant_checks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestShape {
    id: String,
    category: Category,
    cloud: String,
    labels: String,
    parts: Vec<ManifestPart>,
    connectivity: Vec<[u16; 2]>,
}

#[derive(Serialize, Deserialize)]
struct ManifestPart {
    part_id: u16,
    c0: [f64; 3],
    w0: f64,
    h0: f64,
    l0: f64,
}

/// Names of the per-shape invariants verified before a database is written.
pub const INVARIANT_CHECKS: [&str; 5] = [
    "labels_name_existing_parts",
    "points_inside_part_boxes",
    "positive_extents",
    "connectivity_edges_valid",
    "ids_unique_and_sorted",
];

pub fn save_database(db: &SourceDatabase, dir: &Path) -> Result<()> {
    for sub in ["clouds", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut shapes = Vec::with_capacity(db.len());
    for e in db.entries() {
        e.shape.validate(BOX_SLACK)?;
        let cloud = format!("clouds/{}.pcf", e.id);
        let labels = format!("labels/{}.lbl", e.id);
        pcf::write(&dir.join(&cloud), &e.shape.cloud)?;
        let bytes: Vec<u8> = e.shape.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        let lp = dir.join(&labels);
        fs::write(&lp, bytes).map_err(|err| Error::io(&lp, err))?;
        shapes.push(ManifestShape {
            id: e.id.clone(),
            category: e.shape.category,
            cloud,
            labels,
            parts: e
                .shape
                .parts
                .iter()
                .map(|p| ManifestPart {
                    part_id: p.part_id,
                    c0: p.center,
                    w0: p.extents[0],
                    h0: p.extents[1],
                    l0: p.extents[2],
                })
                .collect(),
            connectivity: e.shape.connectivity.iter().map(|&(a, b)| [a, b]).collect(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        points: db.points(),
        seed: db.seed(),
        shapes,
        invariant_checks: INVARIANT_CHECKS.iter().map(|s| s.to_string()).collect(),
    };
    let mp = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

fn json_offset(text: &str, err: &serde_json::Error) -> u64 {
    let line = err.line().max(1);
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + err.column().saturating_sub(1)).min(text.len()) as u64
}

fn decode_labels(bytes: &[u8], n: usize, file: &str) -> Result<Vec<u16>> {
    if bytes.len() != 2 * n {
        let offset = bytes.len().min(2 * n) & !1;
        return Err(Error::parse(
            file,
            "labels",
            offset as u64,
            format!("expected {n} labels ({} bytes), found {} bytes", 2 * n, bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

pub fn load_database(dir: &Path) -> Result<SourceDatabase> {
    let mp = dir.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let file = mp.display().to_string();
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&file, "manifest", json_offset(&text, &e), e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::parse(&file, "manifest", 0, format!("unknown format `{}`", manifest.format)));
    }
    let mut entries = Vec::with_capacity(manifest.shapes.len());
    for s in manifest.shapes {
        let cp = dir.join(&s.cloud);
        let bytes = fs::read(&cp).map_err(|e| Error::io(&cp, e))?;
        let cloud = pcf::decode(&bytes, &cp.display().to_string())?;
        let lp = dir.join(&s.labels);
        let bytes = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        let labels = decode_labels(&bytes, cloud.len(), &lp.display().to_string())?;
        let shape = PartSegmentedShape {
            cloud,
            labels,
            parts: s
                .parts
                .iter()
                .map(|p| PartBox {
                    part_id: p.part_id,
                    center: p.c0,
                    extents: [p.w0, p.h0, p.l0],
                })
                .collect(),
            connectivity: s.connectivity.iter().map(|&[a, b]| (a, b)).collect(),
            category: s.category,
        };
        shape
            .validate(BOX_SLACK)
            .map_err(|e| Error::parse(&file, &format!("shape {}", s.id), 0, e.to_string()))?;
        entries.push(DbEntry { id: s.id, shape });
    }
    let db = SourceDatabase::new(entries, manifest.seed)?;
    if db.points() != manifest.points {
        return Err(Error::parse(
            &file,
            "manifest",
            0,
            format!("manifest declares {} points, clouds have {}", manifest.points, db.points()),
        ));
    }
    Ok(db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_unique_sorted_ids() {
        let db = build_database(10, 5, 64).unwrap();
        assert_eq!(db.len(), 30);
        let ids: Vec<&str> = db.ids().collect();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(ids, sorted);
        assert_eq!(db.of_category(Category::Table).count(), 10);
        assert_eq!(db.find("chair-003").map(|i| db.get(i).id.as_str()), Some("chair-003"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let db = build_database(2, 9, 128).unwrap();
        save_database(&db, dir.path()).unwrap();
        let back = load_database(dir.path()).unwrap();
        assert_eq!(db, back);
    }

    #[test]
    fn manifests_are_byte_identical_per_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_database(&build_database(2, 4, 64).unwrap(), a.path()).unwrap();
        save_database(&build_database(2, 4, 64).unwrap(), b.path()).unwrap();
        let read = |d: &Path| fs::read(d.join(MANIFEST)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn truncated_files_name_their_section() {
        let dir = tempfile::tempdir().unwrap();
        let db = build_database(1, 2, 64).unwrap();
        save_database(&db, dir.path()).unwrap();

        let lbl = dir.path().join("labels/chair-000.lbl");
        let bytes = fs::read(&lbl).unwrap();
        fs::write(&lbl, &bytes[..51]).unwrap();
        match load_database(dir.path()).unwrap_err() {
            Error::Parse { section, offset, .. } => assert_eq!((section.as_str(), offset), ("labels", 50)),
            e => panic!("unexpected {e}"),
        }

        let mp = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mp).unwrap();
        fs::write(&mp, &text[..text.len() / 2]).unwrap();
        match load_database(dir.path()).unwrap_err() {
            Error::Parse { section, offset, .. } => {
                assert_eq!(section, "manifest");
                assert!(offset > 0 && offset <= (text.len() / 2) as u64);
            }
            e => panic!("unexpected {e}"),
        }
    }
}
