//! CSV tables: dataset manifests, score lists, loss traces and leaderboards.

use std::path::{Path, PathBuf};

use fusegrid_core::cv::LeaderRow;
use fusegrid_core::metrics::{RocPoint, Score};
use fusegrid_core::train::{Sample, StepRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::vol;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub image_path: String,
    pub mask_path: String,
    pub z: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRow {
    case_id: String,
    p: f64,
    z: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LeaderCsvRow {
    rank: usize,
    name: String,
    alpha: Option<usize>,
    beta: Option<String>,
    sen: f64,
    spec: f64,
    f1: f64,
    auc: f64,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(csv_err(path))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    read_rows(path)
}

/// Relative volume paths resolve against the manifest's directory.
pub fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_samples(manifest: &Path) -> Result<Vec<Sample>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let image = vol::read(&resolve(manifest, &row.image_path))?;
            let mask = vol::read(&resolve(manifest, &row.mask_path))?;
            Ok(Sample::new(row.case_id, image, mask, row.z)?)
        })
        .collect()
}

pub fn write_scores(path: &Path, scores: &[Score]) -> Result<()> {
    write_rows(
        path,
        scores.iter().map(|s| ScoreRow {
            case_id: s.id.clone(),
            p: s.p,
            z: s.z,
        }),
    )
}

pub fn read_scores(path: &Path) -> Result<Vec<Score>> {
    Ok(read_rows::<ScoreRow>(path)?
        .into_iter()
        .map(|r| Score::new(r.case_id, r.p, r.z))
        .collect())
}

pub fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    write_rows(path, trace)
}

pub fn write_roc(path: &Path, roc: &[RocPoint]) -> Result<()> {
    write_rows(path, roc)
}

pub fn write_leaderboard(path: &Path, rows: &[LeaderRow]) -> Result<()> {
    write_rows(
        path,
        rows.iter().map(|r| LeaderCsvRow {
            rank: r.rank,
            name: r.name.clone(),
            alpha: r.alpha,
            beta: r.beta.map(|b| b.as_str().to_string()),
            sen: r.sen,
            spec: r.spec,
            f1: r.f1,
            auc: r.auc,
        }),
    )
}
