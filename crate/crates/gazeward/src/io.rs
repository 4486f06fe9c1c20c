//! JSONL datasets, pseudo-label files and small JSON helpers.
//!
//! One object per line: `{"id", "features", "yaw"?, "pitch"?, "source"}`.
//! Both angles present means labeled, both absent unlabeled; anything else
//! is rejected.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gazeward_core::data::{Dataset, PseudoLabelSet, Sample};
use gazeward_core::geometry::SphericalGaze;
use gazeward_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const LABELED_FILE: &str = "labeled.jsonl";
pub const UNLABELED_FILE: &str = "unlabeled.jsonl";
pub const ORACLE_SUFFIX: &str = ".oracle.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    features: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    yaw: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pitch: Option<f32>,
    source: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    id: String,
    yaw: f32,
    pitch: f32,
}

/// `dir/unlabeled.jsonl` → `dir/unlabeled.oracle.jsonl`.
pub fn oracle_path(path: &Path) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(".jsonl").unwrap_or(name);
    path.with_file_name(format!("{stem}{ORACLE_SUFFIX}"))
}

fn dataset_name(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("dataset");
    name.strip_suffix(".jsonl").unwrap_or(name).to_string()
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> AppResult<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AppError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| AppError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| AppError::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| AppError::io(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn load_jsonl(path: &Path) -> AppResult<Dataset> {
    let mut samples = Vec::new();
    for (line, r) in read_lines::<Record>(path)? {
        let label = match (r.yaw, r.pitch) {
            (Some(yaw), Some(pitch)) => Some(SphericalGaze::new(yaw, pitch)),
            (None, None) => None,
            _ => {
                return Err(AppError::Core(CoreError::Validation(format!(
                    "{}:{line}: sample {} has only one of yaw/pitch",
                    path.display(),
                    r.id
                ))))
            }
        };
        samples.push(Sample {
            id: r.id,
            features: r.features,
            label,
            source: r.source,
        });
    }
    Dataset::new(dataset_name(path), samples).map_err(|e| match e {
        CoreError::Validation(m) => AppError::Core(CoreError::Validation(format!("{}: {m}", path.display()))),
        other => other.into(),
    })
}

pub fn save_jsonl(ds: &Dataset, path: &Path) -> AppResult<()> {
    write_lines(
        path,
        ds.samples().iter().map(|s| Record {
            id: s.id.clone(),
            features: s.features.clone(),
            yaw: s.label.map(|g| g.yaw),
            pitch: s.label.map(|g| g.pitch),
            source: s.source.clone(),
        }),
    )
}

/// `{id, yaw, pitch}` per line.
pub fn save_labels(labels: &PseudoLabelSet, path: &Path) -> AppResult<()> {
    write_lines(
        path,
        labels.iter().map(|(id, g)| LabelRecord {
            id: id.to_string(),
            yaw: g.yaw,
            pitch: g.pitch,
        }),
    )
}

pub fn load_labels(path: &Path) -> AppResult<PseudoLabelSet> {
    let recs = read_lines::<LabelRecord>(path)?;
    let (ids, labels) = recs
        .into_iter()
        .map(|(_, r)| (r.id, SphericalGaze::new(r.yaw, r.pitch)))
        .unzip();
    Ok(PseudoLabelSet::new(ids, labels, 0)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline; field order follows the type.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::format(path, e.to_string()))?;
    text.push('\n');
    write_text(&text, path)
}

pub fn write_text(text: &str, path: &Path) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}
