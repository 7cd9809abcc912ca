use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Label};

/// One manifest line: `{"path": ..., "label": 0|1, "keyword_id": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }
}

/// Parses a JSON-lines manifest. Relative paths are resolved against the
/// manifest's directory and every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DataError::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let mut rec: ManifestRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.path.is_relative() {
            rec.path = base.join(&rec.path);
        }
        if !rec.path.is_file() {
            return Err(err(format!("audio file {} does not exist", rec.path.display())));
        }
        records.push(rec);
    }
    Ok(Manifest { records })
}

/// Writes records one per line, paths as given.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        writeln!(f, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct MobvoiEntry {
    utt_id: String,
    keyword_id: i64,
}

/// Builds a manifest from the Mobvoi hotword layout:
/// `<root>/mobvoi_hotword_dataset/<utt_id>.wav` plus label lists
/// `<root>/mobvoi_hotword_dataset_resources/{p,n}_<split>.json`.
/// Utterances of `keyword_id` are positive; the other keyword and the
/// non-keyword set are negative.
pub fn load_mobvoi(root: &Path, split: &str, keyword_id: i64) -> Result<Manifest, DataError> {
    let resources = root.join("mobvoi_hotword_dataset_resources");
    let audio = root.join("mobvoi_hotword_dataset");
    let mut records = Vec::new();
    for prefix in ["p", "n"] {
        let list = resources.join(format!("{prefix}_{split}.json"));
        let text = fs::read_to_string(&list).map_err(|e| DataError::io(&list, e))?;
        let entries: Vec<MobvoiEntry> = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: list.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        for e in entries {
            let label = if e.keyword_id == keyword_id {
                Label::Positive
            } else {
                Label::Negative
            };
            records.push(ManifestRecord {
                path: audio.join(format!("{}.wav", e.utt_id)),
                label,
                keyword_id: (e.keyword_id >= 0).then(|| e.keyword_id.to_string()),
            });
        }
    }
    Ok(Manifest { records })
}
