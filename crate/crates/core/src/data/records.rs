//! Line-delimited dataset records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.jsonl";

/// Where an example's audio comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum AudioSource {
    /// Path relative to the records file.
    Wav(PathBuf),
    /// Precomputed chunked features, `[T × 52]`.
    Features(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: u8,
    pub audio: AudioSource,
    pub meta: BTreeMap<String, Value>,
}

impl Example {
    /// Template family recorded under `meta.type`.
    pub fn kind(&self) -> Option<&str> {
        self.meta.get("type").and_then(Value::as_str)
    }

    pub fn is_question(&self) -> bool {
        self.label == 1
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: Option<String>,
    text: Option<String>,
    label: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wav: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<BTreeMap<String, Value>>,
}

fn schema(line: usize, detail: impl Into<String>) -> Error {
    Error::Schema {
        line,
        detail: detail.into(),
    }
}

fn from_record(r: Record, line: usize) -> Result<Example> {
    let id = r.id.ok_or_else(|| schema(line, "missing \"id\""))?;
    let text = r.text.ok_or_else(|| schema(line, "missing \"text\""))?;
    let label = match r.label {
        None => return Err(schema(line, "missing \"label\"")),
        Some(v) => match v.as_u64() {
            Some(l @ (0 | 1)) => l as u8,
            _ => return Err(schema(line, format!("label must be 0 or 1, got {v}"))),
        },
    };
    let audio = match (r.wav, r.features) {
        (Some(w), None) => AudioSource::Wav(PathBuf::from(w)),
        (None, Some(f)) => {
            let width = f.first().map(Vec::len).unwrap_or(0);
            if width == 0 || f.iter().any(|row| row.len() != width) {
                return Err(schema(
                    line,
                    "features must be a non-empty rectangular matrix",
                ));
            }
            AudioSource::Features(f)
        }
        _ => {
            return Err(schema(
                line,
                "exactly one of \"wav\" or \"features\" is required",
            ))
        }
    };
    Ok(Example {
        id,
        text,
        label,
        audio,
        meta: r.meta.unwrap_or_default(),
    })
}

fn to_record(e: &Example) -> Record {
    let (wav, features) = match &e.audio {
        AudioSource::Wav(p) => (Some(p.to_string_lossy().replace('\\', "/")), None),
        AudioSource::Features(f) => (None, Some(f.clone())),
    };
    Record {
        id: Some(e.id.clone()),
        text: Some(e.text.clone()),
        label: Some(Value::from(e.label)),
        wav,
        features,
        meta: (!e.meta.is_empty()).then(|| e.meta.clone()),
    }
}

pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        out.push(from_record(record, line_no)?);
    }
    Ok(out)
}

pub fn format_records(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(&to_record(e))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<Example>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(f))
}

pub fn write_records(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_records(examples)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Examples plus the directory their relative WAV paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub base_dir: PathBuf,
    pub examples: Vec<Example>,
}

/// Accepts a dataset directory (containing `records.jsonl`) or a records
/// file.
pub fn records_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(RECORDS_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = records_path(path);
    let examples = load_records(&file)?;
    let base_dir = file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Dataset { base_dir, examples })
}

/// SHA-256 over the records file and every referenced WAV, in record order.
pub fn dataset_hash(dataset: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(format_records(&dataset.examples)?.as_bytes());
    for e in &dataset.examples {
        if let AudioSource::Wav(p) = &e.audio {
            let full = dataset.base_dir.join(p);
            h.update(fs::read(&full).map_err(|err| Error::io(&full, err))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
