//! Versioned binary model archive.
//!
//! Layout: magic `QDMODEL\0`, format version (u32 LE), header length (u64
//! LE), JSON header, then every tensor named in the header as f64 LE values,
//! followed by each batch-norm layer's running mean and variance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::detector::QuestionDetector;
use crate::error::{Error, Result};
use crate::features::Vocab;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QDMODEL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    name: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Option<Vec<String>>,
    params: Vec<TensorEntry>,
    batch_norm: Vec<BnEntry>,
}

impl<T: Scalar> QuestionDetector<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.as_ref().map(|v| v.words().to_vec()),
            params: self
                .store
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            batch_norm: self
                .bn_layers()
                .into_iter()
                .map(|(name, l)| BnEntry { name, dim: l.dim })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |vals: &[T]| {
            for v in vals {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        };
        for (_, p) in self.store.iter() {
            push(p.value.data());
        }
        for (_, l) in self.bn_layers() {
            push(&l.running_mean);
            push(&l.running_var);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Load("not a model archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "archive format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
        let header: Header = serde_json::from_slice(r.take(len as usize, "header")?)
            .map_err(|e| Error::Load(format!("bad header: {e}")))?;

        let mut model = QuestionDetector::<T>::build(header.config)?;
        if let Some(words) = header.vocab {
            model = model.with_vocab(Vocab::from_tokens(words)?)?;
        }
        if header.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "archive lists {} parameters, its configuration builds {}",
                header.params.len(),
                model.store.len()
            )));
        }
        for entry in &header.params {
            let id = model.store.id_of(&entry.name).ok_or_else(|| {
                Error::Config(format!("archive parameter {} not in the model", entry.name))
            })?;
            let expected = model.store.value(id).shape().to_vec();
            if expected != entry.shape {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?} in the archive but {:?} under its configuration",
                    entry.name, entry.shape, expected
                )));
            }
            let n: usize = entry.shape.iter().product();
            let data = r.f64s(n, &entry.name)?;
            *model.store.value_mut(id) = Tensor::from_f64(&entry.shape, &data)?;
        }
        let mut layers = model.bn_layers_mut();
        if header.batch_norm.len() != layers.len() {
            return Err(Error::Config(
                "archive batch-norm layers do not match the configuration".into(),
            ));
        }
        for (entry, (name, layer)) in header.batch_norm.iter().zip(layers.iter_mut()) {
            if entry.name != *name || entry.dim != layer.dim {
                return Err(Error::Config(format!(
                    "batch-norm layer {} does not match {name}",
                    entry.name
                )));
            }
            layer.running_mean = r
                .f64s(entry.dim, &entry.name)?
                .into_iter()
                .map(T::of)
                .collect();
            layer.running_var = r
                .f64s(entry.dim, &entry.name)?
                .into_iter()
                .map(T::of)
                .collect();
        }
        if r.pos != bytes.len() {
            return Err(Error::Load(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Load(format!(
                "archive truncated while reading {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
