use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    dataset_hash, encode_examples, filter_by_length, load_dataset, split_dataset, EncodedExample,
    DEFAULT_FRACTIONS, MAX_WORDS, MIN_WORDS,
};
use crate::error::{Error, Result};
use crate::features::{build_vocab, MfccConfig, Vocab};

/// How a dataset directory becomes encoded train/valid/test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub fractions: [f64; 3],
    pub split_seed: u64,
    /// Tokens seen fewer times in the training split encode to UNK.
    pub min_count: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub mfcc: MfccConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            fractions: DEFAULT_FRACTIONS,
            split_seed: 0,
            min_count: 1,
            min_words: MIN_WORDS,
            max_words: MAX_WORDS,
            mfcc: MfccConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_words > self.max_words {
            return Err(Error::Config(format!(
                "min_words {} exceeds max_words {}",
                self.min_words, self.max_words
            )));
        }
        self.mfcc.validate()
    }
}

/// Encoded splits plus what downstream steps need to stay reproducible.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Content hash of the records file and every referenced WAV.
    pub dataset_hash: String,
    pub vocab: Vocab,
    pub audio_dim: usize,
    pub train: Vec<EncodedExample>,
    pub valid: Vec<EncodedExample>,
    pub test: Vec<EncodedExample>,
    /// Raw text of every kept example by id.
    pub texts: BTreeMap<String, String>,
}

/// Loads, length-filters and splits the dataset, builds the vocabulary from
/// the training split only and encodes all three splits.
pub fn prepare_data(dir: &Path, config: &DataConfig) -> Result<PreparedData> {
    config.validate()?;
    let dataset = load_dataset(dir)?;
    let hash = dataset_hash(&dataset)?;
    let total = dataset.examples.len();
    let kept = filter_by_length(dataset.examples.clone(), config.min_words, config.max_words);
    if kept.len() < total {
        log::info!(
            "dropped {} of {total} examples outside {}..={} words",
            total - kept.len(),
            config.min_words,
            config.max_words
        );
    }
    let split = split_dataset(&kept, config.fractions, config.split_seed)?;
    let vocab = build_vocab(split.train.iter().map(|e| e.text.as_str()), config.min_count);
    let encode = |examples| encode_examples(examples, &dataset.base_dir, &vocab, &config.mfcc);
    Ok(PreparedData {
        dataset_hash: hash,
        audio_dim: config.mfcc.feature_dim(),
        train: encode(&split.train)?,
        valid: encode(&split.valid)?,
        test: encode(&split.test)?,
        texts: kept.iter().map(|e| (e.id.clone(), e.text.clone())).collect(),
        vocab,
    })
}
