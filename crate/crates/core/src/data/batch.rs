//! Filtering, splitting, encoding and batching of examples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::{AudioSource, Dataset, Example};
use crate::error::{Error, Result};
use crate::features::{audio_features, clean_and_tokenize, read_wav, MfccConfig, Vocab};
use crate::layers::PAD_ID;
use crate::sequence::SeqLayout;
use crate::tensor::Tensor;

pub const MIN_WORDS: usize = 3;
pub const MAX_WORDS: usize = 25;

pub fn word_count(text: &str) -> usize {
    clean_and_tokenize(text).len()
}

/// Keeps examples with `min ≤ words ≤ max`.
pub fn filter_by_length(examples: Vec<Example>, min: usize, max: usize) -> Vec<Example> {
    examples
        .into_iter()
        .filter(|e| (min..=max).contains(&word_count(&e.text)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthBucket {
    Short,
    Intermediate,
    Long,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [
        LengthBucket::Short,
        LengthBucket::Intermediate,
        LengthBucket::Long,
    ];

    pub fn of(words: usize) -> Self {
        match words {
            0..=4 => LengthBucket::Short,
            5..=20 => LengthBucket::Intermediate,
            _ => LengthBucket::Long,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::Short => "Short",
            LengthBucket::Intermediate => "Intermediate",
            LengthBucket::Long => "Long",
        }
    }
}

pub fn length_bucket(example: &Example) -> LengthBucket {
    LengthBucket::of(word_count(&example.text))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Stratified by label: each label group is shuffled with `seed` and cut by
/// the fractions (valid and test sizes rounded, train takes the rest), then
/// each split is shuffled again.
pub fn split_dataset(examples: &[Example], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for label in [0u8, 1] {
        let mut group: Vec<&Example> = examples.iter().filter(|e| e.label == label).collect();
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        let n_valid = (fractions[1] * n).round() as usize;
        let n_test = ((fractions[2] * n).round() as usize).min(group.len() - n_valid);
        let n_train = group.len() - n_valid - n_test;
        train.extend(group[..n_train].iter().map(|&e| e.clone()));
        valid.extend(group[n_train..n_train + n_valid].iter().map(|&e| e.clone()));
        test.extend(group[n_train + n_valid..].iter().map(|&e| e.clone()));
    }
    for (name, split) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if split.is_empty() {
            return Err(Error::Config(format!(
                "{name} split is empty for {} examples and fractions {fractions:?}",
                examples.len()
            )));
        }
    }
    train.shuffle(&mut rng);
    valid.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(DatasetSplit { train, valid, test })
}

/// An example reduced to model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub label: u8,
    pub words: usize,
    pub tokens: Vec<usize>,
    /// `[steps × feature_dim]`
    pub audio: Tensor<f64>,
    pub kind: Option<String>,
}

impl EncodedExample {
    pub fn bucket(&self) -> LengthBucket {
        LengthBucket::of(self.words)
    }
}

/// Tokenizes with `vocab` and computes chunked MFCCs for WAV-backed
/// examples. Inline features must have width `mfcc.feature_dim()`.
pub fn encode_examples(
    examples: &[Example],
    dataset_dir: &std::path::Path,
    vocab: &Vocab,
    mfcc: &MfccConfig,
) -> Result<Vec<EncodedExample>> {
    examples
        .par_iter()
        .map(|e| {
            let tokens = clean_and_tokenize(&e.text);
            let audio = match &e.audio {
                AudioSource::Wav(p) => audio_features(&read_wav(&dataset_dir.join(p))?, mfcc)?,
                AudioSource::Features(f) => {
                    if f[0].len() != mfcc.feature_dim() {
                        return Err(Error::Input(format!(
                            "example {}: feature width {} but the audio path produces {}",
                            e.id,
                            f[0].len(),
                            mfcc.feature_dim()
                        )));
                    }
                    Tensor::from_rows(f)?
                }
            };
            Ok(EncodedExample {
                id: e.id.clone(),
                label: e.label,
                words: tokens.len(),
                tokens: vocab.encode(&tokens),
                audio,
                kind: e.kind().map(str::to_owned),
            })
        })
        .collect()
}

pub fn encode_dataset(
    dataset: &Dataset,
    vocab: &Vocab,
    mfcc: &MfccConfig,
) -> Result<Vec<EncodedExample>> {
    encode_examples(&dataset.examples, &dataset.base_dir, vocab, mfcc)
}

/// Padded token ids, time-major (`t·n + i`), padding id 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub layout: SeqLayout,
}

/// Padded feature frames `[T·n × D]`, time-major, zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub frames: Tensor<f64>,
    pub layout: SeqLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub ids: Vec<String>,
    pub labels: Vec<f64>,
    pub words: Vec<usize>,
    pub text: Option<TokenBatch>,
    pub audio: Option<FeatureBatch>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds both modalities from encoded examples, in the given order.
    pub fn from_examples(examples: &[&EncodedExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let n = examples.len();
        let text_layout =
            SeqLayout::from_lengths(examples.iter().map(|e| e.tokens.len()).collect())?;
        let mut ids = vec![PAD_ID; text_layout.rows()];
        for (i, e) in examples.iter().enumerate() {
            for (t, &tok) in e.tokens.iter().enumerate() {
                ids[t * n + i] = tok;
            }
        }
        let dim = examples[0].audio.cols();
        if let Some(e) = examples.iter().find(|e| e.audio.cols() != dim) {
            return Err(Error::Input(format!(
                "example {} has feature width {}, batch has {dim}",
                e.id,
                e.audio.cols()
            )));
        }
        let audio_layout =
            SeqLayout::from_lengths(examples.iter().map(|e| e.audio.rows()).collect())?;
        let mut frames = vec![0.0; audio_layout.rows() * dim];
        for (i, e) in examples.iter().enumerate() {
            for t in 0..e.audio.rows() {
                let r = t * n + i;
                frames[r * dim..(r + 1) * dim].copy_from_slice(e.audio.row(t));
            }
        }
        Ok(SequenceBatch {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            labels: examples.iter().map(|e| e.label as f64).collect(),
            words: examples.iter().map(|e| e.words).collect(),
            text: Some(TokenBatch {
                ids,
                layout: text_layout,
            }),
            audio: Some(FeatureBatch {
                frames: Tensor::new(&[audio_layout.rows(), dim], frames)?,
                layout: audio_layout,
            }),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchingConfig {
    pub batch_size: usize,
    /// Shuffle seed; `None` keeps input order.
    pub shuffle_seed: Option<u64>,
    /// Group examples of similar audio length to limit padding.
    pub length_sorted: bool,
}

/// Window, in batches, inside which length sorting happens.
const SORT_WINDOW: usize = 16;

pub fn make_batches(
    examples: &[EncodedExample],
    config: &BatchingConfig,
) -> Result<Vec<SequenceBatch>> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<&EncodedExample> = examples.iter().collect();
    let mut rng = config.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    if let Some(r) = rng.as_mut() {
        order.shuffle(r);
    }
    if config.length_sorted {
        for window in order.chunks_mut(config.batch_size * SORT_WINDOW) {
            window.sort_by_key(|e| (e.audio.rows(), e.tokens.len()));
        }
    }
    let mut batches: Vec<SequenceBatch> = order
        .chunks(config.batch_size)
        .map(SequenceBatch::from_examples)
        .collect::<Result<_>>()?;
    if config.length_sorted {
        if let Some(r) = rng.as_mut() {
            batches.shuffle(r);
        }
    }
    Ok(batches)
}
