//! Dataset records, splits, batching and the synthetic corpus.

mod batch;
mod records;
mod synth;

pub use batch::{
    encode_dataset, encode_examples, filter_by_length, length_bucket, make_batches, split_dataset,
    word_count, BatchingConfig, DatasetSplit, EncodedExample, FeatureBatch, LengthBucket,
    SequenceBatch, TokenBatch, DEFAULT_FRACTIONS, MAX_WORDS, MIN_WORDS,
};
pub use records::{
    dataset_hash, format_records, load_dataset, load_records, parse_records, records_path,
    write_records, AudioSource, Dataset, Example, RECORDS_FILE,
};
pub use synth::{
    generate_synthetic, Proportions, QuestionType, SynthConfig, SyntheticCorpus, WAV_DIR,
};
