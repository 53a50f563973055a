//! Vocabularies, corpora, visual features, batching and the synthetic task.

mod batch;
mod corpus;
mod features;
pub mod synthetic;
mod vocab;

pub use batch::{make_batches, Batch, PaddedSequences, DEFAULT_BATCH_SIZE};
pub use corpus::{
    format_manifest, parse_manifest, split_paths, Dataset, InstanceKind, ManifestEntry, RawSplit, TrainingInstance,
};
pub use features::{
    decode_features, decode_header, encode_features, load_visual_features, write_features, FeatureHeader, FeatureSet,
    VisualFeatureGrid, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synthetic::{generate_synthetic_task, SyntheticConfig, SyntheticTask};
pub use vocab::{LengthPolicy, TokenSequence, Vocabulary, BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS, UNK_ID};

/// Default maximum sentence length in words.
pub const DEFAULT_MAX_LEN: usize = 100;
