//! Synthetic grid-world VQA data with gold rationales, plus ingestion of
//! VCR-format files.

mod audit;
mod dataset;
mod record;
mod scene;
mod vcr;
mod vocab;

pub use audit::{audit_generated, audit_record};
pub use dataset::{build_dataset, read_records, write_records, DatasetSplit, TRAIN_FILE, VAL_FILE, VOCAB_FILE};
pub use record::{
    make_record, parse_record_id, record_id, FeatureOrigin, Template, VqaRecord, COUNT_WORDS, NUM_OPTIONS,
};
pub use scene::{
    generate_scene, Action, Color, Scene, SceneObject, ShapeKind, FEATURE_DIM, GRID, MAX_OBJECTS, MIN_OBJECTS,
};
pub use vcr::{hashed_features, load_vcr_records, FeatureSource, MAX_REGIONS};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SEP, SPECIAL_TOKENS};

#[cfg(test)]
pub(crate) use record::toks;
