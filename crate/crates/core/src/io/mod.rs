//! Checkpoints, JSONL datasets, splits and streaming corpus ingestion.

mod checkpoint;
mod corpus;
mod dataset;

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, FORMAT_VERSION};
pub use corpus::{stream_corpus, CorpusStream};
pub use dataset::{read_jsonl, split, write_jsonl, DatasetRecord};
