//! On-disk formats and data generation: the HVC1 image corpus, the HVCK
//! checkpoint format, synthetic corpora, JSONL training metrics, and the
//! small augmentation used for supervised fine-tuning.

pub mod augment;
pub mod checkpoint;
pub mod corpus;
pub mod metrics;
pub mod synth;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use corpus::{Corpus, CorpusError, CorpusHeader, CorpusWriter};
pub use metrics::{MetricRow, MetricsWriter};
pub use synth::SynthKind;
