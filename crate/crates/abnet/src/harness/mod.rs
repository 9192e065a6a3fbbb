//! Experiment harness: synthetic datasets, config files, checkpoints,
//! and canned end-to-end pipelines.

mod checkpoint;
mod dataset;
mod pipeline;
mod spec;

pub use checkpoint::{load_checkpoint, load_model_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use dataset::{gen_synthetic, read_tsv, symbol, write_tsv, Lexicon, SyntheticData};
pub use pipeline::{
    decode_and_eval, encode_pairs, prepare, run_pipeline, run_sweep, EncodedData, PipelineArtifacts,
    PreparedData, SweepRow,
};
pub use spec::{ExperimentSpec, Placement, Task};
