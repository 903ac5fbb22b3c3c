//! Configuration, optimization, checkpoints and the operations behind the
//! command-line tool.

mod adam;
mod checkpoint;
mod config;
mod ops;
mod synthetic;
mod train;

pub use adam::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use checkpoint::{adam_config, decode, encode, Checkpoint, DType, Entry, TrainState, MAGIC};
pub use config::{AuxUpdates, ExperimentConfig, Preset, TrainConfig, DEFAULT_CLIP_NORM};
pub use ops::{
    check_vocab, compare, decode_corpus, evaluate, export_variables, gradcheck_model, gradcheck_suite, random_batch,
    respond, tiny_config, DecodeOptions, EvalReport, ExampleOutput, GradcheckDims, RANDOM_VECTOR_DIM,
};
pub use synthetic::one_to_many_corpus;
pub use train::{training_gradients, EpochLog, StepResult, Trainer};
