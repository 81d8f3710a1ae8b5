//! Three-tier recurrent waveform generator conditioned on video features.

mod checkpoint;
mod config;
mod model;
mod sample;
mod state;
mod teacher;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ConditioningMode, GeneratorConfig};
pub use model::GeneratorModel;
pub use sample::{choose_code, row_seed, SampleOutput, SamplingMode};
pub use state::GenerationState;
pub use teacher::{TeacherForced, EVAL_CHUNK};
