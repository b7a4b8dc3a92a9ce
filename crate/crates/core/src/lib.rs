//! Embedding-space training for domain-adaptive zero-shot learning.
//!
//! Frozen encoder features are mapped through an attention adapter, class
//! prototypes come from a graph convolution over a class relation graph,
//! and both are trained with a source (labeled) phase and a target
//! (unlabeled) phase. Classification is nearest prototype by cosine
//! similarity over seen and unseen classes alike.

pub mod adapter;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod pca;
pub mod prototype;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{evaluate, h_score, zero_shot_baseline, EvalReport};
pub use io::{Benchmark, ClassGraph, DatasetBundle, EmbeddingMatrix, TrainingData};
pub use model::{Model, ModelMode, ModelParams};
pub use synth::{synth_generate, SynthSpec};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{train, TrainState, Trainer};
