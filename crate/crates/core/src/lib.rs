//! Continual object detection with a memory-augmented deformable detector.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`params`], [`optim`]: a small f64 tensor engine
//!   with reverse-mode differentiation, named parameters and Adam.
//! * [`memory`]: the shared pool of memory units with key-based retrieval
//!   and per-task chunk freezing.
//! * [`localizer`]: the proposal-ranking head and localized query.
//! * [`detector`]: encoder, deformable decoder with memory prefix injection,
//!   class and box heads.
//! * [`matching`] and [`loss`]: Hungarian set matching and detection losses.
//! * [`trainer`]: the class-incremental training loop with logit masking,
//!   past-class gradient masking and background thresholding.
//! * [`metrics`]: IoU, average precision and the continual mAP splits.
//! * [`synth`]: deterministic synthetic class-incremental streams.

pub mod boxes;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod localizer;
pub mod loss;
pub mod matching;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use boxes::{Annotation, BBox};
pub use detector::{Detector, DetectorConfig, Prediction};

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use memory::{MemoryPool, MemoryReadout};
pub use metrics::{ContinualMap, EvalReport, TaskReport};
pub use params::{ParamId, ParamStore};
pub use synth::{StreamSpec, TaskStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{apply_gradient_mask, GradientMask, Tensor};
pub use trainer::{Components, EpochLog, Model, RunOptions, TrainConfig};
