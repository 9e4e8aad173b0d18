#![no_std]
extern crate alloc;

pub mod adam;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod oracle;
pub mod schedule;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod world;

pub use adam::AdamState;
pub use autodiff::{Gradients, Tape, Var};
pub use backbone::{BackboneConfig, ConditionBundle, DenoiserModel, X0Predictor};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalSet, MetricsReport, OperatingPoint};
pub use guidance::{GuidanceMode, GuidanceSpec, PseudoSpeakerPool};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use tensor::Tensor;
pub use training::{DropPattern, DropSchedule, LossRecord, TrainConfig, Trainer};
pub use world::{ToyUtterance, World, WorldConfig};
