pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub mod unet;
pub use unet::{build_unet, Model, UNetConfig};
pub mod losses;
pub use losses::{ConfusionCounts, LossKind, LossSpec};
pub mod pnm;
pub mod rng;
pub mod synth;
pub use synth::{Axis, CropSpec, GenParams, Laterality, SegSample};
pub mod eval;
pub use eval::{EvalOptions, EvalSummary, PrCurve};
pub mod optim;
pub use optim::{train, TrainConfig, TrainOutcome};
pub mod checkpoint;
pub mod config;
pub mod experiment;
pub use config::ExperimentConfig;
pub use experiment::{run_ablation, ExperimentReport};
