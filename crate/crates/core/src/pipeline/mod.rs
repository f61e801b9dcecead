//! Training, post-training calibration, fake-quant fine-tuning, evaluation
//! and cost metrics.

mod config;
mod eval;
mod metrics;
pub mod optim;
mod quantize;
mod train;

pub use config::{ObserverName, OptimizerKind, QuantConfig, TrainConfig, TrainMode, FULL_PRECISION};
pub use eval::{argmax, evaluate, predictions, profile_activations, ActivationProfile};
pub use metrics::{bops, bops_reported, model_size_mb, model_size_reported, MetricRow};
pub use quantize::{calibrate_ptq, insert_fake_quant, EdgeQuant, Phase, QuantState, QuantizedModel};
pub use train::{train, TrainLog};
