//! Post-hoc out-of-distribution detection from gradients of a nearest-class
//! prototype classifier with an extra OOD prototype.
//!
//! A detector is fitted from exported embeddings: class prototypes are the
//! per-class means of penultimate training features, the OOD prototype is the
//! mean of a set of OOD-like features, and every training sample is mapped to
//! the gradient of the classification loss with respect to the OOD
//! prototype. A new sample is scored by the distance from its gradient to the
//! nearest training gradient.

pub mod bundle;
pub mod error;
pub mod eval;
pub mod feature_io;
pub mod index;
pub mod matrix;
pub mod ncp;
pub mod pipeline;
pub mod prototype;
pub mod quantile;
pub mod synth;

pub use bundle::SavedDetector;
pub use error::{GroodError, Result};
pub use eval::{auroc, fpr_at_tpr, EvalResult};
pub use feature_io::{FeatureSet, Layer, Manifest, Role};
pub use index::{GradientIndex, IndexMode};
pub use matrix::Matrix;
pub use ncp::NcpModel;
pub use pipeline::{Dataset, Detector, RunConfig, ScoreVariant};
pub use prototype::Strategy;
