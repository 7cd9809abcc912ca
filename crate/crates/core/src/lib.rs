//! Two-stage wake word detection: a local classifier scores sliding
//! windows of a log-mel stream and a global classifier confirms runs of
//! local hits. Both classifiers are small residual CNNs (ResNet, Res2Net,
//! SE-Res2Net) trained on CPU through a minimal autodiff tensor library.

pub mod augment;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod stream;
pub mod tensor;
pub mod trainer;
