//! Adversarial-robustness toolkit: noise-augmented FGSM training, a learnable
//! pixelwise noise-injection input layer, the usual attack suite (FGSM,
//! R+FGSM, RFGSM, NFGSM, PGD, SPSA, all EOT-aware) and the evaluation
//! protocol (effective robustness, 5x2 cross-validation, corrected resampled
//! t-test).

pub mod attacks;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
