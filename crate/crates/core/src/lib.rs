//! Masked-language-model pre-training with length-adaptive confidence
//! regularization, plus the calibration tooling used to evaluate it.

pub mod calibration;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod gradcheck;
pub mod losses;
pub mod real;
pub mod rng;
pub mod trainer;
