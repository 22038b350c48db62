pub mod ablation;
pub mod ctc;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod s2s;
pub mod ssl;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
