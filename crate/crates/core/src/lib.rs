pub mod bridge;
pub mod debias;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod textlm;
pub mod trainer;
