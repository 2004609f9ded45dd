pub mod numerics;
pub mod sequence;
pub mod mape;
pub mod mask;
pub mod encoders;
pub mod backbone;
pub mod heads;
pub mod schedule;
pub mod synth;
pub mod prepare;
pub mod trainer;
pub mod inference;
pub mod eval;
pub mod cli;
