pub mod classify;
pub mod cuboid;
pub mod eval;
pub mod gaitnet;
pub mod grid;
pub mod nnet;
pub mod optflow;
pub mod pipeline;
pub mod synth;
pub mod videoio;
