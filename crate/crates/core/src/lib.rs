pub mod harness;
pub mod model;
pub mod preprocess;
pub mod siamese;
pub mod synth;
pub mod tensor;
