pub mod data;
pub mod eval;
pub mod experiment;
pub mod lm;
pub mod train;
pub mod tensor;
