pub mod dataset;
pub mod experiment;
pub mod train;
