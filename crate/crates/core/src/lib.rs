pub mod cli;
pub mod data;
pub mod distributions;
pub mod elbo;
pub mod mixture;
pub mod network;
pub mod tensor;
pub mod training;
