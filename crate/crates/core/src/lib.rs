pub mod attention;
pub mod autograd;
pub mod binary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod neuron;
pub mod optim;
pub mod params;
pub mod profiler;
pub mod tensor;
pub mod train;
