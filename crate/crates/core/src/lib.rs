pub mod graph;
pub mod engine;
pub mod kernels;
pub mod subspace;
pub mod table;
pub mod training;
pub mod layouts;
pub mod io;
pub mod signal;
pub mod synth;
pub mod commands;
