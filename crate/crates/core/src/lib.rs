pub mod depgraph;
pub mod deployapi;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod pirma;
pub mod sefa;
pub mod simrt;
pub mod suite;
