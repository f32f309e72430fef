pub mod atlanta;
pub mod dataset;
pub mod estimator;
pub mod eval;
pub mod filter;
pub mod geom;
pub mod pipeline;
pub mod sim;
pub mod tracker;
