pub mod bench;
pub mod codec;
pub mod eval;
pub mod infer;
pub mod model;
pub mod optimizers;
pub mod pipeline;
pub mod runner;
pub mod space;
pub mod stats;
pub mod tok;
