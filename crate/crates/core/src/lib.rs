//! Simulation laboratory for cooperative multi-task semantic communication
//! over rate-limited AWGN channels.

pub mod cu;
pub mod dre;
pub mod error;
pub mod harness;
pub mod nnet;
pub mod semsource;
pub mod stochastic;
pub mod su;

pub use error::{Error, Result};
