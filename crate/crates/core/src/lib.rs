pub mod cli;
pub mod engine;
pub mod error;
pub mod interconnect;
pub mod layout;
pub mod perfmodel;
pub mod rip;
pub mod tensor;
pub mod view;
pub mod workloads;

pub use error::{MeritError, Result};
