//! Distributionally robust multi-agent Q-learning for chute allocation on a
//! sortation floor, with tabular tools for the underlying robust operators.

pub mod bandit;
pub mod budget;
pub mod env;
pub mod error;
pub mod harness;
pub mod induction;
pub mod schedule;
pub mod seed;
pub mod sim;
pub mod tabular;
pub mod trainer;
pub mod valuenet;
pub mod verify;

pub use error::{Error, Result};
