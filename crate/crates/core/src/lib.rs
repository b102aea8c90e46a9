//! Multi-agent DDPG with a learned linear safety layer on a particle world.

pub mod env;
pub mod error;
pub mod harness;
pub mod maddpg;
pub mod nn;
pub mod qp;
pub mod safety;

pub use error::{Error, Result};
