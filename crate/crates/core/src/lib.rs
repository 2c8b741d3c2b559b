//! Adaptive domain-randomization curriculum for a DQN highway driver.
//!
//! * [`env`] lane-based micro-simulator, observation and reward
//! * [`qnet`] 22-20-10-5 Q-network with hand-written backprop
//! * [`agent`] epsilon-greedy DQN with replay and a target network
//! * [`adr`] boundary-sampling generator with adaptive thresholds
//! * [`train`] the joint training loop, logs and snapshots
//! * [`eval`] cross-environment evaluation grid
//! * [`cli`] command-line front end

pub mod adr;
pub mod agent;
pub mod cli;
pub mod env;
pub mod error;
pub mod eval;
pub mod qnet;
pub mod train;

pub use error::{Error, Result};
