//! Offline multi-agent meta reinforcement learning for UAV data collection.
//!
//! UAVs fly over a grid of IoT devices and pick, each step, a move and a
//! device to receive an uplink packet from. The cooperative objective trades
//! the devices' age of information against their transmit power. Policies
//! are learned offline from fixed datasets with conservative Q-learning,
//! either independently per UAV or with a value-decomposed joint Q, and
//! first-order MAML finds initial weights that adapt quickly to a new
//! trade-off.
//!
//! The learning stack is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pick `f64`.

pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod losses;
pub mod meta;
pub mod policies;
pub mod qnet;
pub mod rng;
pub mod scalar;
pub mod trainers;

pub use env::{AgentAction, Cell, Direction, Env, EnvConfig, EnvState, StepOutcome, TaskSpec};
pub use error::{Error, Result};
pub use losses::Objective;
pub use scalar::Scalar;

/// Q-network parameters in double precision.
pub type QNet = qnet::NetParams<f64>;
/// Q-network parameters in single precision.
pub type QNet32 = qnet::NetParams<f32>;
/// Minibatch in double precision.
pub type Minibatch = losses::Minibatch<f64>;
/// Adam state in double precision.
pub type AdamState = qnet::AdamState<f64>;
