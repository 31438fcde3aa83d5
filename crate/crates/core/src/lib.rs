//! Stability analysis for a discrete-time queue served by two Markov-modulated
//! servers when the controller only partially observes the server environments.
//!
//! The crate is organised around the information regimes a controller may have:
//!
//! - [`model`]: system parameters, closed-form bounds for full and no information.
//! - [`belief`]: Bayesian belief operators and per-scheme filters.
//! - [`oracle`]: brute-force path enumeration used to cross-check the filters.
//! - [`policy`]: myopic rule, switching curves and finite-state controllers.
//! - [`simulate`]: Monte Carlo event loop in queueing or saturated mode.
//! - [`mdp`]: average-reward relative value iteration on the belief square.
//! - [`qbd`]: quasi-birth-and-death blocks and the matrix-analytic stability bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod cli;
pub mod error;
pub mod mdp;
pub mod model;
pub mod oracle;
pub mod output;
pub mod policy;
pub mod qbd;
pub mod simulate;

pub use belief::{BeliefPair, Observation, ObservationScheme, Payload};
pub use error::{Error, Result};
pub use model::{ChannelChain, EnvState, ServerId, ServerParams, SystemConfig};
