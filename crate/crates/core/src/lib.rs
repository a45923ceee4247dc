//! Preference-based reward learning on a gridworld with two hindsight
//! priors imposed as KL soft constraints: attention weights of a
//! forward-prediction model, and signed input-gradient importances of a
//! pairwise preference classifier. Both priors can be computed over raw
//! observations or over a boolean symbol abstraction of the grid.

pub mod autodiff;
pub mod checkpoint;
pub mod evaluation;
mod error;
pub mod gridworld;
pub mod proxy;
pub mod qlearning;
pub mod reconstruction;
pub mod reward_model;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
