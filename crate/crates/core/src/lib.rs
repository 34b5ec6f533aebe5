//! Few-shot classification by continuous-time prototype optimization.
//!
//! Prototypes start as support-set means and are then carried along a
//! learned gradient flow by a fixed-step ODE solver before cosine
//! classification. The crate provides the tensor/autodiff substrate
//! ([`nd`]), episode sampling ([`episodes`]), the cosine classifier and
//! closed-form flows ([`protoclass`]), the learned flow networks
//! ([`gradflow`]), integrators ([`solvers`]) and episodic meta-training
//! with diagnostics ([`metatrain`]).

pub mod episodes;
pub mod error;
pub mod gradflow;
pub mod metatrain;
pub mod nd;
pub mod protoclass;
pub mod solvers;

pub use error::{Error, Result};
