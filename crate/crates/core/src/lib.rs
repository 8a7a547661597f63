//! Continuous-time dynamics of interacting objects with latent Gaussian-process ODEs.
//!
//! The drift of every object is split into an independent kinematics term and
//! a sum of pairwise interaction messages, each given a sparse GP prior.
//! Inference is variational: amortized encoders for initial states and static
//! per-object latents, and function samples drawn pathwise (random Fourier
//! prior plus an inducing-point correction) that are integrated with RK4.

pub mod diffmath;
pub mod dynamics;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gp;
pub mod inference;
pub mod nn;
pub mod odeint;
pub mod simdata;

pub use diffmath::{ParamId, ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
