//! Preference-aware adversarial tag recommendation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! joint network of visual encoder, user-preference autoencoder, personalized
//! classifier, generator and discriminator ([`model`]), its losses, Adadelta
//! training with alternating discriminator updates ([`trainer`]), corpus and
//! checkpoint IO ([`data`]), and ranking metrics ([`metrics`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
