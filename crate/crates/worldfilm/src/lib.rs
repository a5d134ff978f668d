//! worldfilm: a desk-scale latent world model for long palette-video
//! generation. A causal mixed-modality sequence model maintains a latent
//! world state, a conditional diffusion decoder films the state into short
//! clips, and predicted textual dynamics drive the state forward.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rollout;
pub mod seqmodel;
pub mod synthworld;
pub mod textenc;
pub mod tokenize;
pub mod train;
pub mod util;

pub use error::{Error, Result};
