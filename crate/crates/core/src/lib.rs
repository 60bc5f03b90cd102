//! Graphical referential game: two agents agree on a drawn lexicon by
//! contrastively learning an energy between referents and utterances, and
//! producing utterances by gradient descent through a differentiable
//! sketching motor system.

pub mod agents;
pub mod error;
pub mod experiment;
pub mod export;
pub mod game;
pub mod metrics;
pub mod referents;
pub mod sensorimotor;
pub mod strategies;

pub use error::{Error, Result};
