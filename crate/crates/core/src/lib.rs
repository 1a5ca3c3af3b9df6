//! Out-of-vocabulary embeddings for recommender systems.
//!
//! The crate covers the full pipeline needed to compare OOV embedders:
//! dataset ingestion ([`corpus`]), time-based inductive splitting
//! ([`splitter`]), hashing primitives ([`hashing`]), the embedders themselves
//! ([`embedders`]), base recommendation models ([`models`]), two-phase
//! training ([`trainer`]) and filtered evaluation ([`eval`]).

pub mod corpus;
pub mod embedders;
pub mod eval;
pub mod error;
pub mod hashing;
pub mod models;
pub mod rng;
pub mod splitter;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
