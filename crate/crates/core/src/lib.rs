//! Named-entity correction for ASR N-best lists: phonetic retrieval over a
//! gazetteer, a multiple-choice selection gate and generative correction.

pub mod corpus;
pub mod correction;
pub mod denoising;
pub mod error;
pub mod filtering;
pub mod llm;
pub mod metrics;
pub mod ne_index;
pub mod phonetics;
pub mod sync;
pub mod tagging;

pub use error::{BackendError, Error, Result};
