//! Context-aware neuron attribution, reweighting and evaluation for small
//! decoder-only transformers.

pub mod attribution;
pub mod data;
pub mod editing;
pub mod error;
pub mod harness;
pub mod model;
pub mod parity;
pub mod selection;

pub use error::{CoreError, Result};

/// Chapters of the guide in `book/`, compiled and run as doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/attribution.md")]
    pub mod attribution {}
    #[doc = include_str!("../../../book/src/selection.md")]
    pub mod selection {}
    #[doc = include_str!("../../../book/src/editing.md")]
    pub mod editing {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/search.md")]
    pub mod search {}
    #[doc = include_str!("../../../book/src/parity.md")]
    pub mod parity {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
