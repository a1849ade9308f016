//! A miniature two-stage weak-form compiler.
//!
//! Forms written in a small DSL are preprocessed ([`form`]), split into
//! restriction blocks for interior facets ([`facet_split`]), lowered to the
//! GEM tensor IR ([`lowering`], [`gem`]), scheduled into fused loop nests
//! ([`scheduler`]) and printed as C ([`emitter`]). The [`oracle`] module
//! holds reference interpreters used for differential testing.

pub mod bench;
pub mod error;
pub mod element;
pub mod emitter;
pub mod facet_split;
pub mod form;
pub mod gem;
pub mod lowering;
pub mod oracle;
pub mod pipeline;
pub mod scheduler;

pub use error::{Error, Result};
