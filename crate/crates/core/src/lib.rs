//! Two-stage frame semantic parsing: a domain-agnostic tagger proposes typed
//! spans, then a per-domain classification head scores the frame templates
//! those spans can fill.

pub mod assignment;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod head;
pub mod matcher;
pub mod ontology;
pub mod registry;
pub mod tagger;
pub mod toy;
