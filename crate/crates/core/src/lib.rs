//! A desk-scale toolkit for GPU memory persistency.
//!
//! The crate bundles a miniature SIMT kernel language, compiler passes that
//! implement pragma-driven persistency models (strict, kernel/CTA/loop-level
//! epochs) and durable transactions with undo logging, a deterministic
//! memory-hierarchy simulator with persistent-memory semantics, and a
//! crash-injection harness that proves recoverability by exhaustive
//! crash-point testing against a failure-free oracle.

pub mod corpus;
pub mod driver;
pub mod exec;
pub mod harness;
pub mod lang;
pub mod memsim;
pub mod passes;
pub mod refexec;
