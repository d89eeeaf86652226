//! Pure core of an asynchronous, incremental proof-script kernel.
//!
//! Documents are parsed into spans, turned into a DAG of environment states
//! (the spine) and independent proof checks (the leaves), and re-scheduled
//! incrementally after edits. Nothing here performs IO; the runtime that
//! ships snapshots to workers lives in the `proofkernel` crate.

#![no_std]

extern crate alloc;

pub mod dag;
pub mod document;
pub mod hash;
pub mod promise;
pub mod script;
pub mod snapshot;

pub use hash::Hash256;
