//! Allocation-only core of the scenequery engine.
//!
//! Everything here is pure computation over in-memory data: the relational
//! scene-graph tables and their tuple views, the region-graph query language,
//! the query executor, the small classifier used by distilled-model UDFs, and
//! the budgeted candidate-selection loop. IO, scripting, and model clients live
//! in the `scenequery` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dsl;
pub mod exec;
pub mod metrics;
pub mod mlp;
pub mod scene;
pub mod select;

pub use dsl::{Arity, Predicate, Query, RegionGraph, Variable};
pub use dsl::PredicateCatalog;
pub use exec::PredicateEvaluator;
pub use scene::{BBox, SceneTables, TupleView, UnitId};
