//! seriesforge: construction and independent verification of rearrangements
//! of conditionally convergent series.
//!
//! The library builds greedy rearrangements toward arbitrary targets, a
//! constrained variant that is the identity off a prescribed index set while
//! its checkpoint partial sums track a target sequence within 1/n, natural
//! density tooling with a density-zero support construction, and a quotient
//! series layer over checkpoint structures. Every engine output can be
//! re-checked by a verifier that recomputes sums from scratch.

pub mod analysis;
pub mod classify;
pub mod cli;
pub mod error;
pub mod hyper;
pub mod index_set;
pub mod permutation;
pub mod rearrange;
pub mod run_record;
pub mod scalar;
pub mod series;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
pub use index_set::IndexSet;
pub use permutation::{compose, PermutationPrefix, PermutationView};
pub use rearrange::{
    constrained_rearrange, convergentize, rearrange_pcc, riemann_rearrange, EngineOptions,
    RearrangementResult, TargetSeq, TargetSpec,
};
pub use scalar::{Mode, Scalar};
pub use series::{partial_sums, restrict, sign_split, SeriesSource};
