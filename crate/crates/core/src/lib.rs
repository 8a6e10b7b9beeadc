//! Certified robustness bounds for small Transformer text classifiers.
//!
//! Linear bounds are propagated backward through position-wise sub-layers
//! and forward through self-attention, then concretized over an ℓp ball
//! around selected word embeddings. Interval bound propagation and
//! fully-forward / fully-backward variants are provided for comparison.

pub mod backward;
pub mod bounds;
pub mod engine;
pub mod error;
pub mod forward;
pub mod io;
pub mod model;
pub mod planted;
pub mod program;
pub mod relax;
pub mod verifier;

pub use bounds::{concretize, IntervalBounds, LinearBounds, Norm, PerturbationSpec, RefFrame};
pub use engine::{bound_program, BoundOptions, BoundRun, Counters, Method};
pub use error::{Error, Result};
pub use model::{LayerNormMode, TransformerModel};
pub use program::SublayerProgram;
pub use verifier::{
    certify_epsilon, delta_lower, enumerate_position_sets, importance_ranking, run_ablation,
    upper_bound_substitution, Certificate, ImportanceRanking, Instance, SearchConfig,
};
