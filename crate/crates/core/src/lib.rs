//! Adversarial-optimization laboratory.
//!
//! A from-scratch dense classifier ([`net`]) with exact input gradients, four
//! perturbation sources for targeted attacks ([`losses`]), the generalized
//! iterative attack loop with its two step-size protocols ([`attack`]),
//! numerical checks of how the cross-entropy gradient decomposes across
//! prediction subspaces ([`theory`]), the 2-D concentric-circles experiment
//! ([`circles`]) and a genuine-vs-adversarial detector ([`detector`]).

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod circles;
pub mod detector;
pub mod error;
pub mod losses;
pub mod net;
pub mod stats;
pub mod theory;
pub mod vector;

pub use attack::{
    clip, compute_alpha, run_attack, sweep, AttackConfig, AttackTrajectory, IterationRecord,
    Schedule, StopRule, SweepReport, Termination,
};
pub use error::{Error, Result};
pub use losses::{classify_subspace, PerturbationSource, SourceKind, Subspace};
pub use net::{cross_entropy, finite_diff_grad, softmax, Mlp, Sample};
