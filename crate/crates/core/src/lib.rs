//! Meta-cognition probes for adaptive tool use.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`store`]: read contrastive activation dumps (MACT1 containers) and
//!    pair the Experimental and Reference arms of each `(query, prefix, layer)`.
//! 2. [`probe`]: per layer, take the first principal component of the signed
//!    arm differences as the concept direction and measure held-out pair
//!    accuracy.
//! 3. [`decision`]: project the first response token onto one probe and
//!    decide with the dual-threshold policy, or with the Naive and Yes-score
//!    baselines.
//! 4. [`eval`]: score the decisions against benchmark files and emit reports.
//!
//! [`synth`] produces synthetic data with known answers for every stage.

pub mod decision;
pub mod eval;
pub mod io;
pub mod probe;
pub mod rng;
pub mod store;
pub mod synth;

pub use decision::{
    Answer, Decision, DecisionError, DecisionPolicy, DualThresholds, FirstToken, LayerWindow,
    PolicyKind, ScoredItem, TokenMode,
};
pub use eval::{BenchmarkItem, EvalError, EvalReport, Grouping, Suite};
pub use probe::{Probe, ProbeError, ProbeSet, ProbeTraining};
pub use store::{ActivationRecord, ContainerHeader, ContrastivePair, Role, StoreError, Variant};
pub use synth::{MixtureSpec, PlantedSpec, SynthError};
