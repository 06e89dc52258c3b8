//! MESA workbench: meta-exploration for cooperative multi-agent RL at desk
//! scale.
//!
//! The crate has three layers:
//!
//! * **Environments** — discrete climb games ([`climb`]) in one-step and
//!   multi-stage form, plus a continuous 2-D particle-world variant
//!   ([`particle`]). All share the climb reward structure: a single
//!   high-reward joint configuration, a block of safe suboptimal
//!   configurations worth `1 − δ`, and zero-reward miscoordination.
//!
//! * **Learning pipeline** — small exact-gradient networks ([`nn`]), replay
//!   ([`replay`]), a centralized joint-Q learner for discrete games and a
//!   deterministic actor-critic learner for continuous games ([`learner`]),
//!   the high-reward subspace machinery (valuable set, reward densification,
//!   cluster pseudo-counts, shaped exploration reward — [`subspace`]), and
//!   the two-phase meta-training / meta-testing algorithms ([`meta`]).
//!
//! * **Analysis** — a numerical theory lab ([`theory`]) that verifies
//!   closed-form exploration-efficiency results for one-step climb games
//!   against an exact maximum-likelihood oracle, and the experiment harness
//!   ([`runner`], [`config`], [`metrics`], [`plot`]) that drives reproducible
//!   CSV-emitting experiment runs.
//!
//! Shared domain types (`ClimbTaskSpec`, `Transition`, `ValuableSet`, …) are
//! re-exported at the crate root.

pub mod climb;
pub mod config;
pub mod learner;
pub mod meta;
pub mod meta_particle;
// pub mod metrics;
pub mod nn;
pub mod particle;
// pub mod plot;
pub mod replay;
pub mod rng;
// pub mod runner;
pub mod subspace;
pub mod theory;

pub use climb::{ClimbEnv, ClimbTaskSpec, ClimbVariant, GameState, JointAction, StageSpec, TaskSpace};
pub use config::{
    AnnealSchedule, AnnealShape, ExplorationMode, LearnerConfig, MetaTestConfig, MetaTrainConfig,
    RunConfig, SubspaceConfig,
};
pub use learner::{JointQLearner, MaddpgLearner};
pub use meta::{
    CurvePoint, ExplorationPolicy, ExplorationPolicySet, HarvestStats, MetaTestOutcome,
    MetaTrainOutput,
};
pub use meta_particle::{
    ParticleExplorationPolicy, ParticleExplorationPolicySet, ParticleMetaTestOutcome,
    ParticleMetaTrainOutput,
};
pub use nn::MlpParams;
pub use particle::{ParticleObservation, ParticleWorld};
pub use replay::{ReplayBuffer, Transition};
pub use subspace::{ClusterHash, PseudoCounts, ValuableSet};
pub use theory::{
    ExplorationProfile, ExplorationStrategy, FullQParams, PfailEstimate, ReducedQParams,
};

/// Error type shared across the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An operation was applied to an object in the wrong state.
    #[error("invalid state: {0}")]
    InvalidState(String),
    /// A configuration failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// Training produced a non-finite loss; the caller decides whether to
    /// restart.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    /// Phase (a) of meta-training harvested no valuable points.
    #[error("harvest failure: {0}")]
    HarvestFailure(String),
    /// I/O or serialization problem in the harness.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// CSV serialization problem in the harness.
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
