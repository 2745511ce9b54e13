//! Goal curricula for sparse-reward goal-conditioned reinforcement learning,
//! driven by the disagreement of an ensemble of Q functions.
//!
//! The crate carries the whole training stack: a small MLP engine
//! ([`approximator`]), continuous block mazes ([`maze`]), hindsight replay
//! ([`replay`]), a deterministic actor-critic student ([`ddpg`]), the
//! disagreement-driven goal sampler ([`vds`]) and the loop tying them together
//! ([`trainer`]).

pub mod approximator;
pub mod ddpg;
pub mod maze;
pub mod replay;
pub mod seeds;
pub mod trainer;
pub mod vds;

pub use approximator::{HiddenActivation, MlpParams, OptState, OutputActivation, ParamGrads};
pub use ddpg::{Agent, ExploreConfig, GoalPolicy};
pub use maze::{Action, EnvState, Goal, Maze};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use trainer::{EpochReport, RunSummary, TrainConfig, Trainer};
pub use vds::{FKind, GoalDistribution, QEnsemble, SamplerMode};
