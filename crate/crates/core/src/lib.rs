//! Adaptive observation sampling for self-taught reasoner training.
//!
//! The crate holds the scheduler ([`sched`]), the iteration engine with its
//! baselines ([`engine`]), learner backends ([`learner`]), imbalance and
//! compute metrics ([`metrics`]) and the command layer used by the CLI
//! ([`app`]).

pub mod app;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod export;
pub mod learner;
pub mod metrics;
pub mod sched;
pub mod sweep;

pub use config::RunConfig;
pub use corpus::{Corpus, ObsId, Observation};
pub use engine::{run_experiment, BatchSchedule, Engine, IterationPolicy, RunOptions, Variant};
pub use learner::{Learner, SyntheticLearner, SyntheticParams};
pub use metrics::{RunLedger, Window};
pub use sched::{curriculum_count, CurriculumShape, HieMinHeap, PriorityOrder};
