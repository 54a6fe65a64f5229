//! The generate / verify / train cycle behind one trait.
//!
//! [`SyntheticLearner`] simulates a policy whose per-observation success
//! probability is a logistic function of skill minus difficulty.
//! [`RemoteLearner`] drives an inference server over HTTP using the
//! protocol in [`protocol`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Exemplar, ObsId, Observation};

pub mod protocol;
pub mod remote;
pub mod stub;
pub mod synthetic;

pub use remote::{RemoteConfig, RemoteLearner, RemoteStats};
pub use synthetic::{SyntheticLearner, SyntheticModel, SyntheticParams};

#[derive(Debug, Error)]
pub enum LearnerError {
    /// Transient failure; the caller may retry.
    #[error("transient failure after {attempts} attempt(s): {message}")]
    Transient { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("fatal learner error: {0}")]
    Fatal(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Result of one sampled chain of thought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub hit: bool,
    pub rationalized: bool,
    pub cot_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
}

/// One accepted example handed to the training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: ObsId,
    pub cot_tokens: u64,
    pub rationalized: bool,
    pub cot: Option<String>,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub alpha: f64,
    pub trained_examples: usize,
    pub trained_tokens: u64,
}

pub trait Learner {
    /// Samples `n` chains of thought for `obs`, optionally with the gold
    /// answer as a hint. Outcomes come back in issue order.
    fn generate(
        &mut self,
        obs: &Observation,
        exemplars: &[Exemplar],
        hint: Option<&str>,
        n: usize,
    ) -> Result<Vec<GenerationOutcome>, LearnerError>;

    /// One training step on `batch`. With `accumulate = false` training
    /// starts from the base model.
    fn train(
        &mut self,
        corpus: &Corpus,
        batch: &[TrainExample],
        accumulate: bool,
    ) -> Result<TrainReport, LearnerError>;

    fn reset_to_base(&mut self) -> Result<(), LearnerError>;
}

impl<L: Learner + ?Sized> Learner for &mut L {
    fn generate(
        &mut self,
        obs: &Observation,
        exemplars: &[Exemplar],
        hint: Option<&str>,
        n: usize,
    ) -> Result<Vec<GenerationOutcome>, LearnerError> {
        (**self).generate(obs, exemplars, hint, n)
    }

    fn train(
        &mut self,
        corpus: &Corpus,
        batch: &[TrainExample],
        accumulate: bool,
    ) -> Result<TrainReport, LearnerError> {
        (**self).train(corpus, batch, accumulate)
    }

    fn reset_to_base(&mut self) -> Result<(), LearnerError> {
        (**self).reset_to_base()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
