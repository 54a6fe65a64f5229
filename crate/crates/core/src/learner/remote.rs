use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::protocol::{
    GenerateRequest, GenerateResponse, ResetResponse, TrainItem, TrainRequest, TrainResponse,
    GENERATE_PATH, RESET_PATH, TRAIN_PATH,
};
use super::{GenerationOutcome, Learner, LearnerError, TrainExample, TrainReport};
use crate::corpus::{Corpus, Exemplar, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
    pub temperature: f64,
    /// Decoding temperature for held-out evaluation (0 = greedy).
    pub eval_temperature: f64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            timeout_ms: 120_000,
            max_attempts: 3,
            backoff_ms: 1_000,
            temperature: 1.0,
            eval_temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RemoteStats {
    pub requests: u64,
    pub retries: u64,
    pub verified_responses: u64,
    pub skipped_observations: u64,
}

/// Learner that forwards generation and training to an inference server.
pub struct RemoteLearner {
    agent: Agent,
    config: RemoteConfig,
    next_request: u64,
    stats: RemoteStats,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

impl RemoteLearner {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            config,
            next_request: 0,
            stats: RemoteStats::default(),
        }
    }

    pub fn stats(&self) -> RemoteStats {
        self.stats
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn request_id(&mut self) -> String {
        let id = format!("req-{:08}", self.next_request);
        self.next_request += 1;
        id
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(
        &mut self,
        path: &str,
        body: &B,
    ) -> Result<Attempt<R>, LearnerError> {
        self.stats.requests += 1;
        let mut resp = match self.agent.post(self.url(path)).send_json(body) {
            Ok(resp) => resp,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Ok(Attempt::Retry(format!("{path}: HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(LearnerError::Fatal(format!("{path}: HTTP {status}: {text}")));
        }
        match resp.body_mut().read_json::<R>() {
            Ok(v) => Ok(Attempt::Done(v)),
            Err(e) => Err(LearnerError::Protocol(format!("{path}: {e}"))),
        }
    }

    /// POSTs with the configured retry policy.
    fn post<B: Serialize, R: DeserializeOwned>(&mut self, path: &str, body: &B) -> Result<R, LearnerError> {
        let max = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.post_once(path, body)? {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(msg) => {
                    log::warn!("{path} attempt {attempt}/{max} failed: {msg}");
                    last = msg;
                    if attempt < max {
                        self.stats.retries += 1;
                        let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                        thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
        Err(LearnerError::Transient {
            attempts: max,
            message: last,
        })
    }

    fn check_echo(&mut self, sent: &str, got: &str) -> Result<(), LearnerError> {
        if sent != got {
            return Err(LearnerError::Protocol(format!(
                "response id {got:?} does not match request id {sent:?}"
            )));
        }
        self.stats.verified_responses += 1;
        Ok(())
    }

    fn generate_at(
        &mut self,
        obs: &Observation,
        exemplars: &[Exemplar],
        hint: Option<&str>,
        n: usize,
        temperature: f64,
    ) -> Result<Vec<GenerationOutcome>, LearnerError> {
        let request_id = self.request_id();
        let req = GenerateRequest {
            request_id: request_id.clone(),
            question: obs.question.clone(),
            exemplars: exemplars.to_vec(),
            hint: hint.map(str::to_owned),
            n,
            temperature,
        };
        let resp: GenerateResponse = self.post(GENERATE_PATH, &req)?;
        self.check_echo(&request_id, &resp.request_id)?;
        if resp.completions.len() != n {
            return Err(LearnerError::Protocol(format!(
                "asked for {n} completions, got {}",
                resp.completions.len()
            )));
        }
        Ok(resp
            .completions
            .into_iter()
            .map(|c| GenerationOutcome {
                hit: obs.is_correct(&c.answer),
                rationalized: hint.is_some(),
                cot_tokens: c.tokens,
                answer_text: Some(c.answer),
                cot: Some(c.cot),
            })
            .collect())
    }

    /// Greedy (by default) accuracy over `holdout`, one completion per item.
    pub fn evaluate(&mut self, holdout: &Corpus, exemplars: &[Exemplar]) -> Result<f64, LearnerError> {
        let temperature = self.config.eval_temperature;
        let mut hits = 0usize;
        for obs in holdout.iter() {
            let out = self.generate_at(obs, exemplars, None, 1, temperature)?;
            hits += out.iter().filter(|o| o.hit).count();
        }
        Ok(hits as f64 / holdout.len().max(1) as f64)
    }
}

impl Learner for RemoteLearner {
    fn generate(
        &mut self,
        obs: &Observation,
        exemplars: &[Exemplar],
        hint: Option<&str>,
        n: usize,
    ) -> Result<Vec<GenerationOutcome>, LearnerError> {
        match self.generate_at(obs, exemplars, hint, n, self.config.temperature) {
            Err(LearnerError::Transient { attempts, message }) => {
                log::warn!(
                    "skipping observation {} after {attempts} attempts: {message}",
                    obs.id
                );
                self.stats.skipped_observations += 1;
                Ok(vec![
                    GenerationOutcome {
                        hit: false,
                        rationalized: hint.is_some(),
                        cot_tokens: 0,
                        answer_text: None,
                        cot: None,
                    };
                    n
                ])
            }
            other => other,
        }
    }

    fn train(
        &mut self,
        corpus: &Corpus,
        batch: &[TrainExample],
        accumulate: bool,
    ) -> Result<TrainReport, LearnerError> {
        if batch.is_empty() {
            return Err(LearnerError::Contract("training batch is empty".into()));
        }
        let examples = batch
            .iter()
            .map(|ex| {
                let obs = corpus
                    .get(ex.id)
                    .ok_or_else(|| LearnerError::Contract(format!("unknown observation id {}", ex.id)))?;
                Ok(TrainItem {
                    question: obs.question.clone(),
                    cot: ex.cot.clone().unwrap_or_default(),
                    answer: ex.answer.clone().unwrap_or_else(|| obs.answer.clone()),
                })
            })
            .collect::<Result<Vec<_>, LearnerError>>()?;
        let request_id = self.request_id();
        let req = TrainRequest {
            request_id: request_id.clone(),
            examples,
            accumulate,
        };
        let resp: TrainResponse = self.post(TRAIN_PATH, &req)?;
        self.check_echo(&request_id, &resp.request_id)?;
        if !(0.0..=1.0).contains(&resp.alpha) {
            return Err(LearnerError::Protocol(format!("alpha {} outside [0, 1]", resp.alpha)));
        }
        Ok(TrainReport {
            alpha: resp.alpha,
            trained_examples: batch.len(),
            trained_tokens: resp.tokens,
        })
    }

    fn reset_to_base(&mut self) -> Result<(), LearnerError> {
        let resp: ResetResponse = self
            .post(RESET_PATH, &serde_json::json!({}))
            .map_err(|e| LearnerError::Fatal(format!("reset failed: {e}")))?;
        if resp.ok {
            Ok(())
        } else {
            Err(LearnerError::Fatal("server refused to reset".into()))
        }
    }
}
