//! The training loop: draw observations, sample chains of thought, train on
//! the accepted ones, and feed the results back into the scheduler.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Corpus, Exemplar, ObsId};
use crate::learner::{Learner, LearnerError, TrainExample, TrainReport};
use crate::metrics::{IterationRecord, RunLedger};
use crate::sched::{curriculum_count, HieMinHeap, Iteration, IterationDraft, SchedError};

mod policy;
mod schedule;

pub use policy::{AlphaSource, IterationPolicy, PolicyError, Variant, PRESETS};
pub use schedule::BatchSchedule;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("iteration numbers start at 1")]
    ZeroIteration,
}

/// One answer-verified sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedSample {
    pub id: ObsId,
    pub rationalized: bool,
    pub cot_tokens: u64,
    pub cot: Option<String>,
    pub answer: Option<String>,
}

impl AcceptedSample {
    fn to_train(&self) -> TrainExample {
        TrainExample {
            id: self.id,
            cot_tokens: self.cot_tokens,
            rationalized: self.rationalized,
            cot: self.cot.clone(),
            answer: self.answer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationResult {
    pub t: Iteration,
    pub beta: u64,
    pub sampled_ids: Vec<ObsId>,
    pub draw_accepts: Vec<u32>,
    /// Every accepted sample, before any cutoff or down-sampling.
    pub accepted: Vec<AcceptedSample>,
    /// Ids of the examples actually trained on.
    pub trained: Vec<ObsId>,
    pub attempts: u64,
    pub alpha: f64,
    pub report: Option<TrainReport>,
    pub n_update: Option<usize>,
    pub waste: u64,
    pub shortfall: bool,
    pub inference_tokens: u64,
}

impl IterationResult {
    pub fn m(&self) -> usize {
        self.sampled_ids.len()
    }

    pub fn training_tokens(&self) -> u64 {
        self.report.map_or(0, |r| r.trained_tokens)
    }

    pub fn into_record(self, corpus_size: usize) -> IterationRecord {
        let mut trained_counts = vec![0u32; corpus_size];
        for &id in &self.trained {
            trained_counts[id] += 1;
        }
        IterationRecord {
            t: self.t,
            beta: self.beta,
            attempts: self.attempts,
            accepted: self.accepted.len() as u64,
            rationalized_accepted: self.accepted.iter().filter(|s| s.rationalized).count() as u64,
            trained: self.trained.len() as u64,
            alpha: self.alpha,
            n_update: self.n_update,
            waste: self.waste,
            shortfall: self.shortfall,
            inference_tokens: self.inference_tokens,
            training_tokens: self.training_tokens(),
            eval_accuracy: None,
            trained_counts,
            heap_snapshot: None,
            sampled_ids: self.sampled_ids,
            draw_accepts: self.draw_accepts,
        }
    }
}

/// Keeps at most `cutoff` accepted samples per observation, earliest first.
pub fn dedup_restem(accepted: &[AcceptedSample], cutoff: u32) -> Vec<AcceptedSample> {
    let mut kept: HashMap<ObsId, u32> = HashMap::new();
    accepted
        .iter()
        .filter(|s| {
            let n = kept.entry(s.id).or_default();
            *n += 1;
            *n <= cutoff
        })
        .cloned()
        .collect()
}

#[derive(Default)]
struct Sampling {
    accepted: Vec<AcceptedSample>,
    attempts: u64,
    inference_tokens: u64,
}

/// Per-run state: the policy, the scheduler heap (adaptive variants) and the
/// engine's own random stream.
pub struct Engine<'a> {
    policy: IterationPolicy,
    schedule: BatchSchedule,
    corpus: &'a Corpus,
    exemplars: &'a [Exemplar],
    heap: Option<HieMinHeap>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl<'a> Engine<'a> {
    pub fn new(
        policy: IterationPolicy,
        schedule: BatchSchedule,
        corpus: &'a Corpus,
        exemplars: &'a [Exemplar],
        seed: u64,
    ) -> Result<Self, EngineError> {
        policy.validate()?;
        let heap = policy.variant.order().map(|o| HieMinHeap::new(corpus.len(), o));
        Ok(Self {
            policy,
            schedule,
            corpus,
            exemplars,
            heap,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        })
    }

    pub fn policy(&self) -> &IterationPolicy {
        &self.policy
    }

    pub fn schedule(&self) -> &BatchSchedule {
        &self.schedule
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn heap(&self) -> Option<&HieMinHeap> {
        self.heap.as_ref()
    }

    /// Generates `k` samples for `id` (plus rationalized retries for the
    /// failures) and returns how many were accepted.
    fn sample_observation<L: Learner>(
        &self,
        learner: &mut L,
        id: ObsId,
        mut draft: Option<&mut IterationDraft>,
        out: &mut Sampling,
    ) -> Result<u32, EngineError> {
        let obs = &self.corpus.observations()[id];
        let k = self.policy.k as usize;
        let plain = learner.generate(obs, self.exemplars, None, k)?;
        let failures = plain.iter().filter(|o| !o.hit).count();
        let retries = if self.policy.rationalize && failures > 0 {
            learner.generate(obs, self.exemplars, Some(&obs.answer), failures)?
        } else {
            Vec::new()
        };
        let mut retries = retries.into_iter();
        let mut accepted = 0u32;
        for (idx, outcome) in plain.into_iter().enumerate() {
            out.attempts += 1;
            out.inference_tokens += outcome.cot_tokens;
            if let Some(d) = draft.as_deref_mut() {
                // Hinted retries are not evidence of unaided ability.
                d.update_tmp_win(id, idx as u32 + 1, outcome.hit)?;
            }
            let chosen = if outcome.hit {
                Some(outcome)
            } else if let Some(retry) = retries.next() {
                out.attempts += 1;
                out.inference_tokens += retry.cot_tokens;
                retry.hit.then_some(retry)
            } else {
                None
            };
            if let Some(o) = chosen {
                accepted += 1;
                out.accepted.push(AcceptedSample {
                    id,
                    rationalized: o.rationalized,
                    cot_tokens: o.cot_tokens,
                    cot: o.cot,
                    answer: o.answer_text,
                });
            }
        }
        Ok(accepted)
    }

    /// Runs iteration `t` end to end.
    pub fn run_iteration<L: Learner>(
        &mut self,
        t: Iteration,
        learner: &mut L,
    ) -> Result<IterationResult, EngineError> {
        if t == 0 {
            return Err(EngineError::ZeroIteration);
        }
        let beta = self.schedule.beta(t);
        let mut sampling = Sampling::default();
        let mut draw_accepts = Vec::new();
        let mut shortfall = false;
        let mut waste = 0;

        let (sampled_ids, draft, batch) = if let Some(mut heap) = self.heap.take() {
            let mut draft = IterationDraft::new();
            let drawn = (|| {
                while (sampling.accepted.len() as u64) < beta {
                    let Some(id) = heap.peek_next(&mut draft) else {
                        shortfall = true;
                        break;
                    };
                    let n = self.sample_observation(learner, id, Some(&mut draft), &mut sampling)?;
                    draw_accepts.push(n);
                }
                Ok::<_, EngineError>(())
            })();
            self.heap = Some(heap);
            drawn?;
            let batch = sampling.accepted.clone();
            (draft.sampled_ids().to_vec(), Some(draft), batch)
        } else {
            let mut order: Vec<ObsId> = (0..self.corpus.len()).collect();
            order.shuffle(&mut self.rng);
            for &id in &order {
                let n = self.sample_observation(learner, id, None, &mut sampling)?;
                draw_accepts.push(n);
            }
            let pool = match self.policy.cutoff {
                Some(c) => dedup_restem(&sampling.accepted, c),
                None => sampling.accepted.clone(),
            };
            let batch = if self.policy.full_batch {
                pool
            } else {
                let m_total = sampling.accepted.len() as u64;
                waste = m_total.saturating_sub(beta);
                if (pool.len() as u64) < beta {
                    shortfall = true;
                    pool
                } else {
                    let mut keep = index::sample(&mut self.rng, pool.len(), beta as usize).into_vec();
                    keep.sort_unstable();
                    keep.into_iter().map(|i| pool[i].clone()).collect()
                }
            };
            (order, None, batch)
        };

        let report = if batch.is_empty() {
            None
        } else {
            if !self.policy.accumulate {
                learner.reset_to_base()?;
            }
            let examples: Vec<TrainExample> = batch.iter().map(AcceptedSample::to_train).collect();
            Some(learner.train(self.corpus, &examples, self.policy.accumulate)?)
        };
        let alpha = match (report, self.policy.alpha_source) {
            (None, _) => 0.0,
            (Some(_), AlphaSource::Sampling) => sampling.accepted.len() as f64 / sampling.attempts as f64,
            (Some(r), AlphaSource::Learner) => r.alpha,
        };
        let alpha = self.policy.alpha_override.unwrap_or(alpha);

        let n_update = match (self.heap.as_mut(), draft) {
            (Some(heap), Some(draft)) => {
                let m = draft.drawn();
                let n_update = if self.policy.variant == Variant::Adad {
                    m
                } else {
                    curriculum_count(m, alpha, self.policy.curriculum_shape)?
                };
                heap.commit_iteration(draft, t, n_update)?;
                Some(n_update)
            }
            _ => None,
        };

        Ok(IterationResult {
            t,
            beta,
            sampled_ids,
            draw_accepts,
            trained: batch.iter().map(|s| s.id).collect(),
            accepted: sampling.accepted,
            attempts: sampling.attempts,
            alpha,
            report,
            n_update,
            waste,
            shortfall,
            inference_tokens: sampling.inference_tokens,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub max_iters: Iteration,
    pub model_params: f64,
    pub heap_snapshots: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_iters: 10,
            model_params: 3e9,
            heap_snapshots: false,
        }
    }
}

/// A run that stopped on an error, with everything recorded before it.
#[derive(Debug, Error)]
#[error("run aborted after {} iteration(s): {error}", partial.records.len())]
pub struct RunAborted {
    pub partial: Box<RunLedger>,
    #[source]
    pub error: EngineError,
}

/// Runs up to `opts.max_iters` iterations, calling `eval_hook` after each.
pub fn run_experiment<L, F>(
    engine: &mut Engine<'_>,
    learner: &mut L,
    opts: RunOptions,
    mut eval_hook: F,
) -> Result<RunLedger, RunAborted>
where
    L: Learner,
    F: FnMut(&mut L, Iteration) -> Result<Option<f64>, LearnerError>,
{
    let n = engine.corpus().len();
    let mut ledger = RunLedger::new(engine.policy().label(), engine.seed(), n, opts.model_params);
    for t in 1..=opts.max_iters.max(1) {
        let step = engine.run_iteration(t, learner).and_then(|result| {
            let mut record = result.into_record(n);
            record.eval_accuracy = eval_hook(learner, t)?;
            Ok(record)
        });
        match step {
            Ok(mut record) => {
                if opts.heap_snapshots {
                    record.heap_snapshot = engine.heap().map(HieMinHeap::snapshot);
                }
                ledger.push(record);
            }
            Err(error) => {
                return Err(RunAborted {
                    partial: Box::new(ledger),
                    error,
                })
            }
        }
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;
    use crate::learner::{GenerationOutcome, SyntheticLearner, SyntheticParams};

    fn corpus(n: usize) -> Corpus {
        let text: String = (0..n)
            .map(|i| format!("{{\"question\":\"q{i}\",\"answer\":\"{i}\",\"meta\":{{\"difficulty\":{}}}}}\n", (i % 7) as f64 / 3.0 - 1.0))
            .collect();
        parse_corpus(text.as_bytes(), "c", None).unwrap()
    }

    fn sample(id: ObsId) -> AcceptedSample {
        AcceptedSample { id, rationalized: false, cot_tokens: 1, cot: None, answer: None }
    }

    /// Learner whose hit pattern is scripted per observation id.
    struct Scripted {
        hits: Vec<u32>,
        trains: usize,
        resets: usize,
    }

    impl Learner for Scripted {
        fn generate(&mut self, obs: &crate::corpus::Observation, _: &[Exemplar], hint: Option<&str>, n: usize) -> Result<Vec<GenerationOutcome>, LearnerError> {
            let h = if hint.is_some() { 0 } else { self.hits[obs.id] as usize };
            Ok((0..n)
                .map(|k| GenerationOutcome { hit: k < h, rationalized: hint.is_some(), cot_tokens: 10, answer_text: None, cot: None })
                .collect())
        }
        fn train(&mut self, _: &Corpus, batch: &[TrainExample], _: bool) -> Result<TrainReport, LearnerError> {
            self.trains += 1;
            Ok(TrainReport { alpha: 0.25, trained_examples: batch.len(), trained_tokens: 10 * batch.len() as u64 })
        }
        fn reset_to_base(&mut self) -> Result<(), LearnerError> {
            self.resets += 1;
            Ok(())
        }
    }

    #[test]
    fn dedup_examples() {
        let mut acc: Vec<_> = (0..8).map(|_| sample(0)).collect();
        acc.extend((0..2).map(|_| sample(1)));
        let kept = dedup_restem(&acc, 3);
        assert_eq!(kept.iter().filter(|s| s.id == 0).count(), 3);
        assert_eq!(kept.iter().filter(|s| s.id == 1).count(), 2);
        assert_eq!(dedup_restem(&acc, 1).len(), 2);
        assert_eq!(dedup_restem(&acc, 8), acc);
    }

    #[test]
    fn restem_id_with_eight_hits_contributes_three() {
        let c = corpus(2);
        let mut learner = Scripted { hits: vec![8, 2], trains: 0, resets: 0 };
        let mut policy = IterationPolicy::preset("restem").unwrap();
        policy.full_batch = true;
        let mut e = Engine::new(policy, BatchSchedule::default(), &c, &[], 1).unwrap();
        let r = e.run_iteration(1, &mut learner).unwrap();
        assert_eq!(r.accepted.len(), 10);
        assert_eq!(r.trained.iter().filter(|&&i| i == 0).count(), 3);
        assert_eq!(r.trained.iter().filter(|&&i| i == 1).count(), 2);
        assert_eq!(learner.resets, 1);
    }

    #[test]
    fn adaptive_stops_once_budget_reached() {
        let c = corpus(50);
        let mut learner = Scripted { hits: vec![1; 50], trains: 0, resets: 0 };
        let schedule = BatchSchedule { initial_steps: 1, per_step_batch: 7, growth: 1.0 };
        let policy = IterationPolicy { rationalize: false, ..Default::default() };
        let mut e = Engine::new(policy, schedule, &c, &[], 1).unwrap();
        let r = e.run_iteration(1, &mut learner).unwrap();
        assert_eq!(r.m(), 7);
        assert_eq!(r.accepted.len(), 7);
        assert_eq!(r.sampled_ids, (0..7).collect::<Vec<_>>());
        assert!(!r.shortfall);
        // alpha = 7 hits / 14 attempts
        assert_eq!(r.alpha, 0.5);
        assert_eq!(r.n_update, Some(1));
    }

    #[test]
    fn adaptive_exhaustion_sets_shortfall() {
        let c = corpus(5);
        let mut learner = Scripted { hits: vec![1; 5], trains: 0, resets: 0 };
        let policy = IterationPolicy { rationalize: false, ..Default::default() };
        let mut e = Engine::new(policy, BatchSchedule::default(), &c, &[], 1).unwrap();
        let r = e.run_iteration(1, &mut learner).unwrap();
        assert_eq!(r.m(), 5);
        assert!(r.shortfall);
        assert_eq!(r.trained.len(), 5);
    }

    #[test]
    fn zero_successes_skip_training() {
        let c = corpus(4);
        let mut learner = Scripted { hits: vec![0; 4], trains: 0, resets: 0 };
        let policy = IterationPolicy { rationalize: false, ..Default::default() };
        let mut e = Engine::new(policy, BatchSchedule::default(), &c, &[], 1).unwrap();
        let before = e.heap().unwrap().snapshot();
        let r = e.run_iteration(1, &mut learner).unwrap();
        assert_eq!(learner.trains, 0);
        assert_eq!(r.alpha, 0.0);
        assert_eq!(r.n_update, Some(0));
        assert_eq!(e.heap().unwrap().snapshot(), before);
    }

    #[test]
    fn rationalized_retries_fill_failures() {
        let c = corpus(3);
        let mut learner = Scripted { hits: vec![0, 1, 2], trains: 0, resets: 0 };
        let policy = IterationPolicy::preset("star-acc-full").unwrap();
        let mut e = Engine::new(policy, BatchSchedule::default(), &c, &[], 1).unwrap();
        let r = e.run_iteration(1, &mut learner).unwrap();
        // 6 plain attempts, 3 failures each retried once (scripted to miss).
        assert_eq!(r.attempts, 9);
        assert_eq!(r.accepted.len(), 3);
        assert_eq!(r.waste, 0);
    }

    #[test]
    fn classic_star_waste_and_downsampling() {
        let c = corpus(30);
        let mut learner = Scripted { hits: vec![2; 30], trains: 0, resets: 0 };
        let schedule = BatchSchedule { initial_steps: 5, per_step_batch: 4, growth: 1.0 };
        let policy = IterationPolicy::preset("star-acc").unwrap();
        let mut e = Engine::new(policy, schedule, &c, &[], 3).unwrap();
        let r = e.run_iteration(1, &mut learner).unwrap();
        assert_eq!(r.accepted.len(), 60);
        assert_eq!(r.trained.len(), 20);
        assert_eq!(r.waste, 40);
        assert_eq!(r.m(), 30);
        let mut seen = r.sampled_ids.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn adad_updates_everything_drawn() {
        let c = corpus(20);
        let mut learner = Scripted { hits: vec![1; 20], trains: 0, resets: 0 };
        let schedule = BatchSchedule { initial_steps: 1, per_step_batch: 6, growth: 1.0 };
        let policy = IterationPolicy { rationalize: false, ..IterationPolicy::preset("adad").unwrap() };
        let mut e = Engine::new(policy, schedule, &c, &[], 1).unwrap();
        let r = e.run_iteration(1, &mut learner).unwrap();
        assert_eq!(r.n_update, Some(r.m()));
        let r2 = e.run_iteration(2, &mut learner).unwrap();
        assert_eq!(r2.sampled_ids, (6..12).collect::<Vec<_>>());
    }

    #[test]
    fn learner_alpha_source() {
        let c = corpus(10);
        let mut learner = Scripted { hits: vec![2; 10], trains: 0, resets: 0 };
        let schedule = BatchSchedule { initial_steps: 1, per_step_batch: 8, growth: 1.0 };
        let policy = IterationPolicy { rationalize: false, alpha_source: AlphaSource::Learner, ..Default::default() };
        let mut e = Engine::new(policy, schedule, &c, &[], 1).unwrap();
        let r = e.run_iteration(1, &mut learner).unwrap();
        assert_eq!(r.alpha, 0.25);
        // floor(4 * 0.0625) = 0
        assert_eq!(r.n_update, Some(0));
    }

    #[test]
    fn iteration_zero_rejected() {
        let c = corpus(2);
        let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 1);
        let mut e = Engine::new(IterationPolicy::default(), BatchSchedule::default(), &c, &[], 1).unwrap();
        assert!(matches!(e.run_iteration(0, &mut l), Err(EngineError::ZeroIteration)));
    }

    #[test]
    fn single_iteration_ledger() {
        let c = corpus(40);
        let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 1);
        let mut e = Engine::new(IterationPolicy::default(), BatchSchedule::default(), &c, &[], 1).unwrap();
        let opts = RunOptions { max_iters: 1, ..Default::default() };
        let ledger = run_experiment(&mut e, &mut l, opts, |_, _| Ok(Some(0.5))).unwrap();
        assert_eq!(ledger.records.len(), 1);
        assert_eq!(ledger.best(), Some((1, 0.5)));
    }

    #[test]
    fn failing_learner_returns_partial_ledger() {
        struct Flaky(SyntheticLearner, usize);
        impl Learner for Flaky {
            fn generate(&mut self, o: &crate::corpus::Observation, e: &[Exemplar], h: Option<&str>, n: usize) -> Result<Vec<GenerationOutcome>, LearnerError> {
                self.0.generate(o, e, h, n)
            }
            fn train(&mut self, c: &Corpus, b: &[TrainExample], a: bool) -> Result<TrainReport, LearnerError> {
                self.1 += 1;
                if self.1 == 2 {
                    return Err(LearnerError::Fatal("boom".into()));
                }
                self.0.train(c, b, a)
            }
            fn reset_to_base(&mut self) -> Result<(), LearnerError> {
                self.0.reset_to_base()
            }
        }
        let c = corpus(40);
        let mut l = Flaky(SyntheticLearner::new(SyntheticParams::default(), &c, 1), 0);
        let schedule = BatchSchedule { initial_steps: 1, per_step_batch: 8, growth: 1.0 };
        let mut e = Engine::new(IterationPolicy::default(), schedule, &c, &[], 1).unwrap();
        let opts = RunOptions { max_iters: 5, ..Default::default() };
        let err = run_experiment(&mut e, &mut l, opts, |_, _| Ok(None)).unwrap_err();
        assert_eq!(err.partial.records.len(), 1);
        assert!(matches!(err.error, EngineError::Learner(LearnerError::Fatal(_))));
    }
}
