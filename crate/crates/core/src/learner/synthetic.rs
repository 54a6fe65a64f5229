use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{sigmoid, GenerationOutcome, Learner, LearnerError, TrainExample, TrainReport};
use crate::corpus::{Corpus, Exemplar, ObsId, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    /// Global skill gained per full pass over the corpus.
    pub global_lr: f64,
    /// Per-observation skill gained per trained example.
    pub obs_lr: f64,
    pub temperature_slope: f64,
    /// Added to the success probability when the gold answer is given as a hint.
    pub hint_boost: f64,
    pub min_cot_tokens: u64,
    pub max_cot_tokens: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            global_lr: 0.3,
            obs_lr: 0.15,
            temperature_slope: 1.5,
            hint_boost: 0.4,
            min_cot_tokens: 48,
            max_cot_tokens: 192,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Skill {
    global: f64,
    per_obs: Vec<f64>,
}

/// Deterministic skill model: success probability for observation `i` is
/// `sigmoid(slope * (global + per_obs[i] - difficulty[i]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    params: SyntheticParams,
    difficulty: Vec<f64>,
    base: Skill,
    current: Skill,
}

impl SyntheticModel {
    pub fn new(params: SyntheticParams, difficulty: Vec<f64>) -> Self {
        let base = Skill {
            global: 0.0,
            per_obs: vec![0.0; difficulty.len()],
        };
        Self {
            params,
            difficulty,
            current: base.clone(),
            base,
        }
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.difficulty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.difficulty.is_empty()
    }

    pub fn difficulty(&self, id: ObsId) -> f64 {
        self.difficulty[id]
    }

    pub fn global_skill(&self) -> f64 {
        self.current.global
    }

    pub fn obs_skill(&self, id: ObsId) -> f64 {
        self.current.per_obs[id]
    }

    pub fn success_probability(&self, id: ObsId) -> f64 {
        let logit = self.current.global + self.current.per_obs[id] - self.difficulty[id];
        sigmoid(self.params.temperature_slope * logit)
    }

    /// Probability for an observation the model never trained on.
    pub fn unseen_probability(&self, difficulty: f64) -> f64 {
        sigmoid(self.params.temperature_slope * (self.current.global - difficulty))
    }

    pub fn hinted_probability(&self, id: ObsId) -> f64 {
        (self.success_probability(id) + self.params.hint_boost).min(1.0)
    }

    /// Applies one training step over `ids`; duplicates count once each.
    pub fn apply_training(&mut self, ids: impl IntoIterator<Item = ObsId>) {
        let mut count = 0usize;
        for id in ids {
            self.current.per_obs[id] += self.params.obs_lr;
            count += 1;
        }
        let n = self.difficulty.len().max(1) as f64;
        self.current.global += self.params.global_lr * count as f64 / n;
    }

    pub fn reset(&mut self) {
        self.current.clone_from(&self.base);
    }

    pub fn is_at_base(&self) -> bool {
        self.current == self.base
    }
}

/// Difficulty per observation: `meta.difficulty` when present, otherwise a
/// standard normal draw from a generator seeded with `seed`.
pub fn resolve_difficulties(corpus: &Corpus, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|obs| obs.difficulty().unwrap_or_else(|| rng.sample(StandardNormal)))
        .collect()
}

/// Seeded learner backed by a [`SyntheticModel`].
#[derive(Debug, Clone)]
pub struct SyntheticLearner {
    model: SyntheticModel,
    rng: ChaCha8Rng,
}

impl SyntheticLearner {
    pub fn new(params: SyntheticParams, corpus: &Corpus, seed: u64) -> Self {
        let difficulty = resolve_difficulties(corpus, seed ^ 0xD1FF_1C17);
        Self::from_model(SyntheticModel::new(params, difficulty), seed)
    }

    pub fn from_model(model: SyntheticModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn model(&self) -> &SyntheticModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut SyntheticModel {
        &mut self.model
    }

    /// Held-out accuracy: one Bernoulli draw per item at its unseen success
    /// probability, using `seed` for the draws.
    pub fn evaluate(&self, difficulties: &[f64], seed: u64) -> f64 {
        if difficulties.is_empty() {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hits = difficulties
            .iter()
            .filter(|&&d| rng.random::<f64>() < self.model.unseen_probability(d))
            .count();
        hits as f64 / difficulties.len() as f64
    }
}

impl Learner for SyntheticLearner {
    fn generate(
        &mut self,
        obs: &Observation,
        _exemplars: &[Exemplar],
        hint: Option<&str>,
        n: usize,
    ) -> Result<Vec<GenerationOutcome>, LearnerError> {
        if obs.id >= self.model.len() {
            return Err(LearnerError::Contract(format!("unknown observation id {}", obs.id)));
        }
        let p = if hint.is_some() {
            self.model.hinted_probability(obs.id)
        } else {
            self.model.success_probability(obs.id)
        };
        let (lo, hi) = (self.model.params.min_cot_tokens, self.model.params.max_cot_tokens);
        Ok((0..n)
            .map(|_| {
                let hit = self.rng.random::<f64>() < p;
                let cot_tokens = self.rng.random_range(lo..=hi.max(lo));
                GenerationOutcome {
                    hit,
                    rationalized: hint.is_some(),
                    cot_tokens,
                    answer_text: None,
                    cot: None,
                }
            })
            .collect())
    }

    fn train(
        &mut self,
        _corpus: &Corpus,
        batch: &[TrainExample],
        accumulate: bool,
    ) -> Result<TrainReport, LearnerError> {
        if batch.is_empty() {
            return Err(LearnerError::Contract("training batch is empty".into()));
        }
        if !accumulate {
            self.model.reset();
        }
        self.model.apply_training(batch.iter().map(|ex| ex.id));
        let alpha = batch
            .iter()
            .map(|ex| self.model.success_probability(ex.id))
            .sum::<f64>()
            / batch.len() as f64;
        Ok(TrainReport {
            alpha,
            trained_examples: batch.len(),
            trained_tokens: batch.iter().map(|ex| ex.cot_tokens).sum(),
        })
    }

    fn reset_to_base(&mut self) -> Result<(), LearnerError> {
        self.model.reset();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;
    use proptest::prelude::*;

    fn corpus(difficulties: &[f64]) -> Corpus {
        let text: String = difficulties
            .iter()
            .enumerate()
            .map(|(i, d)| format!("{{\"question\":\"q{i}\",\"answer\":\"{i}\",\"meta\":{{\"difficulty\":{d}}}}}\n"))
            .collect();
        parse_corpus(text.as_bytes(), "s", None).unwrap()
    }

    fn example(id: ObsId) -> TrainExample {
        TrainExample {
            id,
            cot_tokens: 10,
            rationalized: false,
            cot: None,
            answer: None,
        }
    }

    #[test]
    fn saturated_logit_always_hits() {
        let c = corpus(&[-1e6]);
        let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 1);
        let outs = l.generate(c.get(0).unwrap(), &[], None, 500).unwrap();
        assert!(outs.iter().all(|o| o.hit));
    }

    #[test]
    fn zero_logit_hits_half_the_time() {
        let c = corpus(&[0.0]);
        let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 10);
        let outs = l.generate(c.get(0).unwrap(), &[], None, 10_000).unwrap();
        let rate = outs.iter().filter(|o| o.hit).count() as f64 / 1e4;
        assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn cot_tokens_stay_in_bounds() {
        let c = corpus(&[0.0]);
        let params = SyntheticParams::default();
        let mut l = SyntheticLearner::new(params, &c, 3);
        for o in l.generate(c.get(0).unwrap(), &[], Some("0"), 200).unwrap() {
            assert!((params.min_cot_tokens..=params.max_cot_tokens).contains(&o.cot_tokens));
            assert!(o.rationalized);
        }
    }

    #[test]
    fn training_raises_probability() {
        let c = corpus(&[0.3, 0.9]);
        let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 1);
        let before = l.model().success_probability(1);
        let u = l.model().obs_skill(1);
        l.train(&c, &[example(1)], true).unwrap();
        assert!(l.model().obs_skill(1) > u);
        assert!(l.model().success_probability(1) > before);
    }

    #[test]
    fn reset_training_is_idempotent() {
        let c = corpus(&[0.3, 0.9, -0.2]);
        let mut a = SyntheticLearner::new(SyntheticParams::default(), &c, 1);
        a.train(&c, &[example(0), example(2)], false).unwrap();
        let first = a.model().clone();
        a.train(&c, &[example(0), example(2)], false).unwrap();
        assert_eq!(a.model(), &first);
    }

    #[test]
    fn reset_restores_snapshot_and_replays() {
        let c = corpus(&[0.3, 0.9, -0.2]);
        let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 5);
        assert!(l.model().is_at_base());
        l.reset_to_base().unwrap();
        assert!(l.model().is_at_base());
        for _ in 0..3 {
            l.train(&c, &[example(0), example(1)], true).unwrap();
        }
        assert!(!l.model().is_at_base());
        l.reset_to_base().unwrap();
        assert!(l.model().is_at_base());

        let mut fresh = SyntheticLearner::new(SyntheticParams::default(), &c, 5);
        let mut replay = SyntheticLearner::new(SyntheticParams::default(), &c, 5);
        replay.train(&c, &[example(2)], true).unwrap();
        replay.reset_to_base().unwrap();
        let obs = c.get(1).unwrap();
        assert_eq!(
            fresh.generate(obs, &[], None, 50).unwrap(),
            replay.generate(obs, &[], None, 50).unwrap()
        );
    }

    #[test]
    fn empty_batch_is_rejected() {
        let c = corpus(&[0.0]);
        let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 1);
        assert!(matches!(l.train(&c, &[], true), Err(LearnerError::Contract(_))));
    }

    #[test]
    fn missing_difficulty_is_drawn_deterministically() {
        let c = parse_corpus("{\"question\":\"a\",\"answer\":\"1\"}\n{\"question\":\"b\",\"answer\":\"2\"}\n".as_bytes(), "x", None).unwrap();
        let a = resolve_difficulties(&c, 4);
        assert_eq!(a, resolve_difficulties(&c, 4));
        assert_ne!(a, resolve_difficulties(&c, 5));
    }

    proptest! {
        #[test]
        fn harder_is_never_likelier(d in proptest::collection::vec(-3.0f64..3.0, 2..20), trained in proptest::collection::vec(0usize..20, 0..10)) {
            let c = corpus(&d);
            let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 2);
            let batch: Vec<_> = trained.iter().map(|&i| example(i % d.len())).collect();
            if !batch.is_empty() {
                l.train(&c, &batch, true).unwrap();
            }
            // Untrained observations order by difficulty alone.
            let untrained: Vec<_> = (0..d.len()).filter(|&i| l.model().obs_skill(i) == 0.0).collect();
            for &i in &untrained {
                for &j in &untrained {
                    if d[i] < d[j] {
                        prop_assert!(l.model().success_probability(i) >= l.model().success_probability(j));
                    }
                }
            }
        }

        #[test]
        fn training_never_lowers_trained_probability(d in proptest::collection::vec(-3.0f64..3.0, 1..20), trained in proptest::collection::vec(0usize..20, 1..10)) {
            let c = corpus(&d);
            let mut l = SyntheticLearner::new(SyntheticParams::default(), &c, 2);
            let batch: Vec<_> = trained.iter().map(|&i| example(i % d.len())).collect();
            let before: Vec<_> = batch.iter().map(|e| l.model().success_probability(e.id)).collect();
            l.train(&c, &batch, true).unwrap();
            for (e, p) in batch.iter().zip(before) {
                prop_assert!(l.model().success_probability(e.id) >= p);
            }
        }
    }
}
