//! Observation scheduling: per-observation statistics, the hierarchical
//! min-heap that orders them, and the curriculum rule that decides how many
//! drawn observations get their statistics refreshed.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ObsId;

/// Iteration index. Zero is the virtual iteration before training starts.
pub type Iteration = u32;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("contract violation: {0}")]
    Contract(String),
}

fn contract(msg: impl Into<String>) -> SchedError {
    SchedError::Contract(msg.into())
}

/// Sampling statistics for one observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObsStats {
    pub last_sampled: Iteration,
    pub win: f64,
}

/// `(last_sampled, win, id)` ordering: earlier iteration first, then lower
/// win rate, then lower id.
pub fn priority_less(a: (Iteration, f64, ObsId), b: (Iteration, f64, ObsId)) -> bool {
    compare_priority(a, b) == Ordering::Less
}

pub fn compare_priority(a: (Iteration, f64, ObsId), b: (Iteration, f64, ObsId)) -> Ordering {
    a.0.cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Which statistics the heap orders by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PriorityOrder {
    /// Least recently sampled first, hardest first among ties.
    #[default]
    RecencyThenWin,
    /// Least recently sampled only (plain min-heap over recency).
    RecencyOnly,
    /// Hardest first, recency second.
    WinThenRecency,
}

impl PriorityOrder {
    /// Splits stats into (outer, inner) heap keys. Both are plain integers
    /// so the heap never compares floats directly: a non-negative finite
    /// `f64` orders the same as its bit pattern.
    fn keys(self, stats: ObsStats) -> (u64, u64) {
        debug_assert!(stats.win >= 0.0 && stats.win.is_finite());
        let win = stats.win.to_bits();
        let last = u64::from(stats.last_sampled);
        match self {
            PriorityOrder::RecencyThenWin => (last, win),
            PriorityOrder::RecencyOnly => (last, 0),
            PriorityOrder::WinThenRecency => (win, last),
        }
    }
}

/// Observations drawn during one iteration, plus their running win rates.
#[derive(Debug, Clone, Default)]
pub struct IterationDraft {
    sampled: Vec<ObsId>,
    tmp_win: HashMap<ObsId, WinTally>,
}

#[derive(Debug, Clone, Copy, Default)]
struct WinTally {
    samples: u32,
    hits: u32,
}

impl IterationDraft {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ids drawn so far, in draw order.
    pub fn sampled_ids(&self) -> &[ObsId] {
        &self.sampled
    }

    /// Number of observations drawn (`m`).
    pub fn drawn(&self) -> usize {
        self.sampled.len()
    }

    /// Win rate accumulated for `id` this iteration; zero if it has no samples.
    pub fn tmp_win(&self, id: ObsId) -> f64 {
        self.tmp_win.get(&id).map_or(0.0, |t| t.mean())
    }

    /// Folds the `k`-th sample for `id` into its running mean and returns the
    /// updated value. `k` starts at 1 and must increase by one per call.
    pub fn update_tmp_win(&mut self, id: ObsId, k: u32, hit: bool) -> Result<f64, SchedError> {
        if k == 0 {
            return Err(contract("sample index k starts at 1"));
        }
        let tally = self.tmp_win.entry(id).or_default();
        if k != tally.samples + 1 {
            return Err(contract(format!(
                "sample index for id {id} jumped from {} to {k}",
                tally.samples
            )));
        }
        tally.samples = k;
        tally.hits += u32::from(hit);
        Ok(tally.mean())
    }
}

impl WinTally {
    // Equal to the recurrence w <- (k-1)/k * w + 1/k * hit, computed without
    // accumulating rounding error.
    fn mean(self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            f64::from(self.hits) / f64::from(self.samples)
        }
    }
}

type Inner = BinaryHeap<Reverse<(u64, ObsId)>>;

/// Two-level min-heap: an ordered map of outer keys, each holding a binary
/// min-heap over `(inner key, id)`.
///
/// Drawing is a lazy drain. [`peek_next`](Self::peek_next) removes the top
/// entry into the caller's draft and [`commit_iteration`](Self::commit_iteration)
/// pushes every drawn id back, updated or not.
#[derive(Debug, Clone)]
pub struct HieMinHeap {
    order: PriorityOrder,
    outer: BTreeMap<u64, Inner>,
    stats: Vec<ObsStats>,
    queued: usize,
}

impl HieMinHeap {
    /// Heap over ids `0..n`, all statistics zero.
    pub fn new(n: usize, order: PriorityOrder) -> Self {
        Self::with_stats(vec![ObsStats::default(); n], order)
    }

    pub fn with_stats(stats: Vec<ObsStats>, order: PriorityOrder) -> Self {
        let mut heap = Self {
            order,
            outer: BTreeMap::new(),
            queued: 0,
            stats,
        };
        for id in 0..heap.stats.len() {
            heap.push(id);
        }
        heap
    }

    fn push(&mut self, id: ObsId) {
        let (outer, inner) = self.order.keys(self.stats[id]);
        self.outer
            .entry(outer)
            .or_default()
            .push(Reverse((inner, id)));
        self.queued += 1;
    }

    fn pop(&mut self) -> Option<ObsId> {
        let mut entry = self.outer.first_entry()?;
        let Reverse((_, id)) = entry.get_mut().pop()?;
        if entry.get().is_empty() {
            entry.remove();
        }
        self.queued -= 1;
        Some(id)
    }

    pub fn order(&self) -> PriorityOrder {
        self.order
    }

    /// Corpus size.
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Ids still available to draw this iteration.
    pub fn remaining(&self) -> usize {
        self.queued
    }

    pub fn stats(&self, id: ObsId) -> ObsStats {
        self.stats[id]
    }

    pub fn all_stats(&self) -> &[ObsStats] {
        &self.stats
    }

    /// Draws the highest-priority id not yet in `draft`. Returns `None` once
    /// every id has been drawn this iteration.
    pub fn peek_next(&mut self, draft: &mut IterationDraft) -> Option<ObsId> {
        let id = self.pop()?;
        draft.sampled.push(id);
        Some(id)
    }

    /// Refreshes the first `n_update` drawn ids with `last_sampled = t` and
    /// their tmp win rate, then returns every drawn id to the heap.
    pub fn commit_iteration(
        &mut self,
        draft: IterationDraft,
        t: Iteration,
        n_update: usize,
    ) -> Result<(), SchedError> {
        let m = draft.sampled.len();
        if n_update > m {
            return Err(contract(format!("n_update {n_update} exceeds drawn count {m}")));
        }
        if let Some(&id) = draft.sampled[..n_update]
            .iter()
            .find(|&&id| self.stats[id].last_sampled > t)
        {
            // Leave the heap consistent before reporting.
            for &id in &draft.sampled {
                self.push(id);
            }
            return Err(contract(format!(
                "id {id} last sampled at {} which is after iteration {t}",
                self.stats[id].last_sampled
            )));
        }
        for (rank, &id) in draft.sampled.iter().enumerate() {
            if rank < n_update {
                self.stats[id] = ObsStats {
                    last_sampled: t,
                    win: draft.tmp_win(id),
                };
            }
            self.push(id);
        }
        Ok(())
    }

    /// `(id, last_sampled, win)` for every id, in id order.
    pub fn snapshot(&self) -> Vec<(ObsId, Iteration, f64)> {
        self.stats
            .iter()
            .enumerate()
            .map(|(id, s)| (id, s.last_sampled, s.win))
            .collect()
    }
}

/// Shape of the curriculum function applied to the training accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumShape {
    Linear,
    #[default]
    Square,
    Cube,
    Constant,
}

impl CurriculumShape {
    fn power(self) -> u32 {
        match self {
            CurriculumShape::Constant => 0,
            CurriculumShape::Linear => 1,
            CurriculumShape::Square => 2,
            CurriculumShape::Cube => 3,
        }
    }

    pub fn apply(self, alpha: f64) -> f64 {
        alpha.powi(self.power() as i32)
    }
}

/// Number of drawn observations whose statistics get refreshed:
/// `floor(m * f(alpha))`, computed exactly on the binary value of `alpha`.
pub fn curriculum_count(m: usize, alpha: f64, shape: CurriculumShape) -> Result<usize, SchedError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let power = shape.power();
    if power == 0 || alpha == 1.0 {
        return Ok(m);
    }
    if alpha == 0.0 {
        return Ok(0);
    }
    // alpha = mantissa * 2^exp with exp < 0
    let bits = alpha.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, exp) = if raw_exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), raw_exp - 1075)
    };
    let numerator = BigUint::from(m) * BigUint::from(mantissa).pow(power);
    let shift = u64::try_from(-exp * i64::from(power)).expect("alpha < 1 has a negative exponent");
    let count: BigUint = numerator >> shift;
    Ok(usize::try_from(count).expect("count never exceeds m"))
}
