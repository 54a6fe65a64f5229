//! Run ledger and the imbalance, compute and learning-curve metrics derived
//! from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ObsId;
use crate::sched::Iteration;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
}

fn contract<T>(msg: impl Into<String>) -> Result<T, MetricsError> {
    Err(MetricsError::Contract(msg.into()))
}

/// Inclusive iteration window `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Iteration,
    pub end: Iteration,
}

impl Window {
    pub fn new(start: Iteration, end: Iteration) -> Self {
        Self { start, end }
    }

    pub fn shifted(self, offset: Iteration) -> Self {
        Self::new(self.start + offset, self.end + offset)
    }

    pub fn contains(self, t: Iteration) -> bool {
        (self.start..=self.end).contains(&t)
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

/// Everything recorded about one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: Iteration,
    pub beta: u64,
    /// Observations drawn, in draw order.
    pub sampled_ids: Vec<ObsId>,
    /// Samples accepted from each draw, parallel to `sampled_ids`.
    pub draw_accepts: Vec<u32>,
    pub attempts: u64,
    pub accepted: u64,
    pub rationalized_accepted: u64,
    pub trained: u64,
    pub alpha: f64,
    pub n_update: Option<usize>,
    pub waste: u64,
    pub shortfall: bool,
    pub inference_tokens: u64,
    pub training_tokens: u64,
    pub eval_accuracy: Option<f64>,
    /// Times each observation appeared in this iteration's training batch.
    pub trained_counts: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heap_snapshot: Option<Vec<(ObsId, Iteration, f64)>>,
}

impl IterationRecord {
    pub fn m(&self) -> usize {
        self.sampled_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsRecord {
    pub inference_tokens: u64,
    pub training_tokens: u64,
    pub inference_flops: f64,
    pub training_flops: f64,
    pub cumulative_flops: f64,
}

/// Compute accounting: 2 FLOPs per parameter per generated token and 6 per
/// trained token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub model_params: f64,
    pub records: Vec<FlopsRecord>,
}

impl FlopsLedger {
    pub fn new(model_params: f64) -> Self {
        Self {
            model_params,
            records: Vec::new(),
        }
    }

    pub fn record(&mut self, inference_tokens: u64, training_tokens: u64) -> FlopsRecord {
        let inference_flops = 2.0 * self.model_params * inference_tokens as f64;
        let training_flops = 6.0 * self.model_params * training_tokens as f64;
        let rec = FlopsRecord {
            inference_tokens,
            training_tokens,
            inference_flops,
            training_flops,
            cumulative_flops: self.total() + inference_flops + training_flops,
        };
        self.records.push(rec);
        rec
    }

    pub fn total(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative_flops)
    }

    pub fn total_pflops(&self) -> f64 {
        self.total() / 1e15
    }
}

/// Appends one iteration's token counts to `ledger`.
pub fn record_flops(ledger: &mut FlopsLedger, inference_tokens: u64, training_tokens: u64) -> FlopsRecord {
    ledger.record(inference_tokens, training_tokens)
}

/// Complete record of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub label: String,
    pub seed: u64,
    pub corpus_size: usize,
    pub records: Vec<IterationRecord>,
    pub flops: FlopsLedger,
}

impl RunLedger {
    pub fn new(label: impl Into<String>, seed: u64, corpus_size: usize, model_params: f64) -> Self {
        Self {
            label: label.into(),
            seed,
            corpus_size,
            records: Vec::new(),
            flops: FlopsLedger::new(model_params),
        }
    }

    pub fn push(&mut self, record: IterationRecord) {
        self.flops.record(record.inference_tokens, record.training_tokens);
        self.records.push(record);
    }

    pub fn iterations(&self) -> Iteration {
        self.records.last().map_or(0, |r| r.t)
    }

    /// Peak eval accuracy and its iteration; ties go to the earlier one.
    pub fn best(&self) -> Option<(Iteration, f64)> {
        let mut best: Option<(Iteration, f64)> = None;
        for r in &self.records {
            if let Some(acc) = r.eval_accuracy {
                if best.is_none_or(|(_, b)| acc > b) {
                    best = Some((r.t, acc));
                }
            }
        }
        best
    }

    pub fn freq_table(&self, window: Window) -> FreqTable {
        let mut counts = vec![0u64; self.corpus_size];
        for r in self.records.iter().filter(|r| window.contains(r.t)) {
            for (c, &n) in counts.iter_mut().zip(&r.trained_counts) {
                *c += u64::from(n);
            }
        }
        FreqTable { window, counts }
    }
}

/// Trained-frequency counts per observation over a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqTable {
    pub window: Window,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdOptions {
    /// Divide by N rather than N - 1.
    pub population: bool,
    /// Count never-trained observations as zeros.
    pub include_untrained: bool,
}

impl Default for SdOptions {
    fn default() -> Self {
        Self {
            population: true,
            include_untrained: true,
        }
    }
}

/// Standard deviation of trained counts.
pub fn freq_sd(table: &FreqTable, opts: SdOptions) -> Result<f64, MetricsError> {
    let values: Vec<f64> = table
        .counts
        .iter()
        .filter(|&&c| opts.include_untrained || c > 0)
        .map(|&c| c as f64)
        .collect();
    let n = values.len();
    if n == 0 {
        return contract("standard deviation over zero observations");
    }
    if !opts.population && n < 2 {
        return contract("sample standard deviation needs two observations");
    }
    // Welford
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let denom = if opts.population { n } else { n - 1 } as f64;
    Ok((m2 / denom).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuartileReport {
    pub q1_stay: f64,
    pub q4_stay: f64,
    pub base: Window,
    pub offset: Iteration,
}

/// Quartile index (0..4) per observation, by rank of trained count with id
/// as tiebreak. Quartile sizes differ by at most one.
pub fn quartiles(counts: &[u64]) -> Vec<u8> {
    let n = counts.len();
    let mut ranked: Vec<ObsId> = (0..n).collect();
    ranked.sort_by_key(|&id| (counts[id], id));
    let mut out = vec![0u8; n];
    for (rank, id) in ranked.into_iter().enumerate() {
        out[id] = (rank * 4 / n) as u8;
    }
    out
}

/// Fraction of first- and fourth-quartile observations (by trained count over
/// `base`) that stay in the same quartile over `base` shifted by `offset`.
pub fn quartile_persistence(
    ledger: &RunLedger,
    base: Window,
    offset: Iteration,
) -> Result<QuartileReport, MetricsError> {
    let shifted = base.shifted(offset);
    if ledger.iterations() < shifted.end {
        return contract(format!(
            "ledger has {} iterations, window {shifted} needs {}",
            ledger.iterations(),
            shifted.end
        ));
    }
    quartile_persistence_from(&ledger.freq_table(base).counts, &ledger.freq_table(shifted).counts)
        .map(|(q1_stay, q4_stay)| QuartileReport {
            q1_stay,
            q4_stay,
            base,
            offset,
        })
}

/// `(q1_stay, q4_stay)` between two count vectors over the same ids.
pub fn quartile_persistence_from(before: &[u64], after: &[u64]) -> Result<(f64, f64), MetricsError> {
    if before.len() != after.len() {
        return contract("count vectors differ in length");
    }
    if before.len() < 4 {
        return contract("quartiles need at least four observations");
    }
    let (qa, qb) = (quartiles(before), quartiles(after));
    let stay = |q: u8| {
        let members = qa.iter().filter(|&&x| x == q).count();
        let kept = qa.iter().zip(&qb).filter(|(&a, &b)| a == q && b == q).count();
        kept as f64 / members as f64
    };
    Ok((stay(0), stay(3)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: Iteration,
    pub cumulative_pflops: f64,
    pub eval_accuracy: f64,
    /// Strictly improves on every earlier row.
    pub best_so_far: bool,
    /// The early-stopping peak.
    pub peak: bool,
}

/// Learning curve over iterations that have an eval point.
pub fn emit_learning_curve(ledger: &RunLedger) -> Vec<CurveRow> {
    let peak = ledger.best().map(|(t, _)| t);
    let mut running: Option<f64> = None;
    ledger
        .records
        .iter()
        .zip(&ledger.flops.records)
        .filter_map(|(r, f)| {
            let acc = r.eval_accuracy?;
            let best_so_far = running.is_none_or(|b| acc > b);
            if best_so_far {
                running = Some(acc);
            }
            Some(CurveRow {
                iteration: r.t,
                cumulative_pflops: f.cumulative_flops / 1e15,
                eval_accuracy: acc,
                best_so_far,
                peak: Some(r.t) == peak,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Inclusive lower bound on trained count.
    pub lower: u64,
    /// Exclusive upper bound.
    pub upper: u64,
    pub observations: usize,
}

/// Histogram of trained counts with bins of `width` starting at zero.
pub fn histogram(table: &FreqTable, width: u64) -> Result<Vec<HistogramBin>, MetricsError> {
    if width == 0 {
        return contract("bin width must be at least 1");
    }
    let max = table.counts.iter().copied().max().unwrap_or(0);
    let mut bins: Vec<HistogramBin> = (0..=max / width)
        .map(|b| HistogramBin {
            lower: b * width,
            upper: (b + 1) * width,
            observations: 0,
        })
        .collect();
    for &c in &table.counts {
        bins[(c / width) as usize].observations += 1;
    }
    Ok(bins)
}
