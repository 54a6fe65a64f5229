//! CSV and JSON-lines artifacts written for every run.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::MetricsConfig;
use crate::metrics::{
    emit_learning_curve, freq_sd, histogram, quartile_persistence, RunLedger, Window,
};

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>, header: &[&str]) -> Result<(), ExportError> {
    let csv_err = |source| ExportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Windows that fit inside a run of `iterations`, plus the whole run.
pub fn effective_windows(requested: &[Window], iterations: u32) -> Vec<Window> {
    let mut out: Vec<Window> = requested
        .iter()
        .copied()
        .filter(|w| w.start >= 1 && w.start <= w.end && w.end <= iterations)
        .collect();
    let whole = Window::new(1, iterations.max(1));
    if !out.contains(&whole) {
        out.push(whole);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowSd {
    pub window: String,
    pub sd: f64,
}

/// One-line run summary with the columns of a results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub corpus_size: usize,
    pub iterations: u32,
    pub best_iteration: Option<u32>,
    pub best_accuracy: Option<f64>,
    pub total_pflops: f64,
    pub pflops_at_best: Option<f64>,
    pub total_waste: u64,
    pub sd: Vec<WindowSd>,
    /// Share of accepted samples whose reasoning is flawed; needs external annotation.
    pub false_positive_rate: Option<f64>,
}

pub fn summarize(ledger: &RunLedger, cfg: &MetricsConfig) -> Result<RunSummary, ExportError> {
    let best = ledger.best();
    let sd = effective_windows(&cfg.sd_windows, ledger.iterations())
        .into_iter()
        .map(|w| {
            Ok(WindowSd {
                window: w.to_string(),
                sd: freq_sd(&ledger.freq_table(w), cfg.sd)?,
            })
        })
        .collect::<Result<_, ExportError>>()?;
    Ok(RunSummary {
        label: ledger.label.clone(),
        seed: ledger.seed,
        corpus_size: ledger.corpus_size,
        iterations: ledger.iterations(),
        best_iteration: best.map(|b| b.0),
        best_accuracy: best.map(|b| b.1),
        total_pflops: ledger.flops.total_pflops(),
        pflops_at_best: best.map(|(t, _)| ledger.flops.records[t as usize - 1].cumulative_flops / 1e15),
        total_waste: ledger.records.iter().map(|r| r.waste).sum(),
        sd,
        false_positive_rate: None,
    })
}

/// Writes every metrics artifact for `ledger` into `dir`.
pub fn write_run_artifacts(dir: &Path, ledger: &RunLedger, cfg: &MetricsConfig) -> Result<RunSummary, ExportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let windows = effective_windows(&cfg.sd_windows, ledger.iterations());

    let mut sd_rows = Vec::new();
    for &w in &windows {
        let table = ledger.freq_table(w);
        write_csv(
            &dir.join(format!("freq_{w}.csv")),
            table.counts.iter().enumerate(),
            &["id", "count"],
        )?;
        write_csv(
            &dir.join(format!("hist_{w}.csv")),
            histogram(&table, cfg.histogram_bin)?
                .into_iter()
                .map(|b| (b.lower, b.upper, b.observations)),
            &["lower", "upper", "observations"],
        )?;
        let n = table.counts.len().max(1) as f64;
        sd_rows.push((
            w.start,
            w.end,
            freq_sd(&table, cfg.sd)?,
            table.counts.iter().sum::<u64>() as f64 / n,
            table.counts.iter().copied().min().unwrap_or(0),
            table.counts.iter().copied().max().unwrap_or(0),
        ));
    }
    write_csv(
        &dir.join("sd_summary.csv"),
        sd_rows,
        &["window_start", "window_end", "sd", "mean", "min", "max"],
    )?;

    let quartile_rows = quartile_persistence(ledger, cfg.quartile_base, cfg.quartile_offset)
        .ok()
        .map(|q| (q.base.start, q.base.end, q.offset, q.q1_stay, q.q4_stay));
    write_csv(
        &dir.join("quartiles.csv"),
        quartile_rows,
        &["base_start", "base_end", "offset", "q1_stay", "q4_stay"],
    )?;

    write_csv(
        &dir.join("flops.csv"),
        ledger.records.iter().zip(&ledger.flops.records).map(|(r, f)| {
            (
                r.t,
                f.inference_tokens,
                f.training_tokens,
                f.inference_flops,
                f.training_flops,
                f.cumulative_flops,
                f.cumulative_flops / 1e15,
            )
        }),
        &[
            "iteration",
            "inference_tokens",
            "training_tokens",
            "inference_flops",
            "training_flops",
            "cumulative_flops",
            "cumulative_pflops",
        ],
    )?;

    write_csv(
        &dir.join("curve.csv"),
        emit_learning_curve(ledger)
            .into_iter()
            .map(|c| (c.iteration, c.cumulative_pflops, c.eval_accuracy, c.best_so_far, c.peak)),
        &["iteration", "cumulative_pflops", "eval_accuracy", "best_so_far", "peak"],
    )?;

    write_csv(
        &dir.join("iterations.csv"),
        ledger.records.iter().map(|r| {
            (
                r.t,
                r.beta,
                r.m(),
                r.attempts,
                r.accepted,
                r.rationalized_accepted,
                r.trained,
                r.alpha,
                r.n_update.map_or(String::new(), |n| n.to_string()),
                r.waste,
                r.shortfall,
            )
        }),
        &[
            "iteration",
            "beta",
            "drawn",
            "attempts",
            "accepted",
            "rationalized",
            "trained",
            "alpha",
            "n_update",
            "waste",
            "shortfall",
        ],
    )?;

    if ledger.records.iter().any(|r| r.heap_snapshot.is_some()) {
        write_csv(
            &dir.join("heap.csv"),
            ledger.records.iter().flat_map(|r| {
                r.heap_snapshot
                    .iter()
                    .flatten()
                    .map(move |&(id, last, win)| (r.t, id, last, win))
            }),
            &["iter", "id", "last_sampled", "win"],
        )?;
    }

    let summary = summarize(ledger, cfg)?;
    let path = dir.join("summary.jsonl");
    let mut line = serde_json::to_vec(&summary).expect("summary serializes");
    line.push(b'\n');
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&line))
        .map_err(io_err(&path))?;
    Ok(summary)
}
