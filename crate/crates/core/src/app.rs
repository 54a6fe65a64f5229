//! Command implementations shared by the binary and the integration tests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde_json::{Map, Value};
use thiserror::Error;
use toml::Table;

use crate::config::{Backend, ConfigError, MetricsConfig, RunConfig};
use crate::corpus::{load_corpus, load_exemplars, Corpus, CorpusError, Exemplar, Observation};
use crate::engine::{run_experiment, Engine, EngineError, RunAborted, RunOptions};
use crate::export::{write_run_artifacts, ExportError, RunSummary};
use crate::learner::synthetic::resolve_difficulties;
use crate::learner::{Learner, RemoteLearner, SyntheticLearner, SyntheticModel};
use crate::metrics::{freq_sd, RunLedger, Window};
use crate::sweep;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Run(#[from] RunAborted),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("all {0} matrix runs failed")]
    MatrixFailed(usize),
}

impl AppError {
    /// Process exit status: 2 for bad input, 1 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) | AppError::Corpus(_) => 2,
            AppError::Engine(EngineError::Policy(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |source| AppError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Small integer mixer so the engine, learner, split and eval streams
/// derived from one seed do not overlap.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ids held out for evaluation: a seeded draw of ⌊fraction·N⌋ ids, never
/// the whole corpus.
pub fn holdout_ids(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let take = ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)));
    ids.truncate(take);
    ids.sort_unstable();
    ids
}

fn load_inputs(config: &RunConfig) -> Result<(Corpus, Vec<Exemplar>), AppError> {
    if !config.corpus.is_file() {
        return Err(AppError::Usage(format!(
            "corpus file not found: {}",
            config.corpus.display()
        )));
    }
    let corpus = load_corpus(&config.corpus, config.corpus_limit)?;
    let exemplars = match &config.exemplars {
        Some(path) if !path.is_file() => {
            return Err(AppError::Usage(format!(
                "exemplar file not found: {}",
                path.display()
            )))
        }
        Some(path) => load_exemplars(path)?,
        None => Vec::new(),
    };
    Ok((corpus, exemplars))
}

/// Runs one experiment described by `config` and returns its ledger.
pub fn execute(config: &RunConfig) -> Result<RunLedger, AppError> {
    config.validate()?;
    let (full, exemplars) = load_inputs(config)?;
    let held = holdout_ids(full.len(), config.eval.holdout_fraction, config.seed);
    let (train, holdout) = if held.is_empty() {
        (full.clone(), None)
    } else {
        let (t, h) = full.split(&held)?;
        (t, Some(h))
    };
    let opts = RunOptions {
        max_iters: config.max_iters,
        model_params: config.metrics.model_params,
        heap_snapshots: config.metrics.heap_snapshots,
    };
    let mut engine = Engine::new(
        config.policy.clone(),
        config.schedule,
        &train,
        &exemplars,
        config.seed,
    )?;
    let eval_seed = derive_seed(config.seed, 3);

    let ledger = match config.learner.backend {
        Backend::Synthetic => {
            let difficulty = resolve_difficulties(&full, derive_seed(config.seed, 2));
            let mut mask = vec![false; full.len()];
            held.iter().for_each(|&i| mask[i] = true);
            let (train_d, held_d): (Vec<_>, Vec<_>) = difficulty
                .iter()
                .enumerate()
                .partition(|(i, _)| !mask[*i]);
            let train_d: Vec<f64> = train_d.into_iter().map(|(_, d)| *d).collect();
            let held_d: Vec<f64> = held_d.into_iter().map(|(_, d)| *d).collect();
            let model = SyntheticModel::new(config.learner.synthetic, train_d);
            let mut learner = SyntheticLearner::from_model(model, derive_seed(config.seed, 4));
            run_experiment(&mut engine, &mut learner, opts, |l, t| {
                Ok((!held_d.is_empty()).then(|| l.evaluate(&held_d, derive_seed(eval_seed, t as u64))))
            })?
        }
        Backend::Remote => {
            let mut learner = RemoteLearner::new(config.learner.remote.clone());
            learner.reset_to_base().map_err(EngineError::from)?;
            let ledger = run_experiment(&mut engine, &mut learner, opts, |l, _| match &holdout {
                Some(h) => l.evaluate(h, &exemplars).map(Some),
                None => Ok(None),
            });
            log::info!("remote learner: {:?}", learner.stats());
            ledger?
        }
    };
    Ok(ledger)
}

/// `run`: executes the experiment and writes artifacts plus the resolved
/// config snapshot into `config.output_dir`. An aborted run still writes
/// what it recorded.
pub fn cmd_run(config: &RunConfig) -> Result<(RunLedger, RunSummary), AppError> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let snapshot = dir.join("config.toml");
    fs::write(&snapshot, config.to_toml()?).map_err(io_err(&snapshot))?;
    match execute(config) {
        Ok(ledger) => {
            let summary = write_run_artifacts(dir, &ledger, &config.metrics)?;
            Ok((ledger, summary))
        }
        Err(AppError::Run(aborted)) => {
            if !aborted.partial.records.is_empty() {
                write_run_artifacts(dir, &aborted.partial, &config.metrics)?;
            }
            Err(AppError::Run(aborted))
        }
        Err(e) => Err(e),
    }
}

/// One row of the matrix table.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub preset: String,
    /// `None` on aggregate rows.
    pub seed: Option<u64>,
    pub runs: usize,
    pub best_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub sd: Option<f64>,
    pub total_pflops: Option<f64>,
    pub error: Option<String>,
}

fn cell_metrics(ledger: &RunLedger, metrics: &MetricsConfig) -> Result<(Option<f64>, Option<f64>, f64, f64), AppError> {
    let w = metrics.matrix_window;
    let window = Window::new(w.start, w.end.min(ledger.iterations()));
    let sd = freq_sd(&ledger.freq_table(window), metrics.sd).map_err(ExportError::from)?;
    let last = ledger.records.last().and_then(|r| r.eval_accuracy);
    Ok((ledger.best().map(|b| b.1), last, sd, ledger.flops.total_pflops()))
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = xs.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-preset means over the successful run rows. Rows are grouped by
/// preset in first-appearance order of `presets`.
pub fn aggregate(presets: &[String], rows: &[MatrixRow]) -> Vec<MatrixRow> {
    presets
        .iter()
        .map(|p| {
            let mut ok: Vec<&MatrixRow> = rows
                .iter()
                .filter(|r| &r.preset == p && r.seed.is_some() && r.error.is_none())
                .collect();
            ok.sort_by_key(|r| r.seed);
            MatrixRow {
                preset: p.clone(),
                seed: None,
                runs: ok.len(),
                best_accuracy: mean(ok.iter().map(|r| r.best_accuracy)),
                final_accuracy: mean(ok.iter().map(|r| r.final_accuracy)),
                sd: mean(ok.iter().map(|r| r.sd)),
                total_pflops: mean(ok.iter().map(|r| r.total_pflops)),
                error: None,
            }
        })
        .collect()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// `matrix`: runs every (preset, seed) cell. Each cell resolves `layers`
/// followed by its own preset and seed, and writes its artifacts under
/// `out/<preset>/seed-<seed>`. Writes `matrix.csv` with run rows then one
/// mean row per preset.
pub fn cmd_matrix(
    layers: &[Table],
    presets: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<MatrixRow>, AppError> {
    if presets.is_empty() || seeds.is_empty() {
        return Err(AppError::Usage("matrix needs at least one preset and one seed".into()));
    }
    let mut cells = Vec::new();
    for p in presets {
        for &s in seeds {
            let mut cell = Table::new();
            cell.insert("preset".into(), p.clone().into());
            cell.insert("seed".into(), (s as i64).into());
            cell.insert(
                "output_dir".into(),
                out.join(p).join(format!("seed-{s}")).display().to_string().into(),
            );
            let mut all = layers.to_vec();
            all.push(cell);
            let mut config = RunConfig::resolve(&all)?;
            config.apply_env();
            config.validate()?;
            cells.push((p.clone(), s, config));
        }
    }
    let remote = cells.iter().any(|c| c.2.learner.backend == Backend::Remote);
    let run_cell = |(p, s, config): &(String, u64, RunConfig)| {
        let result = cmd_run(config).and_then(|(ledger, _)| cell_metrics(&ledger, &config.metrics));
        let mut row = MatrixRow {
            preset: p.clone(),
            seed: Some(*s),
            runs: 1,
            best_accuracy: None,
            final_accuracy: None,
            sd: None,
            total_pflops: None,
            error: None,
        };
        match result {
            Ok((best, last, sd, pflops)) => {
                row.best_accuracy = best;
                row.final_accuracy = last;
                row.sd = Some(sd);
                row.total_pflops = Some(pflops);
            }
            Err(e) => {
                log::error!("{p} seed {s}: {e}");
                row.runs = 0;
                row.error = Some(e.to_string());
            }
        }
        row
    };
    // The remote server holds one model state, so its cells cannot overlap.
    let mut rows = if remote {
        sweep::map_sequential(&cells, run_cell)
    } else {
        sweep::map(&cells, run_cell)
    };
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let mut agg = aggregate(presets, &rows);
    rows.append(&mut agg);
    write_matrix(out, &rows)?;
    if failed == cells.len() {
        return Err(AppError::MatrixFailed(failed));
    }
    Ok(rows)
}

fn write_matrix(out: &Path, rows: &[MatrixRow]) -> Result<(), AppError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("matrix.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| AppError::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    let mut put = |rec: Vec<String>| {
        w.write_record(&rec).map_err(|e| AppError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })
    };
    put(
        ["kind", "preset", "seed", "runs", "best_acc", "final_acc", "sd", "total_pflops", "error"]
            .map(String::from)
            .to_vec(),
    )?;
    for r in rows {
        put(vec![
            if r.seed.is_some() { "run" } else { "mean" }.into(),
            r.preset.clone(),
            r.seed.map_or(String::new(), |s| s.to_string()),
            r.runs.to_string(),
            fmt_opt(r.best_accuracy),
            fmt_opt(r.final_accuracy),
            fmt_opt(r.sd),
            fmt_opt(r.total_pflops),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(&path))
}

/// Distribution of latent difficulty for generated corpora.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DifficultySpec {
    Normal { mean: f64, sd: f64 },
    /// Equal mixture of two normals with a shared spread.
    Bimodal { low: f64, high: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for DifficultySpec {
    fn default() -> Self {
        DifficultySpec::Normal { mean: 0.0, sd: 1.0 }
    }
}

impl fmt::Display for DifficultySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DifficultySpec::Normal { mean, sd } => write!(f, "normal:{mean},{sd}"),
            DifficultySpec::Bimodal { low, high, sd } => write!(f, "bimodal:{low},{high},{sd}"),
            DifficultySpec::Uniform { low, high } => write!(f, "uniform:{low},{high}"),
        }
    }
}

impl FromStr for DifficultySpec {
    type Err = String;

    /// Parses `normal[:mean,sd]`, `bimodal:low,high,sd` or `uniform:low,high`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        let nums: Vec<f64> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|e| format!("{a:?}: {e}")))
                .collect::<Result<_, _>>()?
        };
        if nums.iter().any(|x| !x.is_finite()) {
            return Err(format!("non-finite parameter in {s:?}"));
        }
        let spec = match (kind, nums.as_slice()) {
            ("normal", []) => DifficultySpec::default(),
            ("normal", &[mean, sd]) => DifficultySpec::Normal { mean, sd },
            ("bimodal", &[low, high, sd]) => DifficultySpec::Bimodal { low, high, sd },
            ("uniform", &[low, high]) => DifficultySpec::Uniform { low, high },
            _ => return Err(format!("unrecognized difficulty spec {s:?}")),
        };
        match spec {
            DifficultySpec::Normal { sd, .. } | DifficultySpec::Bimodal { sd, .. } if sd < 0.0 => {
                Err("sd must be non-negative".into())
            }
            DifficultySpec::Uniform { low, high } if low > high => Err("uniform needs low <= high".into()),
            _ => Ok(spec),
        }
    }
}

impl DifficultySpec {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let normal = |m: f64, sd: f64, rng: &mut R| Normal::new(m, sd).expect("sd checked").sample(rng);
        match *self {
            DifficultySpec::Normal { mean, sd } => normal(mean, sd, rng),
            DifficultySpec::Bimodal { low, high, sd } => {
                let centre = if rng.random::<bool>() { high } else { low };
                normal(centre, sd, rng)
            }
            DifficultySpec::Uniform { low, high } if low == high => low,
            DifficultySpec::Uniform { low, high } => Uniform::new(low, high).expect("low < high").sample(rng),
        }
    }
}

/// Arithmetic word problems with a latent difficulty in `meta.difficulty`.
pub fn synthetic_corpus(n: usize, spec: DifficultySpec, seed: u64) -> Result<Corpus, AppError> {
    if n == 0 {
        return Err(AppError::Usage("make-synth needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observations = (0..n)
        .map(|id| {
            let a: u32 = rng.random_range(2..100);
            let b: u32 = rng.random_range(2..100);
            let d = spec.sample(&mut rng);
            let mut meta = Map::new();
            meta.insert("difficulty".into(), Value::from(d));
            Observation {
                id,
                question: format!("Problem {id}: a crate holds {a} apples and {b} more are added. How many apples are in the crate?"),
                answer: (a + b).to_string(),
                source_id: None,
                meta,
            }
        })
        .collect();
    Ok(Corpus::from_observations("synthetic", observations)?)
}

/// `make-synth`: writes a generated corpus to `path`.
pub fn cmd_make_synth(n: usize, spec: DifficultySpec, seed: u64, path: &Path) -> Result<PathBuf, AppError> {
    let corpus = synthetic_corpus(n, spec, seed)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    corpus.save(path)?;
    Ok(path.to_path_buf())
}
