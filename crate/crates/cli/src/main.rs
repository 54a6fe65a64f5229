use std::path::PathBuf;
use std::process::ExitCode;

use adastar::app::{self, AppError, DifficultySpec};
use adastar::config::{read_table, RunConfig, REMOTE_URL_ENV};
use adastar::corpus::load_corpus;
use adastar::learner::stub::{StubConfig, StubServer};
use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

#[derive(Parser)]
#[command(name = "adastar", version, about = "Adaptive sampling for self-taught reasoner training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics.
    Run(RunArgs),
    /// Run every preset x seed cell and write an aggregate table.
    Matrix {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated preset names.
        #[arg(long, value_delimiter = ',', required = true)]
        presets: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "10")]
        seeds: Vec<u64>,
        /// Directory for matrix.csv and per-cell artifacts.
        #[arg(long, default_value = "matrix")]
        out: PathBuf,
    },
    /// Write a synthetic corpus with latent difficulties.
    MakeSynth {
        #[arg(long)]
        n: usize,
        /// normal[:mean,sd] | bimodal:low,high,sd | uniform:low,high
        #[arg(long, default_value = "normal:0,1")]
        difficulty: DifficultySpec,
        #[arg(long, default_value_t = 10)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the remote learner protocol from a synthetic model.
    ServeStub {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8077")]
        addr: String,
        #[arg(long, default_value_t = 10)]
        seed: u64,
    },
}

/// Flags mirroring the config file keys. Only flags that are given enter
/// the flags layer; the config file is applied on top of them.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML config file; its keys override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    corpus_limit: Option<usize>,
    #[arg(long)]
    exemplars: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<u32>,
    /// adastar | adad | wo-win | pf | star-random
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    accumulate: Option<bool>,
    #[arg(long)]
    full_batch: Option<bool>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    rationalize: Option<bool>,
    #[arg(long)]
    cutoff: Option<u32>,
    /// linear | square | cube | constant
    #[arg(long)]
    curriculum_shape: Option<String>,
    /// sampling | learner
    #[arg(long)]
    alpha_source: Option<String>,
    #[arg(long)]
    initial_steps: Option<u64>,
    #[arg(long)]
    per_step_batch: Option<u64>,
    #[arg(long)]
    growth: Option<f64>,
    /// synthetic | remote
    #[arg(long)]
    backend: Option<String>,
    #[arg(long, env = REMOTE_URL_ENV)]
    remote_url: Option<String>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long)]
    model_params: Option<f64>,
    #[arg(long)]
    heap_snapshots: bool,
}

fn set(table: &mut Table, path: &[&str], value: Option<Value>) {
    let Some(value) = value else { return };
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("flag tables only");
    }
    t.insert(last.to_string(), value);
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}

fn int<T: Into<i64> + Copy>(x: Option<T>) -> Option<Value> {
    x.map(|v| Value::Integer(v.into()))
}

fn unsigned(x: Option<u64>) -> Option<Value> {
    x.map(|v| Value::Integer(v as i64))
}

impl RunArgs {
    fn flags_table(&self) -> Table {
        let mut t = Table::new();
        set(&mut t, &["preset"], self.preset.clone().map(Value::String));
        set(&mut t, &["corpus"], path_value(&self.corpus));
        set(&mut t, &["corpus_limit"], unsigned(self.corpus_limit.map(|n| n as u64)));
        set(&mut t, &["exemplars"], path_value(&self.exemplars));
        set(&mut t, &["output_dir"], path_value(&self.output_dir));
        set(&mut t, &["seed"], unsigned(self.seed));
        set(&mut t, &["max_iters"], int(self.max_iters));
        set(&mut t, &["policy", "variant"], self.variant.clone().map(Value::String));
        set(&mut t, &["policy", "accumulate"], self.accumulate.map(Value::Boolean));
        set(&mut t, &["policy", "full_batch"], self.full_batch.map(Value::Boolean));
        set(&mut t, &["policy", "k"], int(self.k));
        set(&mut t, &["policy", "rationalize"], self.rationalize.map(Value::Boolean));
        set(&mut t, &["policy", "cutoff"], int(self.cutoff));
        set(&mut t, &["policy", "curriculum_shape"], self.curriculum_shape.clone().map(Value::String));
        set(&mut t, &["policy", "alpha_source"], self.alpha_source.clone().map(Value::String));
        set(&mut t, &["schedule", "initial_steps"], unsigned(self.initial_steps));
        set(&mut t, &["schedule", "per_step_batch"], unsigned(self.per_step_batch));
        set(&mut t, &["schedule", "growth"], self.growth.map(Value::Float));
        set(&mut t, &["learner", "backend"], self.backend.clone().map(Value::String));
        set(&mut t, &["learner", "remote", "base_url"], self.remote_url.clone().map(Value::String));
        set(&mut t, &["eval", "holdout_fraction"], self.holdout_fraction.map(Value::Float));
        set(&mut t, &["metrics", "model_params"], self.model_params.map(Value::Float));
        if self.heap_snapshots {
            set(&mut t, &["metrics", "heap_snapshots"], Some(Value::Boolean(true)));
        }
        t
    }

    fn layers(&self) -> Result<Vec<Table>, AppError> {
        let mut layers = vec![self.flags_table()];
        if let Some(path) = &self.config {
            if !path.is_file() {
                return Err(AppError::Usage(format!("config file not found: {}", path.display())));
            }
            layers.push(read_table(path)?);
        }
        Ok(layers)
    }

    fn resolve(&self) -> Result<RunConfig, AppError> {
        let mut config = RunConfig::resolve(&self.layers()?)?;
        config.apply_env();
        Ok(config)
    }
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Run(args) => {
            let config = args.resolve()?;
            let (_, summary) = app::cmd_run(&config)?;
            log::info!(
                "{} seed {}: {} iterations, best {:?} at {:?}, {:.4} PFLOPs",
                summary.label,
                summary.seed,
                summary.iterations,
                summary.best_accuracy,
                summary.best_iteration,
                summary.total_pflops
            );
            println!("{}", config.output_dir.display());
        }
        Command::Matrix { run, presets, seeds, out } => {
            let rows = app::cmd_matrix(&run.layers()?, &presets, &seeds, &out)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} matrix run(s) failed; see matrix.csv");
            }
            println!("{}", out.join("matrix.csv").display());
        }
        Command::MakeSynth { n, difficulty, seed, out } => {
            let path = app::cmd_make_synth(n, difficulty, seed, &out)?;
            println!("{}", path.display());
        }
        Command::ServeStub { corpus, addr, seed } => {
            if !corpus.is_file() {
                return Err(AppError::Usage(format!("corpus file not found: {}", corpus.display())));
            }
            let corpus = load_corpus(&corpus, None)?;
            let config = StubConfig { seed, ..StubConfig::default() };
            let server = StubServer::start(&addr, &corpus, config).map_err(|source| AppError::Io {
                path: addr.clone(),
                source,
            })?;
            println!("{}", server.base_url());
            server.join();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
