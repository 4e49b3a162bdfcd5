use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use romtt::bench::{aggregate_errors, read_report, run_experiment, DatasetSource, ExperimentConfig};
use romtt::fom::{generate_dataset, FomConfig};
use romtt::pipeline::Pipeline;
use romtt::surrogate::PodNn;
use romtt::{io, Error, Result};

#[derive(Parser)]
#[command(name = "romtt", version, about = "Tensor-train + operator-inference reduced-order models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the full-order model on its parameter grid and write an stf-1 dataset.
    Generate {
        /// FOM config JSON, or an experiment config with a generated dataset.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train/test split seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment and write report.csv, summary.json and models.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's `output` field.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a stored model at one parameter point and time; prints one value per node.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated parameter values, e.g. "0.1,-1".
        #[arg(long, allow_hyphen_values = true)]
        mu: String,
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
    },
    /// Summarize a benchmark directory from its report.csv.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn parse_mu(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Argument(format!("bad parameter value {s:?}: {e}"))))
        .collect()
}

fn generate(config: &Path, out: &Path, seed: u64) -> Result<()> {
    let fom = match io::read_json::<FomConfig>(config) {
        Ok(f) => f,
        Err(first) => match io::read_json::<ExperimentConfig>(config) {
            Ok(ExperimentConfig { dataset: DatasetSource::Generate(f), .. }) => f,
            Ok(_) => return Err(Error::Config("the experiment config loads its dataset; nothing to generate".into())),
            Err(_) => return Err(first),
        },
    };
    let ds = generate_dataset(&fom, seed)?;
    ds.save(out)?;
    let [n_mu, n_h, n_t] = ds.snapshots.dims();
    println!("wrote {} ({n_mu} parameters, {n_h} nodes, {n_t} times)", out.display());
    Ok(())
}

/// Returns whether every method succeeded.
fn benchmark(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `output`".into()))?;
    let outcome = run_experiment(&cfg, &out)?;
    for m in &outcome.summary.methods {
        println!("{:<9} eps = {:.4e}", m.method.tag(), m.aggregates.global);
    }
    for f in &outcome.summary.failures {
        eprintln!("{} failed during {}: {}", f.method, f.stage, f.message);
    }
    println!("wrote {}", out.display());
    Ok(outcome.summary.failures.is_empty())
}

fn predict(model: &Path, mu: &str, t: f64) -> Result<()> {
    let mu = parse_mu(mu)?;
    let field = if model.join("pipeline_meta.json").exists() {
        Pipeline::load(model)?.predict(&mu, t)?
    } else if model.join("podnn_meta.json").exists() {
        PodNn::load(model)?.predict(&mu, t)?
    } else {
        return Err(Error::Format { path: model.to_path_buf(), msg: "not an LF, MF or POD-NN model directory".into() });
    };
    let mut text = String::with_capacity(field.len() * 24);
    for v in field {
        text.push_str(&format!("{v:e}\n"));
    }
    print!("{text}");
    Ok(())
}

fn report(input: &Path, format: Format) -> Result<()> {
    let tables = read_report(&input.join("report.csv"))?;
    let mut rows = Vec::new();
    for t in &tables {
        rows.push((t, aggregate_errors(t)?));
    }
    match format {
        Format::Csv => {
            println!("method,t,mean_rel_error");
            for (t, a) in &rows {
                for (time, e) in t.times.iter().zip(&a.per_time) {
                    println!("{},{time:e},{e:e}", t.method);
                }
                println!("{},all,{:e}", t.method, a.global);
            }
        }
        Format::Json => {
            let methods: Vec<_> = rows
                .iter()
                .map(|(t, a)| json!({ "method": t.method, "global": a.global, "times": t.times, "per_time": a.per_time }))
                .collect();
            let text = serde_json::to_string_pretty(&json!({ "methods": methods }))
                .map_err(|e| Error::Format { path: input.to_path_buf(), msg: e.to_string() })?;
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate { config, out, seed } => generate(&config, &out, seed).map(|_| true),
        Command::Benchmark { config, out, seed } => benchmark(&config, out, seed),
        Command::Predict { model, mu, t } => predict(&model, &mu, t).map(|_| true),
        Command::Report { input, format } => report(&input, format).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
