use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msa_core::data::{generate_synthetic, write_archive, SynthSpec};
use msa_core::experiments::{
    ablate, ablation_csv, build_model, evaluate_split, layer_sweep, layer_sweep_csv, load_data, train_on, write_text, RunConfig,
};
use msa_core::io::write_json_atomic;
use msa_core::metrics::evaluate;
use msa_core::params::ParamStore;
use msa_core::{Error, Result};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "msa", version, about = "Personality-aligned multimodal sentiment models")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic feature archive.
    GenSynth(GenSynthArgs),
    /// Train one model and write its run record and weights.
    Train(RunArgs),
    /// Score saved weights on one split.
    Eval(EvalArgs),
    /// Train the full model and every ablation.
    Ablate(RunArgs),
    /// Train once per alignment layer.
    LayerSweep(RunArgs),
    /// Compute the evaluation report for two value files.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Samples per split.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = SynthSpec::default().d_v)]
    d_v: usize,
    #[arg(long, default_value_t = SynthSpec::default().d_a)]
    d_a: usize,
    #[arg(long, default_value_t = SynthSpec::default().vocab)]
    vocab: usize,
    #[arg(long, default_value_t = SynthSpec::default().max_text_len)]
    max_text_len: usize,
    #[arg(long, default_value_t = SynthSpec::default().max_frames)]
    max_frames: usize,
    #[arg(long, default_value_t = SynthSpec::default().noise)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing file.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `model.layers=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.overrides)?.resolved()
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// JSONL weight file written by `train`.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Optional output directory for the report and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// One prediction per line.
    #[arg(long)]
    preds: PathBuf,
    /// One label per line.
    #[arg(long)]
    labels: PathBuf,
}

fn prepare_out(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json_atomic(&dir.join("resolved_config.json"), config)
}

fn read_values(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse::<f64>().map_err(|e| Error::Parse { line: i + 1, message: format!("{}: {e}", path.display()) }))
        .collect()
}

/// Writes the result payload to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn run(cli: Cli) -> Result<()> {
    let log = |msg: String| {
        if cli.verbose {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::GenSynth(a) => {
            if a.out.exists() && !a.force {
                return Err(Error::WouldOverwrite(a.out));
            }
            let spec = SynthSpec {
                d_v: a.d_v,
                d_a: a.d_a,
                vocab: a.vocab,
                max_text_len: a.max_text_len,
                max_frames: a.max_frames,
                noise: a.noise,
            };
            let archive = generate_synthetic(a.seed, a.n, &spec)?;
            write_archive(&archive, &a.out)?;
            log(format!("wrote {} records to {}", archive.records().len(), a.out.display()));
            print_json(&serde_json::to_value(&archive.manifest)?)
        }
        Command::Train(a) => {
            let config = a.config.resolve()?;
            prepare_out(&a.out, &config)?;
            log(format!("training config {}", config.hash()));
            let archive = load_data(&config.data)?;
            let run = train_on(&config, &archive)?;
            run.record.save(&a.out.join("run_record.json"))?;
            run.best_params.save_jsonl(&a.out.join("best_params.jsonl"))?;
            run.final_params.save_jsonl(&a.out.join("final_params.jsonl"))?;
            log(format!("{} steps in {:.1}s", run.record.total_steps, run.record.wall_clock_secs));
            print_json(&json!({
                "config_hash": run.record.config_hash,
                "best_epoch": run.record.best_epoch,
                "total_steps": run.record.total_steps,
                "test": run.record.test,
                "train": run.record.train,
            }))
        }
        Command::Eval(a) => {
            let config = a.config.resolve()?;
            let archive = load_data(&config.data)?;
            let model = build_model(&config, &archive)?;
            let mut store: ParamStore = model.init_params(config.seed);
            let loaded = store.load_jsonl(&a.weights)?;
            log(format!("loaded {loaded} tensors from {}", a.weights.display()));
            let report = evaluate_split(&model, &store, &archive, &a.split, config.eval_batch_size)?;
            if let Some(out) = &a.out {
                prepare_out(out, &config)?;
                write_json_atomic(&out.join("eval_report.json"), &report)?;
            }
            print_json(&serde_json::to_value(&report)?)
        }
        Command::Ablate(a) => {
            let config = a.config.resolve()?;
            prepare_out(&a.out, &config)?;
            let runs = ablate(&config)?;
            let table = ablation_csv(&runs)?;
            write_json_atomic(&a.out.join("ablation_runs.json"), &runs)?;
            write_text(&a.out.join("ablation.csv"), &table)?;
            emit(&table)
        }
        Command::LayerSweep(a) => {
            let config = a.config.resolve()?;
            prepare_out(&a.out, &config)?;
            let runs = layer_sweep(&config)?;
            let table = layer_sweep_csv(&runs)?;
            write_json_atomic(&a.out.join("layer_sweep_runs.json"), &runs)?;
            write_text(&a.out.join("layer_sweep.csv"), &table)?;
            emit(&table)
        }
        Command::Metrics(a) => {
            let preds = read_values(&a.preds)?;
            let labels = read_values(&a.labels)?;
            print_json(&serde_json::to_value(evaluate(&preds, &labels)?)?)
        }
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "kind": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}
