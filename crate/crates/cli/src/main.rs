use std::path::PathBuf;

use clap::{Arg, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use relmem::{Error, Result};
use relmem_cli::commands::{self, Cell, SynthParams};
use relmem_cli::run_config::RunConfig;

/// Memory-augmented relation classifier: data, training, evaluation and
/// memory inspection.
#[derive(Parser)]
#[command(name = "relmem", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus a per-epoch report.
    Train(RunArgs),
    /// Score a checkpoint on an instance file.
    Eval(EvalArgs),
    /// Relation distribution and retrieved slots per instance, as JSON lines.
    Predict(QueryArgs),
    /// Readable listing of the training instances each query retrieves.
    InspectMemory(QueryArgs),
    /// Baseline plus attention x response cells with a shared seed.
    Grid(GridArgs),
    /// Write a planted-marker corpus (train/dev/test).
    SynthData(SynthArgs),
}

/// Every run key is also accepted as `--<key> VALUE` (underscores may be
/// dashes). Precedence: config file, then `--set`, then per-key flags.
#[derive(Args)]
struct RunArgs {
    /// `key = value` run file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a run key.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Instance file to score.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    contextual: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    contextual: Option<PathBuf>,
    /// Retrieved slots per instance; clamped to the memory size.
    #[arg(short, long = "top-k", default_value_t = 3)]
    k: usize,
    /// Write here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated cells out of baseline, D+K, D+V, B+K, B+V.
    #[arg(long, default_value = "baseline,D+K,D+V,B+K,B+V")]
    cells: String,
    /// Run cells concurrently. Each cell's numbers stay the same; only log order changes.
    #[arg(long)]
    parallel_cells: bool,
    /// Table destination (JSON lines); stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory for each cell's training report and checkpoint.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 4)]
    relations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Share of instances given a second gold relation.
    #[arg(long, default_value_t = 0.0)]
    multi_label: f64,
}

fn command() -> clap::Command {
    let key_args = || {
        RunConfig::keys()
            .into_iter()
            .map(|k| Arg::new(k).long(k.replace('_', "-")).alias(k).value_name("VALUE").hide(true))
            .collect::<Vec<_>>()
    };
    Cli::command()
        .mut_subcommand("train", |c| c.args(key_args()))
        .mut_subcommand("grid", |c| c.args(key_args()))
}

fn run_config(args: &RunArgs, matches: &ArgMatches) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        rc.set(k.trim(), v.trim())?;
    }
    for key in RunConfig::keys() {
        if let Some(v) = matches.get_one::<String>(key) {
            rc.set(key, v)?;
        }
    }
    Ok(rc)
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match cli.cmd {
        Cmd::Train(args) => {
            let rc = run_config(&args, sub)?;
            let out = commands::cmd_train(&rc)?;
            let s = &out.summary;
            println!("best epoch      {} of {}", s.best_epoch, s.epochs_run);
            println!("train accuracy  {:.4}", s.train_accuracy);
            if let Some(a) = s.dev_accuracy {
                println!("dev accuracy    {a:.4}");
            }
            if let Some(a) = s.test_accuracy {
                println!("test accuracy   {a:.4}");
            }
            let ck = rc.paths.checkpoint.as_deref().expect("checked");
            println!("checkpoint      {}", ck.display());
            let report = rc.paths.report.clone().unwrap_or_else(|| commands::default_report_path(ck));
            println!("report          {}", report.display());
        }
        Cmd::Eval(a) => {
            let ev = commands::cmd_eval(&a.checkpoint, &a.data, a.contextual.as_deref(), a.output.as_deref())?;
            print!("{}", commands::format_report(&ev.labels, &ev.report));
        }
        Cmd::Predict(a) => {
            let text = commands::cmd_predict(&a.checkpoint, &a.data, a.contextual.as_deref(), a.k)?;
            commands::emit(a.output.as_deref(), &text)?;
        }
        Cmd::InspectMemory(a) => {
            let text = commands::cmd_inspect(&a.checkpoint, &a.data, a.contextual.as_deref(), a.k)?;
            commands::emit(a.output.as_deref(), &text)?;
        }
        Cmd::Grid(a) => {
            let rc = run_config(&a.run, sub)?;
            let cells = a.cells.split(',').map(Cell::parse).collect::<Result<Vec<_>>>()?;
            let rows = commands::cmd_grid(&rc, &cells, a.parallel_cells, a.report_dir.as_deref())?;
            commands::emit(a.output.as_deref(), &commands::grid_table(&rows))?;
        }
        Cmd::SynthData(a) => {
            let params = SynthParams {
                train: a.train,
                dev: a.dev,
                test: a.test,
                relations: a.relations,
                seed: a.seed,
                multi_label: a.multi_label,
            };
            for p in commands::cmd_synth(&a.out, &params)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| {
        let _ = e.print();
        std::process::exit(1);
    });
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli, &matches) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

