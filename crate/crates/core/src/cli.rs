//! Command-line interface behind the `transfer-ner` binary.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, TagScheme};
use crate::data::{
    is_valid_iobes, read_conll_columns, write_atomic, write_conll, SynthCorpora, SynthSpec,
};
use crate::error::{Error, Result};
use crate::experiment::{
    grid_modes, run_experiment_with_diagnostics, run_grid, staging_dir, write_run_outputs,
};
use crate::gates::{
    aggregate_gates, collect_gate_traces, gate_trace_long_csv, gate_trace_wide_csv, GroupBy,
};
use crate::model::{ModelMode, NerModel};

#[derive(Debug, Parser)]
#[command(
    name = "transfer-ner",
    version,
    about = "Transfer learning for low-resource sequence labeling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a column-format corpus to two-column IOBES.
    Convert(ConvertArgs),
    /// Train and evaluate one model.
    Train(TrainArgs),
    /// Train every sharing configuration and rank them.
    Grid(GridArgs),
    /// Dump gate activations of a gated model.
    Gates(GatesArgs),
    /// Generate synthetic source and target corpora.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Scheme of the input tags.
    #[arg(long, default_value = "bio")]
    pub from: TagScheme,
    #[arg(long, default_value_t = 0)]
    pub token_column: usize,
    #[arg(long, default_value_t = 1)]
    pub tag_column: usize,
}

#[derive(Debug, Args)]
pub struct RunOverrides {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Target training fraction in (0, 1].
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    /// baseline, ttn:CODE, dtn or dtn-hs.
    #[arg(long)]
    pub mode: Option<ModelMode>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Extra modes run after the 27 configurations.
    #[arg(long, value_delimiter = ',')]
    pub with: Vec<ModelMode>,
}

#[derive(Debug, Args)]
pub struct GatesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// IOBES corpus to trace.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Aggregate rows: tag, component or token.
    #[arg(long, default_value = "tag")]
    pub group_by: GroupBy,
    #[arg(long, default_value_t = 0)]
    pub token_column: usize,
    #[arg(long, default_value_t = 1)]
    pub tag_column: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (TOML); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

/// Process exit status for an error: `1` usage or configuration, `2` data
/// or I/O, `3` divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert(a) => cmd_convert(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Grid(a) => cmd_grid(&a).map(|_| ()),
        Command::Gates(a) => cmd_gates(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

pub fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let corpus = read_conll_columns(&a.input, a.token_column, a.tag_column)?;
    let corpus = match a.from {
        TagScheme::Bio => {
            let (c, stats) = corpus.to_iobes()?;
            log::info!(
                "converted {} tokens: {} singletons, {} ends, {} repaired",
                stats.tokens,
                stats.singletons,
                stats.ends,
                stats.repaired
            );
            c
        }
        TagScheme::Iobes => {
            if let Some(i) = corpus
                .sentences
                .iter()
                .position(|s| !is_valid_iobes(&s.tags))
            {
                return Err(Error::Data(format!(
                    "{}: sentence {} is not valid IOBES",
                    a.input.display(),
                    i + 1
                )));
            }
            corpus
        }
    };
    write_conll(&corpus, &a.output)
}

fn load_config(r: &RunOverrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&r.config)?;
    if let Some(f) = r.fraction {
        cfg.fraction = f;
    }
    if let Some(o) = &r.output {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one model and writes `<output>/<mode>_<fraction>_<seed>/`.
/// On divergence the last parameters go to `<run>.diverged/`.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = load_config(&a.run)?;
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let spec = cfg.run_spec();
    let data = cfg.load_data()?;
    let dir = cfg.output_dir.join(spec.run_name());
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let diagnostics = cfg
        .output_dir
        .join(format!("{}.diverged", spec.run_name()))
        .join("checkpoint.json");
    let result = run_experiment_with_diagnostics(&data, &spec, Some(&diagnostics), |_| {})?;
    write_run_outputs(&dir, &data, &spec, &result)?;
    let m = &result.test.metrics.micro;
    println!(
        "{}: test P {:.2} R {:.2} F1 {:.2} (best epoch {}) -> {}",
        spec.model.mode,
        m.precision,
        m.recall,
        m.f1,
        result.outcome.best_epoch,
        dir.display()
    );
    Ok(dir)
}

/// Runs the grid and writes `runs.csv`, `summary.csv` and `report.txt`
/// into `<output>/grid_<fraction>/`.
pub fn cmd_grid(a: &GridArgs) -> Result<PathBuf> {
    let mut cfg = load_config(&a.run)?;
    if let Some(seeds) = &a.seeds {
        cfg.seeds = seeds.clone();
    }
    let data = cfg.load_data()?;
    let modes = grid_modes(&a.with);
    let seeds = cfg.grid_seeds();
    let total = modes.len() * seeds.len();
    let mut done = 0;
    let grid = run_grid(&data, &cfg.run_spec(), &modes, &seeds, |run, _| {
        done += 1;
        match &run.outcome {
            Ok(m) => log::info!(
                "[{done}/{total}] {} seed {}: F1 {:.2}",
                run.mode,
                run.seed,
                m.test.micro.f1
            ),
            Err(e) => log::warn!(
                "[{done}/{total}] {} seed {} failed: {e}",
                run.mode,
                run.seed
            ),
        }
    });
    let dir = cfg.output_dir.join(format!("grid_{}", cfg.fraction));
    let staging = staging_dir(&dir);
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let report = grid.report();
    write_atomic(staging.join("runs.csv"), grid.runs_csv()?.as_bytes())?;
    write_atomic(staging.join("summary.csv"), grid.summary_csv()?.as_bytes())?;
    write_atomic(staging.join("report.txt"), report.render().as_bytes())?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::rename(&staging, &dir).map_err(|e| Error::io(&dir, e))?;
    print!("{}", report.render());
    Ok(dir)
}

/// Writes the wide and long traces plus the aggregate table.
pub fn cmd_gates(a: &GatesArgs) -> Result<()> {
    let model = NerModel::load(&a.checkpoint)?;
    if !model.config.mode.is_dtn() {
        return Err(Error::Config(format!(
            "mode {} has no gates",
            model.config.mode
        )));
    }
    let corpus = read_conll_columns(&a.data, a.token_column, a.tag_column)?;
    let records = collect_gate_traces(&model, &corpus)?;
    let table = aggregate_gates(&records, a.group_by);
    let staging = staging_dir(&a.output);
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    write_atomic(
        staging.join("gate_trace_wide.csv"),
        gate_trace_wide_csv(&records)?.as_bytes(),
    )?;
    write_atomic(
        staging.join("gate_trace_long.csv"),
        gate_trace_long_csv(&records)?.as_bytes(),
    )?;
    write_atomic(staging.join("gate_table.csv"), table.to_csv()?.as_bytes())?;
    if a.output.exists() {
        fs::remove_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    }
    fs::rename(&staging, &a.output).map_err(|e| Error::io(&a.output, e))?;
    print!("{}", table.render());
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => SynthSpec::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SynthSpec::default(),
    };
    let corpora = SynthCorpora::generate(&spec, a.seed)?;
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let named = [
        ("source_train", &corpora.source_train),
        ("source_dev", &corpora.source_dev),
        ("source_test", &corpora.source_test),
        ("target_train", &corpora.target_train),
        ("target_dev", &corpora.target_dev),
        ("target_test", &corpora.target_test),
    ];
    for (name, c) in named {
        write_conll(c, a.output.join(format!("{name}.conll")))?;
    }
    println!("wrote {} corpora to {}", named.len(), a.output.display());
    Ok(())
}
