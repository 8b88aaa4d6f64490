// SPDX-License-Identifier: Apache-2.0

//! `logxfer` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use logxfer::checkpoint::Checkpoint;
use logxfer::config::{PipelineConfig, TOOL_NAME, TOOL_VERSION};
use logxfer::embed::materialize_all;
use logxfer::error::{Error, Result};
use logxfer::experiment::{
    experiment_lowresource, experiment_lowresource_synthetic, experiment_transfer, experiment_transfer_synthetic,
    synthetic_pair,
};
use logxfer::model::Mode;
use logxfer::pipeline::{
    embedding_table, parse_lines, read_raw_lines, read_templates, sessionize, write_splits, write_templates,
    DomainData, ParsedLine, EMBEDDINGS_FILE, LINES_FILE,
};
use logxfer::seed::derive_seed;
use logxfer::session::{read_jsonl, write_jsonl};
use logxfer::synth::generate;
use logxfer::train::{adapter_tune, evaluate_model, fine_tune, pretrain, subsample, RunMetrics};
use serde_json::json;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  configuration error (bad flags, invalid or unknown config keys)
  3  data error (missing or malformed inputs, incompatible checkpoint)
  4  training diverged (non-finite loss or gradient)

Errors are printed to stderr as one JSON object per line:
  {\"error\":\"<kind>\",\"exit_code\":<n>,\"message\":\"...\"}";

#[derive(Parser)]
#[command(name = TOOL_NAME, version = TOOL_VERSION, about = "Transformer log anomaly detection with adapter-based transfer", after_help = EXIT_CODES)]
struct Cli {
    /// Pipeline config (JSON). A `config.json` echoed by an earlier run also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent. Defaults to `full`
    /// for the stage commands and `desk` for `experiment`.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// d=768, 8 heads, FFN 3072, adapter 128, head 256.
    Full,
    /// d=128, one layer; sized for a single CPU core.
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Mine templates from a raw log file.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut parsed lines into labelled sessions and split train/dev/test.
    Sessionize(Stage),
    /// Build the template embedding table.
    Embed(Stage),
    /// Generate a paired synthetic source/target corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Lines per domain; defaults to the config's synth sizes.
        #[arg(long)]
        lines: Option<usize>,
    },
    /// Train backbone and head on a source data directory.
    Pretrain(Stage),
    /// Adapter-tune or fine-tune a pretrained checkpoint on target data.
    Tune {
        #[command(flatten)]
        stage: Stage,
        #[arg(long, value_enum)]
        mode: TuneMode,
        /// Pretrained checkpoint.
        #[arg(long)]
        from: PathBuf,
        /// Train on a uniform sample of this many training sessions.
        #[arg(long)]
        subsample_n: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write `eval.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Experiment presets.
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Args)]
struct Stage {
    #[arg(long)]
    out: PathBuf,
    /// Input data directory; defaults to --out.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Stage {
    fn data(&self) -> &Path {
        self.data.as_deref().unwrap_or(&self.out)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TuneMode {
    Adapter,
    Finetune,
}

#[derive(Args)]
struct Domains {
    /// Source data directory; synthetic when absent.
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    /// Target data directory; synthetic when absent.
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    /// Run arms concurrently.
    #[arg(long)]
    parallel_arms: bool,
}

#[derive(Subcommand)]
enum Experiment {
    /// Pretrain on the source, then compare scratch, fine-tune and adapter
    /// arms on the target.
    Transfer {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        domains: Domains,
    },
    /// Test F1 against target training-set size, several repeats per size.
    Lowresource {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "scratch,finetune,adapter")]
        modes: Vec<Mode>,
        #[command(flatten)]
        domains: Domains,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Error::config(e.kind().to_string() + ": " + first_line(&e.to_string()))),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("").trim_start_matches("error: ")
}

fn fail(e: &Error) -> ExitCode {
    let line = json!({"error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string()});
    eprintln!("{line}");
    ExitCode::from(e.exit_code() as u8)
}

fn config(cli: &Cli, default: Preset) -> Result<PipelineConfig> {
    let mut cfg = match (&cli.config, cli.preset.unwrap_or(default)) {
        (Some(path), _) => PipelineConfig::load_any(path)?,
        (None, Preset::Full) => PipelineConfig::default(),
        (None, Preset::Desk) => PipelineConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn summary(metrics: &RunMetrics) -> serde_json::Value {
    json!({
        "mode": metrics.mode,
        "trainable_params": metrics.trainable_params,
        "steps": metrics.steps(),
        "best_dev_f1": metrics.best_f1(),
        "final_dev_f1": metrics.final_f1(),
        "stopped_early": metrics.stopped_early,
        "warnings": metrics.warnings,
    })
}

fn run(cli: Cli) -> Result<()> {
    let default = match cli.command {
        Command::Experiment(_) => Preset::Desk,
        _ => Preset::Full,
    };
    let cfg = config(&cli, default)?;
    match &cli.command {
        Command::Parse { input, out } => {
            let raw = read_raw_lines(input)?;
            let parsed = parse_lines(&raw, &cfg)?;
            mkdir(out)?;
            cfg.echo(out)?;
            write_templates(out, &parsed.templates)?;
            write_jsonl(&out.join(LINES_FILE), &parsed.lines)?;
            println!(
                "{}",
                json!({"lines": parsed.lines.len(), "templates": parsed.templates.len()})
            );
        }
        Command::Sessionize(stage) => {
            let lines: Vec<ParsedLine> = read_jsonl(&stage.data().join(LINES_FILE))?;
            let domain = stage
                .data()
                .file_name()
                .map_or("data".into(), |n| n.to_string_lossy().into_owned());
            let splits = sessionize(&lines, &domain, &cfg)?;
            mkdir(&stage.out)?;
            cfg.echo(&stage.out)?;
            write_splits(&stage.out, &splits)?;
            if stage.data() != stage.out {
                write_templates(&stage.out, &read_templates(stage.data())?)?;
            }
            let count = |s: &[logxfer::session::Session]| (s.len(), s.iter().filter(|x| x.label).count());
            println!(
                "{}",
                json!({"train": count(&splits.train), "dev": count(&splits.dev), "test": count(&splits.test)})
            );
        }
        Command::Embed(stage) => {
            let templates = read_templates(stage.data())?;
            let table = embedding_table(&templates, &cfg)?;
            mkdir(&stage.out)?;
            cfg.echo(&stage.out)?;
            table.save(&stage.out.join(EMBEDDINGS_FILE))?;
            println!(
                "{}",
                json!({"rows": table.rows(), "dim": table.dim(), "source": table.source_name()})
            );
        }
        Command::Synth { out, lines } => {
            let (s, t) = synthetic_pair(&cfg)?;
            cfg.echo(out)?;
            for (spec, n) in [(&s, cfg.synth.source_lines), (&t, cfg.synth.target_lines)] {
                let corpus = generate(spec, lines.unwrap_or(n))?;
                corpus.write(&out.join(&spec.name), &spec.name)?;
            }
            println!(
                "{}",
                json!({"source": out.join("source"), "target": out.join("target")})
            );
        }
        Command::Pretrain(stage) => {
            let data = DomainData::read(stage.data(), cfg.model.seq_len)?;
            let (ck, metrics) = pretrain(&data.train, &data.dev, &cfg.model, &cfg.train)?;
            write_run(&stage.out, &cfg, &ck, &metrics)?;
            println!("{}", summary(&metrics));
        }
        Command::Tune {
            stage,
            mode,
            from,
            subsample_n,
        } => {
            let backbone = Checkpoint::load(from)?;
            let data = DomainData::read(stage.data(), cfg.model.seq_len)?;
            let train = match subsample_n {
                Some(n) => {
                    let sub = subsample(&data.splits.train, *n, derive_seed(cfg.seed, "tune.subsample"))?;
                    materialize_all(&sub.sessions, &data.table, cfg.model.seq_len)?
                }
                None => data.train.clone(),
            };
            let (ck, metrics) = match mode {
                TuneMode::Adapter => adapter_tune(&backbone, &cfg.model, &train, &data.dev, &cfg.train)?,
                TuneMode::Finetune => fine_tune(&backbone, &cfg.model, &train, &data.dev, &cfg.train)?,
            };
            write_run(&stage.out, &cfg, &ck, &metrics)?;
            println!("{}", summary(&metrics));
        }
        Command::Eval {
            model,
            data,
            split,
            threshold,
            out,
        } => {
            let ck = Checkpoint::load(model)?;
            let data = DomainData::read(data, ck.model.config().seq_len)?;
            let mut tcfg = cfg.train.clone();
            tcfg.threshold = threshold.unwrap_or(cfg.eval.threshold);
            let (report, loss) = evaluate_model(&ck.model, data.matrices(split)?, &tcfg)?;
            let doc = json!({"split": split, "loss": loss, "report": report});
            if let Some(dir) = out {
                mkdir(dir)?;
                cfg.echo(dir)?;
                write_text(&dir.join("eval.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
            }
            println!("{doc}");
        }
        Command::Experiment(Experiment::Transfer { out, domains }) => {
            let report = match (&domains.source, &domains.target) {
                (Some(s), Some(t)) => {
                    let source = DomainData::read(s, cfg.model.seq_len)?;
                    let target = DomainData::read(t, cfg.model.seq_len)?;
                    experiment_transfer(&cfg, &source, &target, Some(out), domains.parallel_arms)?
                }
                _ => experiment_transfer_synthetic(&cfg, Some(out), domains.parallel_arms)?,
            };
            print!("{}", report.table());
        }
        Command::Experiment(Experiment::Lowresource {
            out,
            sizes,
            repeats,
            modes,
            domains,
        }) => {
            let sizes = sizes.clone().unwrap_or_else(|| cfg.synth.lowresource_sizes.clone());
            let repeats = repeats.unwrap_or(cfg.synth.lowresource_repeats);
            let report = match (&domains.source, &domains.target) {
                (Some(s), Some(t)) => {
                    let source = DomainData::read(s, cfg.model.seq_len)?;
                    let target = DomainData::read(t, cfg.model.seq_len)?;
                    experiment_lowresource(
                        &cfg,
                        &source,
                        &target,
                        &sizes,
                        repeats,
                        modes,
                        Some(out),
                        domains.parallel_arms,
                    )?
                }
                _ => experiment_lowresource_synthetic(&cfg, &sizes, repeats, modes, Some(out), domains.parallel_arms)?,
            };
            print!("{}", report.csv());
        }
    }
    Ok(())
}

fn write_run(dir: &Path, cfg: &PipelineConfig, ck: &Checkpoint, metrics: &RunMetrics) -> Result<()> {
    mkdir(dir)?;
    cfg.echo(dir)?;
    ck.save(&dir.join("model.ckpt"))?;
    write_text(&dir.join("metrics.jsonl"), &metrics.jsonl())
}
