//! `rgl`: synthesize data, train, generate, evaluate and audit gradients.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rgl_core::checkpoint::{Checkpoint, CheckpointError};
use rgl_core::config::{Config, ConfigError};
use rgl_core::dataset::{load_object_sets, synthesize, Dataset, DatasetError, Split};
use rgl_core::decoder::{DecodeMode, GateOverride};
use rgl_core::gradcheck::{audit, jitter_biases, AuditOptions};
use rgl_core::inference::{evaluate, generate_video, ClipTrace, EvalOptions, GenerateOptions};
use rgl_core::metrics::{MetricError, MetricReport};
use rgl_core::model::{LossWeights, Model, Phase, RefinedSource};
use rgl_core::training::{RunStatus, TrainError, Trainer};
use thiserror::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  invalid configuration or arguments
  3  training diverged (non-finite loss or gradient)
  4  I/O error: missing or unreadable input, corrupt checkpoint or manifest
  5  gradient audit failed";

#[derive(Parser, Debug)]
#[command(name = "rgl", version, about = "Scene-graph guided video captioning with grounding", after_help = EXIT_CODES)]
struct Cli {
    /// Flat `key = value` config file; defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic manifest to OUT/manifest.json.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training phases; writes checkpoints and log.jsonl into OUT.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/last.ckpt when present.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs (the run can be resumed).
        #[arg(long)]
        halt_after: Option<usize>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Write generation traces to OUT/traces.json.
    Generate {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split; writes OUT/report.json and OUT/report.txt.
    Evaluate {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Compute GRD. and ATT. under teacher forcing at annotated words.
        #[arg(long)]
        teacher_forced: bool,
        /// Localize only among regions of the annotated frame.
        #[arg(long)]
        restrict_gt_frame: bool,
        /// JSON map clip id -> object names used for CHAIR; defaults to the
        /// objects of each clip's language graph.
        #[arg(long)]
        hallucination_gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference audit of every gradient on a random desk batch.
    Gradcheck {
        #[arg(long)]
        out: PathBuf,
        /// Sampled coordinates per block, plus one random direction.
        #[arg(long, default_value_t = AuditOptions::default().coords_per_block)]
        coords: usize,
        /// Test hook: corrupt the analytic gradient of this block.
        #[arg(long, value_name = "BLOCK")]
        corrupt: Option<String>,
    },
    /// Render metric reports as plain-text tables into OUT/table.txt.
    Report {
        /// `report.json` files; one table row each.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Row labels, in input order; defaults to the file stems.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Graph representation fed to the decoder; defaults to the one of the
    /// checkpoint's training phase.
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    Visual,
    Language,
    Zero,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient audit failed for: {0}")]
    Audit(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Metric(_) => 2,
            CliError::Dataset(DatasetError::Config(_)) => 2,
            CliError::Checkpoint(CheckpointError::Incompatible(_)) => 2,
            CliError::Train(TrainError::Checkpoint(_) | TrainError::Io { .. }) => 4,
            CliError::Train(TrainError::EmptyTrainingSet) => 2,
            CliError::Train(_) => 3,
            CliError::Dataset(_) | CliError::Checkpoint(_) | CliError::Io { .. } => 4,
            CliError::Audit(_) => 5,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => Config::desk(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn decode_mode(beam: usize) -> Result<DecodeMode, CliError> {
    match beam {
        0 => Err(CliError::Usage("--beam must be at least 1".into())),
        1 => Ok(DecodeMode::Greedy),
        w => Ok(DecodeMode::Beam(w)),
    }
}

fn source_of(arg: Option<SourceArg>, ckpt: &Checkpoint) -> RefinedSource {
    match arg {
        Some(SourceArg::Visual) => RefinedSource::Visual,
        Some(SourceArg::Language) => RefinedSource::Language,
        Some(SourceArg::Zero) => RefinedSource::Zero,
        None => ckpt.state.phase.source(),
    }
}

fn split_of(arg: SplitArg) -> Split {
    match arg {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
    }
}

fn load_model_input(input: &ModelInput) -> Result<(Checkpoint, Dataset), CliError> {
    let ckpt = Checkpoint::load(&input.checkpoint)?;
    let data = Dataset::load(&input.manifest)?;
    let dims = rgl_core::model::ModelDims::new(&ckpt.config.model, &data);
    if dims != ckpt.model.dims {
        return Err(CheckpointError::Incompatible("manifest dimensions differ from the checkpoint's".into()).into());
    }
    Ok((ckpt, data))
}

fn cmd_synth(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let data = synthesize(&cfg.synth, cfg.seed)?;
    out_dir(out)?;
    data.save(&out.join("manifest.json"))?;
    let l = &data.vocab.labels;
    println!(
        "videos {} (+{} held out), clips {} (+{}), words {}, objects {}, attributes {}, relations {}",
        data.videos.len(),
        data.heldout.len(),
        data.n_clips(Split::Train),
        data.n_clips(Split::Heldout),
        data.vocab.len(),
        l.objects.len(),
        l.attributes.len(),
        l.relations.len()
    );
    Ok(())
}

fn cmd_train(cfg: Config, manifest: &Path, out: &Path, resume: bool, halt_after: Option<usize>, quiet: bool) -> Result<(), CliError> {
    let data = Dataset::load(manifest)?;
    out_dir(out)?;
    let last = out.join("last.ckpt");
    let mut trainer = if resume && last.exists() {
        let ckpt = Checkpoint::load(&last)?;
        ckpt.check_config(&cfg)?;
        Trainer::from_checkpoint(ckpt)?
    } else {
        Trainer::new(cfg, &data)
    };
    write(&out.join("config.txt"), trainer.config.to_text())?;
    let status = trainer.run(&data, Some(out), halt_after, &mut |e| {
        if !quiet {
            eprintln!(
                "epoch {:>3} {:<8} L_S {:.4} L_M {:.4} L_R {:.4} L_G {:.4} val CIDEr {:.3} acc {:.3}",
                e.epoch,
                format!("{:?}", e.phase).to_lowercase(),
                e.l_s,
                e.l_m,
                e.l_r,
                e.l_g,
                e.val_cider,
                e.accuracy
            );
        }
    })?;
    match status {
        RunStatus::Finished => println!(
            "finished after {} epochs; checkpoints in {}",
            trainer.state.epoch,
            out.display()
        ),
        RunStatus::Halted => println!("halted after epoch {}; resume with --resume", trainer.state.epoch),
    }
    Ok(())
}

fn traces_for(ckpt: &Checkpoint, data: &Dataset, split: Split, decode: &DecodeArgs) -> Result<Vec<ClipTrace>, CliError> {
    let opts = GenerateOptions {
        mode: decode_mode(decode.beam)?,
        source: source_of(decode.source, ckpt),
        gate: GateOverride::None,
    };
    Ok(data
        .split(split)
        .iter()
        .flat_map(|v| generate_video(&ckpt.model, &data.vocab, v, &opts))
        .collect())
}

fn cmd_generate(input: &ModelInput, decode: &DecodeArgs, out: &Path) -> Result<(), CliError> {
    let (ckpt, data) = load_model_input(input)?;
    let traces = traces_for(&ckpt, &data, split_of(input.split), decode)?;
    out_dir(out)?;
    let json = serde_json::to_string_pretty(&traces).expect("traces serialize");
    write(&out.join("traces.json"), json)?;
    for t in &traces {
        println!("{}: {}", t.clip_id, t.tokens.join(" "));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    input: &ModelInput,
    decode: &DecodeArgs,
    teacher_forced: bool,
    restrict_gt_frame: bool,
    hallucination_gt: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let (ckpt, data) = load_model_input(input)?;
    let gt: Option<BTreeMap<String, Vec<String>>> = hallucination_gt.map(load_object_sets).transpose()?;
    let opts = EvalOptions {
        mode: decode_mode(decode.beam)?,
        source: source_of(decode.source, &ckpt),
        teacher_forced,
        restrict_gt_frame,
    };
    let ev = evaluate(&ckpt.model, &data.vocab, data.split(split_of(input.split)), &opts, gt.as_ref())?;
    out_dir(out)?;
    let json = serde_json::to_string_pretty(&ev.report).expect("report serializes");
    write(&out.join("report.json"), json + "\n")?;
    let table = ev.report.to_table("RGL");
    write(&out.join("report.txt"), &table)?;
    print!("{table}");
    println!(
        "teacher-forced token accuracy {:.4}, exact sentences {:.4}",
        ev.token_accuracy, ev.exact_match
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &Config, out: &Path, coords: usize, corrupt: Option<String>) -> Result<(), CliError> {
    let mut synth = cfg.synth.clone();
    synth.n_videos = 1;
    synth.n_heldout = 0;
    let data = synthesize(&synth, cfg.seed)?;
    let mut model = Model::new(&cfg.model, &data, cfg.seed);
    jitter_biases(&mut model, 0.1, cfg.seed);
    if let Some(name) = &corrupt {
        if model.store.id(name).is_none() {
            return Err(CliError::Usage(format!("unknown parameter block {name:?}")));
        }
    }
    let videos: Vec<_> = data.videos.iter().collect();
    let opts = AuditOptions {
        seed: cfg.seed,
        coords_per_block: coords,
        corrupt,
        ..AuditOptions::default()
    };
    let report = audit(&model, &videos, &LossWeights::from(&cfg.train), &opts);
    out_dir(out)?;
    let json = serde_json::to_string_pretty(&report).expect("audit report serializes");
    write(&out.join("gradcheck.json"), json)?;
    let blocks = report.checks.len() / 5;
    println!(
        "{} block checks in both phases, max relative error {:.3e}, {:.1} s",
        blocks, report.max_rel_err, report.seconds
    );
    let mut failed: Vec<String> = report
        .failures()
        .map(|c| format!("{} ({}, {})", c.block, c.objective, phase_name(c.phase)))
        .collect();
    failed.dedup();
    if failed.is_empty() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::Audit(failed.join(", ")))
    }
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Pretrain => "pretrain",
        Phase::Full => "full",
    }
}

fn cmd_report(inputs: &[PathBuf], labels: &[String], out: &Path) -> Result<(), CliError> {
    if !labels.is_empty() && labels.len() != inputs.len() {
        return Err(CliError::Usage(format!(
            "{} labels given for {} inputs",
            labels.len(),
            inputs.len()
        )));
    }
    let mut text = String::new();
    for (i, path) in inputs.iter().enumerate() {
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        let report: MetricReport = serde_json::from_str(&raw).map_err(|e| CliError::Dataset(DatasetError::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        }))?;
        let label = labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned())
        });
        text.push_str(&report.to_table(&label));
        text.push('\n');
    }
    out_dir(out)?;
    write(&out.join("table.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out } => cmd_synth(&cfg, &out),
        Command::Train {
            manifest,
            out,
            resume,
            halt_after,
            quiet,
        } => cmd_train(cfg, &manifest, &out, resume, halt_after, quiet),
        Command::Generate { input, decode, out } => cmd_generate(&input, &decode, &out),
        Command::Evaluate {
            input,
            decode,
            teacher_forced,
            restrict_gt_frame,
            hallucination_gt,
            out,
        } => cmd_evaluate(
            &input,
            &decode,
            teacher_forced,
            restrict_gt_frame,
            hallucination_gt.as_deref(),
            &out,
        ),
        Command::Gradcheck { out, coords, corrupt } => cmd_gradcheck(&cfg, &out, coords, corrupt),
        Command::Report { inputs, labels, out } => cmd_report(&inputs, &labels, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
