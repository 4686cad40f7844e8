//! `xcsrl`: dataset statistics, staged pre-training, CSRL training,
//! evaluation and prediction.
//!
//! Exit codes: 0 success, 1 other failure, 2 data error, 3 stage order or
//! missing prerequisite checkpoint, 4 checkpoint mismatch.

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use xcsrl::corpus::{compute_stats, load_dialogues_open, load_dialogues_with, load_parallel, load_srl, write_frames};
use xcsrl::trainer::{check_labels, evaluate, predict_frames, pretrain, train_csrl};
use xcsrl::{Checkpoint, Error, LabelInventory, Metrics, PretrainData, Stage};

use config::{Preset, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "xcsrl", version, about = "Cross-lingual conversational semantic role labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print corpus statistics of a dialogue file.
    Stats {
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Run one pre-training stage (clm, sc, pa) and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Fine-tune on annotated dialogues and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint against gold frames.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Tag every frame's predicate and write predicted frames as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat TOML file whose keys are training or model config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set batch_size=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON-lines metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long, value_parser = ["clm", "sc", "pa"])]
    stage: String,
    /// Train every objective jointly with nothing frozen.
    #[arg(long)]
    end2end: bool,
    /// Tab-separated parallel sentence pairs (clm stage).
    #[arg(long)]
    parallel: Option<PathBuf>,
    /// Dialogue file (sc stage); frames are ignored.
    #[arg(long)]
    dialogues: Option<PathBuf>,
    /// Single-sentence SRL file (pa stage).
    #[arg(long)]
    srl: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Development set for early stopping; the training set when omitted.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Pre-trained or previously fine-tuned checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Keep the backbone fixed.
    #[arg(long)]
    freeze_lm: bool,
    /// Extra roles beyond the shared inventory, comma separated.
    #[arg(long, value_delimiter = ',')]
    roles: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.preset, self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn metrics_sink(&self) -> Result<Option<BufWriter<File>>> {
        self.metrics
            .as_ref()
            .map(|p| File::create(p).map(BufWriter::new).with_context(|| format!("creating {}", p.display())))
            .transpose()
    }
}

fn load_init(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    Ok(path.map(Checkpoint::load).transpose()?)
}

fn cmd_stats(data: &Path, format: Format) -> Result<()> {
    let (dataset, _) = load_dialogues_open(data)?;
    let st = compute_stats(&dataset);
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&st)?),
        Format::Text => {
            println!("dialogues             {}", st.dialogues);
            println!("utterances            {}", st.utterances);
            println!("predicates            {}", st.predicates);
            println!("arguments             {}", st.arguments);
            println!("cross-turn arguments  {}", st.cross_arguments);
            println!("tokens per utterance  {:.2}", st.tokens_per_utterance);
            println!("cross ratio           {:.2}%", 100.0 * st.cross_ratio);
        }
    }
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    let stage: Stage = args.stage.parse()?;
    cfg.train.stage = stage;
    cfg.train.end2end |= args.end2end;
    let init = load_init(args.init.as_deref())?;

    let mut data = PretrainData::default();
    if let Some(p) = &args.parallel {
        data.parallel = load_parallel(p)?;
    }
    if let Some(p) = &args.dialogues {
        let (d, _) = load_dialogues_open(p)?;
        data.dialogues = d.samples.into_iter().map(|s| s.dialogue).collect();
    }
    if let Some(p) = &args.srl {
        data.srl = load_srl(p)?.samples;
    }

    let mut sink = args.config.metrics_sink()?;
    let mut metrics = Metrics::new(sink.as_mut().map(|w| w as &mut dyn Write));
    let (checkpoint, summary) = pretrain(stage, &data, &cfg.train, &cfg.model, init.as_ref(), &mut metrics)?;
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    checkpoint.save(&args.out)?;
    info!("wrote {}", args.out.display());
    let stages: Vec<&str> = checkpoint.stages.iter().map(|s| s.name()).collect();
    println!("stages {} after {} steps", stages.join(","), summary.steps);
    for (name, loss) in &summary.final_losses {
        println!("{name:<6} {loss:.4}");
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    cfg.train.stage = Stage::Csrl;
    cfg.train.freeze_lm |= args.freeze_lm;
    let labels = LabelInventory::shared_with(&args.roles);
    let data = load_dialogues_with(&args.data, &labels)?;
    let dev = args.dev.as_ref().map(|p| load_dialogues_with(p, &labels)).transpose()?;
    let init = load_init(args.init.as_deref())?;

    let mut sink = args.config.metrics_sink()?;
    let mut metrics = Metrics::new(sink.as_mut().map(|w| w as &mut dyn Write));
    let outcome = train_csrl(&data, dev.as_ref(), &cfg.train, &cfg.model, &labels, init.as_ref(), &mut metrics)?;
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    outcome.checkpoint.save(&args.out)?;
    info!("wrote {}", args.out.display());
    println!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    print!("{}", outcome.best);
    Ok(())
}

/// Loads the checkpoint's model and a dataset whose roles it must cover.
fn model_and_data(checkpoint: &Path, data: &Path) -> Result<(xcsrl::CsrlModel, xcsrl::Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    if !ck.has_stage(Stage::Csrl) {
        return Err(Error::MissingCheckpoint(format!("{} has no trained tagger", checkpoint.display())).into());
    }
    let (dataset, found) = load_dialogues_open(data)?;
    check_labels(&ck.labels, &found)?;
    Ok((ck.to_model()?, dataset))
}

fn cmd_eval(checkpoint: &Path, data: &Path, format: Format) -> Result<()> {
    let (model, dataset) = model_and_data(checkpoint, data)?;
    let report = evaluate(&model, &dataset)?;
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report.to_json())?),
        Format::Text => print!("{report}"),
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (model, dataset) = model_and_data(checkpoint, data)?;
    let frames = predict_frames(&model, &dataset)?;
    let lines = frames.iter().map(|(id, f)| (id.as_str(), f));
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
            write_frames(&mut w, lines)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            write_frames(&mut w, lines)?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.is::<io::Error>()) { 2 } else { 1 };
    };
    match e {
        Error::Record { .. }
        | Error::InvalidDialogue { .. }
        | Error::InvalidFrame { .. }
        | Error::OverlappingSpans(_)
        | Error::UnknownRole(_)
        | Error::SequenceTooLong { .. }
        | Error::CorpusTooSmall(_)
        | Error::EmptyPool(_)
        | Error::EmptyDataset
        | Error::Io(_)
        | Error::Json(_) => 2,
        Error::StageOrder(_) | Error::MissingCheckpoint(_) => 3,
        Error::CheckpointMismatch(_) | Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap's own usage errors would exit 2, which is reserved for data errors
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Stats { data, format } => cmd_stats(data, *format),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval { checkpoint, data, format } => cmd_eval(checkpoint, data, *format),
        Command::Predict { checkpoint, data, out } => cmd_predict(checkpoint, data, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
