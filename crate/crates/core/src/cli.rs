//! Command-line interface. [`run`] returns the process exit code: 0 on
//! success (including `--help`), 1 on usage errors, 2 on data or runtime
//! errors. Every subcommand first prints its resolved configuration.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    dataset_stats, generate_synthetic_dataset, read_jsonl, write_jsonl, BoundingBox,
    DatasetManifest, GeneratorConfig, SceneSample, Split,
};
use crate::eval::{evaluate, EvalOptions};
use crate::input::Vocab;
use crate::model::{load_checkpoint, ModelState};
use crate::postprocess::{correct_answer, CandidatePool, DEFAULT_MAX_NGRAM, DEFAULT_THRESHOLD};
use crate::train::{run_training, DirectorySink, RunConfig, Stage, TrainingSession};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "textvqa", version, about = "Toy text-VQA pipeline: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its manifest and vocabulary.
    Synth(SynthArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
    /// Pre-train with generation, MLM and relation objectives.
    Pretrain(TrainArgs),
    /// Fine-tune on question answering.
    Finetune(TrainArgs),
    /// Decode answers and report accuracy before and after correction.
    Evaluate(EvalArgs),
    /// Correct answers against their scene tokens.
    Correct(CorrectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Pretrain,
    Finetune,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Pretrain => Split::Pretrain,
            SplitArg::Finetune => Split::Finetune,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, clap::Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Output JSONL path; the manifest and vocabulary are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Generator settings as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    answer_from_ocr_fraction: Option<f64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Pretrain)]
    split: SplitArg,
}

#[derive(Debug, clap::Args, Serialize)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, clap::Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints, metrics and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// JSON or TOML file with `train`, `adv` and `model` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from these weights with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue an interrupted run (weights, optimizer and step).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override `train.total_steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Override `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Vocabulary file; defaults to the one named in the dataset manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, clap::Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Summary JSON output.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Per-sample JSONL output.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    no_postprocess: bool,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, value_parser = clap::value_parser!(u8).range(0..=100))]
    threshold: u8,
    #[arg(long, default_value_t = DEFAULT_MAX_NGRAM)]
    max_ngram: usize,
    #[arg(long, default_value_t = 8)]
    max_answer_len: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, clap::Args, Serialize)]
struct CorrectArgs {
    /// JSONL of `{image_id, answer, scene_tokens}`.
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, value_parser = clap::value_parser!(u8).range(0..=100))]
    threshold: u8,
    #[arg(long, default_value_t = DEFAULT_MAX_NGRAM)]
    max_ngram: usize,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let _ = write!(err, "{}", e.render());
            if let Some(help) = subcommand_help(&argv) {
                let _ = write!(err, "\n{help}");
            }
            return 1;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn subcommand_help(argv: &[OsString]) -> Option<String> {
    let mut cmd = Cli::command();
    let name = argv.iter().skip(1).find_map(|a| {
        let a = a.to_str()?;
        cmd.find_subcommand(a).map(|_| a.to_string())
    })?;
    Some(cmd.find_subcommand_mut(&name)?.render_help().to_string())
}

fn echo<T: Serialize>(out: &mut dyn Write, command: &str, config: &T) -> Result<()> {
    writeln!(out, "resolved config ({command}):")?;
    writeln!(out, "{}", serde_json::to_string_pretty(config)?)?;
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Stats(a) => stats(a, out),
        Command::Pretrain(a) => train(a, Stage::Pretrain, out),
        Command::Finetune(a) => train(a, Stage::Finetune, out),
        Command::Evaluate(a) => eval_cmd(a, out),
        Command::Correct(a) => correct(a, out),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
        None => GeneratorConfig::default(),
    };
    if let Some(f) = a.answer_from_ocr_fraction {
        cfg.answer_from_ocr_fraction = f;
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a SynthArgs,
        generator: &'a GeneratorConfig,
    }
    echo(out, "synth", &Resolved { args: &a, generator: &cfg })?;
    let samples = generate_synthetic_dataset(a.seed, a.n, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_jsonl(&a.out, &samples)?;
    let vocab_path = a.out.with_extension("vocab.txt");
    Vocab::build(cfg.inventory()).save(&vocab_path)?;
    let manifest = DatasetManifest {
        n_samples: samples.len(),
        d_feat: cfg.d_feat,
        vocab_path: file_name(&vocab_path),
        split: a.split.into(),
    };
    manifest.save(&DatasetManifest::path_for(&a.out))?;
    writeln!(out, "wrote {} samples to {}", samples.len(), a.out.display())?;
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Samples plus the manifest, when one sits next to the dataset.
fn load_dataset(path: &Path) -> Result<(Vec<SceneSample>, Option<DatasetManifest>)> {
    let manifest_path = DatasetManifest::path_for(path);
    let manifest = if manifest_path.exists() {
        Some(DatasetManifest::load(&manifest_path)?)
    } else {
        None
    };
    let samples = read_jsonl(path, manifest.as_ref().map(|m| m.d_feat))?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(m) = &manifest {
        if m.n_samples != samples.len() {
            return Err(Error::Schema(format!(
                "manifest lists {} samples, file has {}",
                m.n_samples,
                samples.len()
            )));
        }
    }
    Ok((samples, manifest))
}

fn stats(a: StatsArgs, out: &mut dyn Write) -> Result<()> {
    echo(out, "stats", &a)?;
    let (samples, _) = load_dataset(&a.data)?;
    write!(out, "{}", dataset_stats(&samples)?.report())?;
    Ok(())
}

fn dataset_texts(samples: &[SceneSample]) -> Vec<String> {
    let mut texts = Vec::new();
    for s in samples {
        texts.extend(s.image_text.iter().cloned());
        texts.extend(s.objects.iter().map(|o| o.text.clone()));
        texts.extend(s.scene_tokens.iter().map(|t| t.text.clone()));
        texts.extend(s.question.iter().cloned());
        texts.extend(s.answers.iter().flatten().cloned());
    }
    texts
}

fn train(a: TrainArgs, stage: Stage, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.train.stage = stage;
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let (samples, manifest) = load_dataset(&a.data)?;
    let d_feat = samples
        .iter()
        .find_map(SceneSample::d_feat)
        .or(manifest.as_ref().map(|m| m.d_feat))
        .ok_or_else(|| Error::Schema("dataset has no visual features".into()))?;

    let (session, vocab) = if let Some(p) = &a.resume {
        TrainingSession::from_checkpoint(load_checkpoint(p, DType::F32)?)?
    } else if let Some(p) = &a.init {
        let ck = load_checkpoint(p, DType::F32)?;
        (TrainingSession::new(ck.state)?, ck.vocab)
    } else {
        let vocab = match (&a.vocab, &manifest) {
            (Some(p), _) => Vocab::load(p)?,
            (None, Some(m)) if !m.vocab_path.is_empty() => {
                let dir = a.data.parent().unwrap_or(Path::new(""));
                Vocab::load(&dir.join(&m.vocab_path))?
            }
            _ => Vocab::build(dataset_texts(&samples)),
        };
        cfg.model.vocab_size = vocab.len();
        cfg.model.d_feat = d_feat;
        let state = ModelState::new(cfg.model.clone(), cfg.train.seed, DType::F32)?;
        (TrainingSession::new(state)?, vocab)
    };
    cfg.model = session.state.config().clone();
    cfg.validate()?;

    writeln!(out, "resolved config ({stage}):")?;
    let resolved = cfg.to_toml();
    writeln!(out, "{resolved}")?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), &resolved)?;

    let metrics_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(a.out.join("metrics.jsonl"))?;
    let mut metrics = BufWriter::new(metrics_file);
    let mut sink = DirectorySink::new(&a.out);
    let outcome = run_training(
        &samples,
        &vocab,
        session,
        &cfg.train,
        &cfg.adv,
        &mut sink,
        &mut |m| {
            serde_json::to_writer(&mut metrics, m)?;
            writeln!(metrics)?;
            Ok(())
        },
    )?;
    metrics.flush()?;
    if let Some(last) = outcome.history.last() {
        writeln!(
            out,
            "step {}: total {:.4} gen {:.4} skipped {}",
            last.step, last.total, last.gen, last.skipped
        )?;
    }
    writeln!(out, "checkpoint: {}", sink.last_path().display())?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    echo(out, "evaluate", &a)?;
    let (samples, _) = load_dataset(&a.data)?;
    let ck = load_checkpoint(&a.checkpoint, DType::F32)?;
    let opts = EvalOptions {
        postprocess: !a.no_postprocess,
        threshold: a.threshold,
        max_ngram: a.max_ngram,
        max_answer_len: a.max_answer_len,
        batch_size: a.batch_size,
    };
    let (summary, records) = evaluate(&samples, &ck.state, &ck.vocab, &opts)?;
    let summary_json = serde_json::to_string_pretty(&summary)?;
    if let Some(p) = &a.summary {
        std::fs::write(p, format!("{summary_json}\n"))?;
    }
    if let Some(p) = &a.records {
        let mut w = BufWriter::new(File::create(p)?);
        for r in &records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    writeln!(out, "{summary_json}")?;
    Ok(())
}

/// A scene token given either as bare text or with its box.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum TokenInput {
    Text(String),
    Boxed {
        text: String,
        #[serde(rename = "box")]
        bbox: Vec<f64>,
    },
}

#[derive(Debug, Deserialize)]
struct CorrectionInput {
    image_id: String,
    answer: String,
    scene_tokens: Vec<TokenInput>,
}

#[derive(Debug, Serialize)]
struct CorrectionOutput {
    image_id: String,
    #[serde(flatten)]
    result: crate::postprocess::CorrectionResult,
}

/// Boxed tokens are put in reading order; bare strings keep their order and
/// follow the boxed ones.
fn reading_order(tokens: &[TokenInput]) -> Result<Vec<String>> {
    let mut boxed = Vec::new();
    let mut bare = Vec::new();
    for t in tokens {
        match t {
            TokenInput::Text(s) => bare.push(s.clone()),
            TokenInput::Boxed { text, bbox } => boxed.push((BoundingBox::from_slice(bbox)?, text.clone())),
        }
    }
    boxed.sort_by(|(a, _), (b, _)| a.y1.total_cmp(&b.y1).then(a.x1.total_cmp(&b.x1)));
    Ok(boxed.into_iter().map(|(_, t)| t).chain(bare).collect())
}

fn correct(a: CorrectArgs, out: &mut dyn Write) -> Result<()> {
    echo(out, "correct", &a)?;
    let reader = BufReader::new(File::open(&a.input)?);
    let mut results = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorrectionInput = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?;
        let pool = CandidatePool::from_texts(&reading_order(&rec.scene_tokens)?, a.max_ngram);
        results.push(CorrectionOutput {
            image_id: rec.image_id,
            result: correct_answer(&rec.answer, &pool, a.threshold),
        });
    }
    let mut text = String::new();
    for r in &results {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match &a.output {
        Some(p) => std::fs::write(p, text)?,
        None => write!(out, "{text}")?,
    }
    Ok(())
}
