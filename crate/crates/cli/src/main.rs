//! `hrig`: synthetic corpus generation, training, captioning, evaluation
//! and decoding analyses.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage or input error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hrig_core::analysis::{confidence_by_position, confidence_csv, gate_contributions, gates_csv};
use hrig_core::corpus::{group_by_video, read_jsonl, single_caption_map, write_jsonl, CaptionRecord, Corpus};
use hrig_core::embeddings::EmbeddingTable;
use hrig_core::features::VideoFeatures;
use hrig_core::lexicon::{build_lexica, Lexica};
use hrig_core::report::{evaluate, EvaluationReport};
use hrig_core::synthcorpus::{write_corpus, SynthConfig};
use hrig_core::trainer::{caption_videos, train, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "hrig", version, about = "Hallucination-aware video captioning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory
    Synth(SynthArgs),
    /// Train a captioner on a corpus
    Train(TrainArgs),
    /// Greedy-decode captions for one split
    Caption(SplitArgs),
    /// Score hypotheses: OH, AH, COAHA, BLEU-4, CIDEr-D
    Evaluate(EvaluateArgs),
    /// Mean emitted-token confidence per output position
    AnalyzeConfidence(SplitArgs),
    /// Decoder-gate means on visual vs non-visual words
    AnalyzeGates(GateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// key = value generator settings; defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// corpus directory to create
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: PathBuf,
    /// checkpoint directory
    #[arg(long)]
    out: PathBuf,
    /// drop the auxiliary heads and their loss
    #[arg(long)]
    no_heads: bool,
    /// replace every context gate by the constant 1
    #[arg(long)]
    no_gates: bool,
    /// continue the checkpoint in --out up to the configured epochs
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GateArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// directory with objects.txt and actions.txt; defaults to the checkpoint's lexica
    #[arg(long)]
    lexica: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// reference captions (JSON lines, several per video)
    #[arg(long)]
    refs: PathBuf,
    /// hypotheses (JSON lines, one per video)
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// directory with objects.txt and actions.txt; built from the references when omitted
    #[arg(long)]
    lexica: Option<PathBuf>,
    /// report JSON
    #[arg(long)]
    out: PathBuf,
}

/// Input problems that are the caller's fault.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use hrig_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Model(_) | E::NonFinite(_) | E::Autodiff(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Caption(a) => caption(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::AnalyzeConfidence(a) => analyze_confidence(a),
        Command::AnalyzeGates(a) => analyze_gates(a),
    }
}

/// Output verification failures are internal errors, not input errors.
fn verify(what: &str, r: hrig_core::Result<()>) -> anyhow::Result<()> {
    r.map_err(|e| anyhow::anyhow!("{what} failed validation: {e}"))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    write_corpus(&config, &a.out)?;
    verify("generated corpus", Corpus::open(&a.out).map(drop))?;
    println!("wrote {} videos to {}", config.num_videos, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if a.no_heads {
        config.use_heads = false;
    }
    if a.no_gates {
        config.use_gates = false;
    }
    config.validate()?;
    let corpus = Corpus::open(&a.corpus)?;
    let ck = train(&config, &corpus, &a.out, a.resume)?;
    verify(
        "checkpoint",
        Checkpoint::load(&a.out).and_then(|back| {
            let rows = fs::read_to_string(a.out.join("log.csv"))
                .map_err(|e| hrig_core::Error::Config(e.to_string()))?
                .lines()
                .count();
            if rows != back.manifest.epochs_completed + 1 {
                return Err(hrig_core::Error::Config(
                    "log.csv row count differs from completed epochs".into(),
                ));
            }
            Ok(())
        }),
    )?;
    if let Some(last) = ck.manifest.history.last() {
        println!(
            "epoch {}: l_ce {:.4} l_ah {:.4} l_cl {:.4} coaha {} bleu4 {}",
            last.epoch,
            last.l_ce,
            last.l_ah,
            last.l_cl,
            last.coaha.map_or("-".into(), |v| format!("{v:.4}")),
            last.bleu4.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    Ok(())
}

fn load_split(corpus: &Corpus, split: &str) -> anyhow::Result<Vec<VideoFeatures>> {
    let ids = corpus.split(split)?;
    if ids.is_empty() {
        return Err(Usage(format!("split {split:?} is empty")).into());
    }
    Ok(ids
        .iter()
        .map(|id| corpus.features(id))
        .collect::<hrig_core::Result<_>>()?)
}

fn open_inputs(a: &SplitArgs) -> anyhow::Result<(Checkpoint, Corpus, Vec<VideoFeatures>)> {
    let ck =
        Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let corpus = Corpus::open(&a.corpus)?;
    let videos = load_split(&corpus, &a.split)?;
    Ok((ck, corpus, videos))
}

fn caption(a: SplitArgs) -> anyhow::Result<()> {
    let (ck, _, videos) = open_inputs(&a)?;
    let hyps = caption_videos(&ck.model, &ck.vocab, &videos)?;
    let records: Vec<CaptionRecord> = hyps
        .into_iter()
        .map(|(video_id, caption)| CaptionRecord { video_id, caption })
        .collect();
    write_jsonl(&a.out, &records)?;
    let back: Vec<CaptionRecord> = read_jsonl(&a.out)?;
    let unique = single_caption_map(&back).map(|m| m.len());
    verify(
        "hypotheses",
        match unique {
            Ok(n) if n == videos.len() => Ok(()),
            Ok(n) => Err(hrig_core::Error::Config(format!(
                "{n} captions for {} videos",
                videos.len()
            ))),
            Err(e) => Err(e),
        },
    )?;
    println!("wrote {} captions to {}", records.len(), a.out.display());
    Ok(())
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!(Usage(format!("{what} {} not found", path.display())));
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    require_file(&a.refs, "reference file")?;
    require_file(&a.hyps, "hypothesis file")?;
    require_file(&a.embeddings, "embedding file")?;
    let refs: BTreeMap<String, Vec<String>> = group_by_video(&read_jsonl::<CaptionRecord>(&a.refs)?);
    let hyps = single_caption_map(&read_jsonl::<CaptionRecord>(&a.hyps)?)?;
    let table = EmbeddingTable::load(&a.embeddings, None)?;
    let lexica = match &a.lexica {
        Some(dir) => Lexica::load(dir)?,
        None => {
            let all: Vec<&String> = refs.values().flatten().collect();
            build_lexica(&all, &[], &[])?
        }
    };
    let report = evaluate(&hyps, &refs, &lexica, &table)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&a.out, &text).with_context(|| format!("writing {}", a.out.display()))?;
    let back: EvaluationReport = serde_json::from_str(&fs::read_to_string(&a.out)?)?;
    verify("report", back.validate())?;
    println!(
        "{} videos: COAHA {:.4} (OH {:.4}, AH {:.4}), BLEU-4 {:.4}, CIDEr-D {:.4}",
        report.corpus.count,
        report.corpus.mean_coaha,
        report.corpus.mean_oh,
        report.corpus.mean_ah,
        report.corpus.bleu4,
        report.corpus.cider_d
    );
    Ok(())
}

/// Re-reads a CSV and checks its header and that every row has the same width.
fn verify_csv(path: &Path, header: &str) -> anyhow::Result<()> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let ok = lines.next() == Some(header) && {
        let width = header.split(',').count();
        lines.all(|l| l.split(',').count() == width)
    };
    if !ok {
        bail!("{} failed validation", path.display());
    }
    Ok(())
}

fn analyze_confidence(a: SplitArgs) -> anyhow::Result<()> {
    let (ck, _, videos) = open_inputs(&a)?;
    let rows = confidence_by_position(&ck.model, &videos)?;
    fs::write(&a.out, confidence_csv(&rows)).with_context(|| format!("writing {}", a.out.display()))?;
    verify_csv(&a.out, "position,mean_confidence,count")?;
    println!("wrote {} positions to {}", rows.len(), a.out.display());
    Ok(())
}

fn analyze_gates(a: GateArgs) -> anyhow::Result<()> {
    let (ck, _, videos) = open_inputs(&a.split)?;
    let lexica = match &a.lexica {
        Some(dir) => Lexica::load(dir)?,
        None => ck.lexica.clone(),
    };
    let rows = gate_contributions(&ck.model, &ck.vocab, &lexica, &videos)?;
    let out = &a.split.out;
    fs::write(out, gates_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
    verify_csv(out, "class,source_gate_mean,target_gate_mean,count")?;
    for r in &rows {
        println!(
            "{:10} source {:.4} target {:.4} ({} tokens)",
            r.class.as_str(),
            r.source_gate_mean,
            r.target_gate_mean,
            r.count
        );
    }
    Ok(())
}
