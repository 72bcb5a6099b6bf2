use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use foolhd_core::harness::{
    evaluate_stored, read_results_csv, report_from_run, run_experiment, synthesize_toy_corpus,
    train_on_corpus, write_report, AttackKind, CorpusManifest, CorpusSpec, ExperimentConfig,
    PathsConfig, Split, RESULTS_CSV, SEED_ENV, SUMMARY_JSON,
};
use foolhd_core::metrics::accuracy;
use foolhd_core::nets::{load_classifier, save_classifier};
use foolhd_core::Error;

#[derive(Parser)]
#[command(
    name = "foolhd",
    version,
    about = "Adversarial attacks on speaker identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-speaker corpus.
    Synth(SynthArgs),
    /// Train the speaker classifier on a corpus.
    Train(TrainArgs),
    /// Attack the test clips of a corpus.
    Attack(AttackArgs),
    /// Score stored adversarial WAVs.
    Eval(EvalArgs),
    /// Recompute and check the aggregates of a run.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    #[arg(long, default_value_t = 20)]
    train_per_speaker: usize,
    #[arg(long, default_value_t = 10)]
    test_per_speaker: usize,
    #[arg(long, env = SEED_ENV)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Takes precedence over the environment.
    #[arg(long, env = SEED_ENV)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Time-delay layer width.
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Untargeted,
    Targeted,
}

#[derive(Args)]
struct AttackArgs {
    /// foolhd | foolhd-t | foolhd-mse | foolhd-noskip | fgsm | bim
    #[arg(default_value = "foolhd")]
    kind: String,
    /// TOML experiment file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; wins over the environment and the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Optimization steps per clip (default 500, or 1000 when targeted).
    #[arg(long = "m")]
    m: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    bim_iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gca_channels: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    test_per_speaker: Option<usize>,
    /// Train and save a classifier before attacking.
    #[arg(long)]
    train_first: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of `<clip_id>.wav` adversarial files.
    #[arg(long)]
    adv: PathBuf,
    /// Per-clip table supplying targets and iteration counts.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of an `attack` run.
    #[arg(long)]
    run: PathBuf,
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = CorpusSpec {
        n_speakers: a.speakers,
        train_per_speaker: a.train_per_speaker,
        test_per_speaker: a.test_per_speaker,
        seed: a.seed,
    };
    let m = synthesize_toy_corpus(&spec, &a.out)?;
    println!(
        "{}",
        serde_json::json!({ "clips": m.entries.len(), "speakers": m.n_speakers(), "corpus_hash": m.content_hash()? })
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::new(
        PathsConfig {
            dataset: a.corpus.clone(),
            output: PathBuf::new(),
            checkpoint: a.checkpoint.clone(),
        },
        AttackKind::Foolhd,
    );
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(c) = a.channels {
        cfg.classifier.channels = c;
    }
    let manifest = CorpusManifest::load(&a.corpus)?;
    manifest.verify()?;
    let (clf, report) =
        train_on_corpus(&manifest, &cfg, a.seed).map_err(|e| e.in_stage("train"))?;
    save_classifier(&a.checkpoint, &clf)?;
    let test = manifest.split(Split::Test);
    let mut preds = Vec::with_capacity(test.len());
    for e in &test {
        preds.push(clf.predict(&manifest.read(e)?)?.class);
    }
    let labels: Vec<usize> = test.iter().map(|e| e.speaker).collect();
    println!(
        "{}",
        serde_json::json!({
            "train_accuracy": report.train_accuracy,
            "test_accuracy": accuracy(&preds, &labels)?,
            "epoch_loss": report.epoch_loss,
        })
    );
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let mut kind: AttackKind = a.kind.parse()?;
    match (a.mode, kind) {
        (Some(Mode::Targeted), AttackKind::Foolhd) => kind = AttackKind::FoolhdT,
        (Some(Mode::Targeted), k) if k != AttackKind::FoolhdT => {
            bail!(Error::Config(format!(
                "attack `{}` has no targeted mode",
                k.name()
            )))
        }
        (Some(Mode::Untargeted), AttackKind::FoolhdT) => {
            bail!(Error::Config(
                "`foolhd-t` is targeted; drop --mode untargeted".into()
            ))
        }
        _ => {}
    }
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let missing =
                |name: &str| Error::Config(format!("--{name} is required without --config"));
            ExperimentConfig::new(
                PathsConfig {
                    dataset: a.corpus.clone().ok_or_else(|| missing("corpus"))?,
                    output: a.out.clone().ok_or_else(|| missing("out"))?,
                    checkpoint: a.checkpoint.clone().ok_or_else(|| missing("checkpoint"))?,
                },
                kind,
            )
        }
    };
    if a.config.is_some() && (a.kind != "foolhd" || a.mode.is_some()) {
        cfg.attack.kind = kind;
    }
    if let Some(p) = a.corpus {
        cfg.paths.dataset = p;
    }
    if let Some(p) = a.out {
        cfg.paths.output = p;
    }
    if let Some(p) = a.checkpoint {
        cfg.paths.checkpoint = p;
    }
    let s = &mut cfg.attack;
    s.max_iterations = a.m.or(s.max_iterations);
    s.epsilon = a.epsilon.or(s.epsilon);
    s.bim_iterations = a.bim_iterations.or(s.bim_iterations);
    s.lr = a.lr.or(s.lr);
    s.gca_channels = a.gca_channels.or(s.gca_channels);
    cfg.workers = a.workers.unwrap_or(cfg.workers);
    cfg.test_per_speaker = a.test_per_speaker.or(cfg.test_per_speaker);
    cfg.train_first |= a.train_first;
    let seed = cfg.resolve_seed(a.seed)?;
    let outcome = run_experiment(&cfg, seed)?;
    let a = &outcome.report.aggregates;
    println!(
        "{}",
        serde_json::json!({
            "output": outcome.output,
            "clips": a.clips,
            "Acc_clean": a.acc_clean,
            "Acc_adv": a.acc_adv,
            "S": a.s,
            "S_t": a.s_t,
            "wall_clock_secs": outcome.wall_clock_secs,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = CorpusManifest::load(&a.corpus)?;
    let clf = load_classifier(&a.checkpoint)?;
    let previous = a.results.as_deref().map(read_results_csv).transpose()?;
    let report = evaluate_stored(&manifest, &clf, &a.adv, previous.as_deref())
        .map_err(|e| e.in_stage("eval"))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_report(&a.out, "eval", &report)?;
    println!("{}", serde_json::to_string(&report.aggregates)?);
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let recomputed = report_from_run(&a.run).map_err(|e| e.in_stage("report"))?;
    let summary_path = a.run.join(SUMMARY_JSON);
    let text = std::fs::read_to_string(&summary_path)
        .with_context(|| format!("reading {}", summary_path.display()))?;
    let summary: serde_json::Value = serde_json::from_str(&text)?;
    let stored = &summary["aggregates"];
    let fresh = serde_json::to_value(&recomputed)?;
    if *stored != fresh {
        bail!(Error::Format(format!(
            "aggregates in {} do not match {}",
            summary_path.display(),
            a.run.join(RESULTS_CSV).display()
        )));
    }
    println!("{}", serde_json::to_string(&recomputed)?);
    Ok(())
}

/// One JSON line on stderr: `{"error": {"stage", "kind", "message"}}`.
fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let core = err.chain().find_map(|e| e.downcast_ref::<Error>());
    let (stage, inner) = match core {
        Some(Error::Stage { stage, source }) => (Some(*stage), Some(source.as_ref())),
        other => (None, other),
    };
    let kind = match inner {
        Some(Error::Contract(_)) => "contract",
        Some(Error::Domain(_)) => "domain",
        Some(Error::Io { .. }) => "io",
        Some(Error::Format(_)) => "format",
        Some(Error::Config(_)) => "config",
        Some(Error::Stage { .. }) => "stage",
        None => "other",
    };
    // Stage errors already render their source; anyhow's alternate form would repeat it.
    let message = match core {
        Some(e) => e.to_string(),
        None => format!("{err:#}"),
    };
    serde_json::json!({ "error": { "stage": stage, "kind": kind, "message": message } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
