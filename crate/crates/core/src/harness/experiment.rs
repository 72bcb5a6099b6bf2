use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{AttackKind, ExperimentConfig, PathsConfig, SCHEMA_VERSION};
use super::corpus::{CorpusManifest, ManifestEntry, Split};
use super::derive_seed;
use super::wav::{read_wav, write_wav};
use crate::attacks::{bim_attack, fgsm_attack, foolhd_attack, AttackConfig, AttackResult};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::losses::{targeted_margin_values, untargeted_margin_values};
use crate::metrics::{
    aggregate, log_spectral_distance, mfcc_cosine_distance, segmental_snr, Aggregates, ClipRecord,
    EvaluationReport, LSD_HOP, LSD_N_FFT, SEG_SNR_FRAME, SEG_SNR_HOP,
};
use crate::nets::{
    encode_classifier, load_classifier, save_classifier, train_classifier, SpeakerClassifier,
    TrainingReport,
};

pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const RUN_LOG: &str = "run.log";
pub const ADV_DIR: &str = "adv";
/// Present while a run is in progress or after it failed.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Aggregate file contents. Execution details (paths, worker count,
/// timing) live in the run log so reruns compare byte for byte.
#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    attack: &'a str,
    seed: u64,
    attack_config: &'a AttackConfig,
    front_end: &'a crate::dsp::MfccConfig,
    corpus_hash: &'a str,
    checkpoint_hash: &'a str,
    aggregates: &'a Aggregates,
}

/// Files and figures of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: EvaluationReport,
    pub training: Option<TrainingReport>,
    pub output: PathBuf,
    pub input_hash: String,
    pub wall_clock_secs: f64,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Imperceptibility proxies of one adversarial clip.
pub fn proxy_metrics(x: &AudioClip, x_adv: &AudioClip) -> Result<(f64, f64, f64)> {
    Ok((
        segmental_snr(x, x_adv, SEG_SNR_FRAME, SEG_SNR_HOP)?,
        log_spectral_distance(x, x_adv, LSD_N_FFT, LSD_HOP)?,
        mfcc_cosine_distance(x, x_adv)?,
    ))
}

/// Runs the configured attack on one clip.
pub fn attack_clip(
    kind: AttackKind,
    cfg: &AttackConfig,
    clf: &SpeakerClassifier,
    clip: &AudioClip,
    label: usize,
    seed: u64,
) -> Result<AttackResult> {
    match kind {
        AttackKind::Fgsm => fgsm_attack(clip, label, clf, cfg.epsilon),
        AttackKind::Bim => bim_attack(clip, label, clf, cfg.epsilon, cfg.bim_iterations),
        _ => foolhd_attack(
            clip,
            label,
            clf,
            cfg,
            None,
            &mut ChaCha8Rng::seed_from_u64(seed),
        ),
    }
}

fn record_for(
    entry: &ManifestEntry,
    clean: usize,
    x: &AudioClip,
    r: &AttackResult,
) -> Result<ClipRecord> {
    let (seg, lsd, cos) = proxy_metrics(x, &r.adversarial)?;
    Ok(ClipRecord {
        clip_id: entry.clip_id.clone(),
        speaker: entry.speaker,
        prediction_clean: clean,
        prediction_adv: r.prediction,
        target: r.target,
        success: r.success,
        perceptual: r.perceptual,
        adversarial: r.adversarial_loss,
        iterations: r.iterations,
        seg_snr_db: seg,
        lsd_db: lsd,
        mfcc_cos_dist: cos,
        pesq: None,
        jnd: None,
    })
}

/// Test entries to attack, in manifest order.
pub fn select_test_clips(
    manifest: &CorpusManifest,
    per_speaker: Option<usize>,
) -> Vec<(usize, ManifestEntry)> {
    let mut seen = vec![0usize; manifest.n_speakers()];
    manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Test)
        .filter(|(_, e)| {
            seen[e.speaker] += 1;
            per_speaker.map_or(true, |n| seen[e.speaker] <= n)
        })
        .map(|(i, e)| (i, e.clone()))
        .collect()
}

/// Trains a classifier on the training split.
pub fn train_on_corpus(
    manifest: &CorpusManifest,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(SpeakerClassifier, TrainingReport)> {
    let train = manifest.split(Split::Train);
    let clips = train
        .par_iter()
        .map(|e| manifest.read(e).map(|c| (c, e.speaker)))
        .collect::<Result<Vec<_>>>()?;
    let model = cfg
        .classifier
        .model_config(cfg.front_end.feature_dim(), manifest.n_speakers());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    train_classifier(&clips, &cfg.front_end, Some(model), &cfg.train, &mut rng)
}

fn write_csv(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a per-clip table written by a run.
pub fn read_results_csv(path: &Path) -> Result<Vec<ClipRecord>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ClipRecord>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Train (if asked), attack every selected test clip, score, and write
/// `results.csv`, `summary.json`, `run.log` and `adv/*.wav` under the
/// output directory. Any failure is tagged with its stage and leaves the
/// `INCOMPLETE` marker in place.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate().map_err(|e| e.in_stage("validate"))?;
    let out = cfg.paths.output.clone();
    let adv_dir = out.join(ADV_DIR);
    fs::create_dir_all(&adv_dir).map_err(|e| Error::io(&adv_dir, e).in_stage("prepare-output"))?;
    let marker = out.join(INCOMPLETE_MARKER);
    write_file(&marker, b"run in progress or failed\n")
        .map_err(|e| e.in_stage("prepare-output"))?;
    let log_path = out.join(RUN_LOG);
    let mut log = String::new();
    let result = run_stages(cfg, seed, &out, &mut log, started);
    match &result {
        Ok(o) => {
            log.push_str(&format!(
                "wall_clock_secs={:.3}\nstatus=complete\n",
                o.wall_clock_secs
            ));
        }
        Err(e) => log.push_str(&format!("status=failed\nerror={e}\n")),
    }
    write_file(&log_path, log.as_bytes())?;
    if result.is_ok() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    result
}

fn run_stages(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    log: &mut String,
    started: Instant,
) -> Result<RunOutcome> {
    let attack = cfg.attack.resolve();
    log.push_str(&format!(
        "attack={}\nseed={seed}\nworkers={}\n",
        cfg.attack.kind.name(),
        cfg.workers
    ));
    if cfg.attack.kind.is_baseline() {
        log.push_str(&format!(
            "epsilon={}\nbim_iterations={}\n",
            attack.epsilon, attack.bim_iterations
        ));
    } else {
        log.push_str(&format!(
            "M={}\ngca_channels={}\n",
            attack.max_iterations, attack.gca_channels
        ));
    }

    let manifest =
        CorpusManifest::load(&cfg.paths.dataset).map_err(|e| e.in_stage("load-corpus"))?;
    manifest.verify().map_err(|e| e.in_stage("load-corpus"))?;
    let corpus_hash = manifest
        .content_hash()
        .map_err(|e| e.in_stage("load-corpus"))?;

    let (clf, training) = if cfg.train_first {
        let (clf, report) =
            train_on_corpus(&manifest, cfg, seed).map_err(|e| e.in_stage("train"))?;
        save_classifier(&cfg.paths.checkpoint, &clf).map_err(|e| e.in_stage("train"))?;
        (clf, Some(report))
    } else {
        (
            load_classifier(&cfg.paths.checkpoint).map_err(|e| e.in_stage("load-checkpoint"))?,
            None,
        )
    };
    if clf.n_classes() != manifest.n_speakers() {
        return Err(Error::Config(format!(
            "classifier has {} classes, corpus has {} speakers",
            clf.n_classes(),
            manifest.n_speakers()
        ))
        .in_stage("load-checkpoint"));
    }
    let checkpoint_hash = sha_hex(&encode_classifier(&clf));
    let mut h = Sha256::new();
    // where files live and how many threads run do not change the results
    let mut canonical = cfg.clone();
    canonical.paths = PathsConfig::default();
    canonical.workers = 1;
    canonical.seed = None;
    h.update(canonical.to_toml());
    h.update(seed.to_le_bytes());
    h.update(&corpus_hash);
    h.update(&checkpoint_hash);
    let input_hash = hex::encode(h.finalize());
    log.push_str(&format!(
        "corpus_hash={corpus_hash}\ncheckpoint_hash={checkpoint_hash}\ninput_hash={input_hash}\n"
    ));
    log.push_str("config<<\n");
    log.push_str(&cfg.to_toml());
    log.push_str(">>\n");

    let jobs = select_test_clips(&manifest, cfg.test_per_speaker);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")).in_stage("attack"))?;
    let adv_dir = out.join(ADV_DIR);
    let rows: Vec<ClipRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|(idx, entry)| -> Result<ClipRecord> {
                let x = manifest.read(entry).map_err(|e| e.in_stage("attack"))?;
                let clean = clf.predict(&x).map_err(|e| e.in_stage("attack"))?.class;
                let r = attack_clip(
                    cfg.attack.kind,
                    &attack,
                    &clf,
                    &x,
                    entry.speaker,
                    derive_seed(seed, &[2, *idx as u64]),
                )
                .map_err(|e| e.in_stage("attack"))?;
                write_wav(
                    &adv_dir.join(format!("{}.wav", entry.clip_id)),
                    &r.adversarial,
                )
                .map_err(|e| e.in_stage("write"))?;
                record_for(entry, clean, &x, &r).map_err(|e| e.in_stage("metrics"))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let report = EvaluationReport::from_records(rows).map_err(|e| e.in_stage("metrics"))?;
    write_csv(&out.join(RESULTS_CSV), &report.records).map_err(|e| e.in_stage("write"))?;
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        attack: cfg.attack.kind.name(),
        seed,
        attack_config: &attack,
        front_end: &cfg.front_end,
        corpus_hash: &corpus_hash,
        checkpoint_hash: &checkpoint_hash,
        aggregates: &report.aggregates,
    };
    let mut json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Format(e.to_string()).in_stage("write"))?;
    json.push('\n');
    write_file(&out.join(SUMMARY_JSON), json.as_bytes()).map_err(|e| e.in_stage("write"))?;
    if let Some(t) = &training {
        log.push_str(&format!(
            "train_accuracy={}\nfinal_epoch_loss={}\n",
            t.train_accuracy,
            t.epoch_loss.last().copied().unwrap_or(f64::NAN)
        ));
    }
    Ok(RunOutcome {
        report,
        training,
        output: out.to_path_buf(),
        input_hash,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Re-scores stored adversarial WAVs (`<adv_dir>/<clip_id>.wav`) against
/// the corpus. Targets and iteration counts are taken from `previous` rows
/// when given.
pub fn evaluate_stored(
    manifest: &CorpusManifest,
    clf: &SpeakerClassifier,
    adv_dir: &Path,
    previous: Option<&[ClipRecord]>,
) -> Result<EvaluationReport> {
    let jobs: Vec<&ManifestEntry> = manifest
        .split(Split::Test)
        .into_iter()
        .filter(|e| adv_dir.join(format!("{}.wav", e.clip_id)).is_file())
        .collect();
    if jobs.is_empty() {
        return Err(Error::Config(format!(
            "no adversarial clips found in {}",
            adv_dir.display()
        )));
    }
    let rows = jobs
        .par_iter()
        .map(|e| -> Result<ClipRecord> {
            let x = manifest.read(e)?;
            let adv = read_wav(&adv_dir.join(format!("{}.wav", e.clip_id)))?;
            let prev = previous.and_then(|p| p.iter().find(|r| r.clip_id == e.clip_id));
            let target = prev.and_then(|r| r.target);
            let clean = clf.predict(&x)?.class;
            let pred = clf.predict(&adv)?;
            let adversarial = match target {
                Some(t) => targeted_margin_values(&pred.logits, t)?,
                None => untargeted_margin_values(&pred.logits, e.speaker)?,
            };
            let (seg, lsd, cos) = proxy_metrics(&x, &adv)?;
            let frames = crate::dsp::MfccPipeline::new(crate::dsp::MfccConfig::perceptual())?
                .frame_count(x.len());
            Ok(ClipRecord {
                clip_id: e.clip_id.clone(),
                speaker: e.speaker,
                prediction_clean: clean,
                prediction_adv: pred.class,
                target,
                success: adversarial < 0.0,
                perceptual: cos * frames as f64,
                adversarial,
                iterations: prev.map_or(0, |r| r.iterations),
                seg_snr_db: seg,
                lsd_db: lsd,
                mfcc_cos_dist: cos,
                pesq: None,
                jnd: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvaluationReport::from_records(rows)
}

/// Writes an evaluation table and its aggregates.
pub fn write_report(dir: &Path, stem: &str, report: &EvaluationReport) -> Result<()> {
    write_csv(&dir.join(format!("{stem}.csv")), &report.records)?;
    let mut json = serde_json::to_string_pretty(&report.aggregates)
        .map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_file(&dir.join(format!("{stem}.json")), json.as_bytes())
}

/// Recomputes aggregates from a run directory's per-clip table.
pub fn report_from_run(dir: &Path) -> Result<Aggregates> {
    aggregate(&read_results_csv(&dir.join(RESULTS_CSV))?)
}
