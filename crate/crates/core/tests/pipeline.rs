use std::fs;
use std::path::Path;

use foolhd_core::harness::{
    read_results_csv, run_experiment, synthesize_toy_corpus, AttackKind, CorpusManifest,
    CorpusSpec, ExperimentConfig, PathsConfig, Split,
};
use rustfft::{num_complex::Complex, FftPlanner};

/// Mean log power spectrum over 256-sample Hann frames, pooled into 32 bands.
fn spectral_profile(x: &[f64]) -> Vec<f64> {
    const N: usize = 256;
    let fft = FftPlanner::new().plan_fft_forward(N);
    let hann: Vec<f64> = (0..N)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / N as f64).cos())
        .collect();
    let mut acc = vec![0.0; N / 2];
    let mut frames = 0.0;
    for frame in x.chunks_exact(N).step_by(2) {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&hann)
            .map(|(s, w)| Complex::new(s * w, 0.0))
            .collect();
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf) {
            *a += c.norm_sqr();
        }
        frames += 1.0;
    }
    acc.chunks(4)
        .map(|b| (b.iter().sum::<f64>() / frames + 1e-9).ln())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn toy_speakers_are_separable_by_average_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_toy_corpus(&CorpusSpec::toy(11), dir.path()).unwrap();
    let n = m.n_speakers();
    let mut centroids = vec![vec![0.0; 32]; n];
    let mut counts = vec![0.0; n];
    for e in m.split(Split::Train) {
        let p = spectral_profile(m.read(e).unwrap().samples());
        centroids[e.speaker]
            .iter_mut()
            .zip(&p)
            .for_each(|(c, v)| *c += v);
        counts[e.speaker] += 1.0;
    }
    for (c, k) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= k);
    }
    let test = m.split(Split::Test);
    let hits = test
        .iter()
        .filter(|e| {
            let p = spectral_profile(m.read(e).unwrap().samples());
            let best = (0..n)
                .min_by(|&a, &b| dist(&p, &centroids[a]).total_cmp(&dist(&p, &centroids[b])))
                .unwrap();
            best == e.speaker
        })
        .count();
    let acc = hits as f64 / test.len() as f64;
    assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");
}

fn small_corpus(dir: &Path) -> CorpusManifest {
    let spec = CorpusSpec {
        n_speakers: 3,
        train_per_speaker: 4,
        test_per_speaker: 2,
        seed: 5,
    };
    synthesize_toy_corpus(&spec, &dir.join("corpus")).unwrap()
}

fn config(dir: &Path, kind: AttackKind, out: &str, workers: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        PathsConfig {
            dataset: dir.join("corpus"),
            output: dir.join(out),
            checkpoint: dir.join("clf.ckpt"),
        },
        kind,
    );
    cfg.workers = workers;
    cfg.attack.max_iterations = Some(3);
    cfg.attack.gca_channels = Some(2);
    cfg
}

fn train_once(dir: &Path) {
    let mut cfg = config(dir, AttackKind::Fgsm, "trained", 1);
    cfg.train_first = true;
    cfg.train.epochs = 4;
    cfg.classifier.channels = 8;
    cfg.classifier.attention_dim = 4;
    cfg.classifier.fc = vec![8];
    run_experiment(&cfg, 1).unwrap();
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![];
    for name in ["results.csv", "summary.json"] {
        files.push((name.to_owned(), fs::read(dir.join(name)).unwrap()));
    }
    let mut wavs: Vec<_> = fs::read_dir(dir.join("adv"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    wavs.sort();
    for w in wavs {
        files.push((
            w.file_name().unwrap().to_string_lossy().into_owned(),
            fs::read(&w).unwrap(),
        ));
    }
    files
}

#[test]
fn runs_are_byte_identical_and_worker_count_is_irrelevant() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    train_once(dir.path());
    for kind in [AttackKind::Foolhd, AttackKind::Bim] {
        let a = run_experiment(&config(dir.path(), kind, "a", 1), 42).unwrap();
        let b = run_experiment(&config(dir.path(), kind, "b", 1), 42).unwrap();
        let c = run_experiment(&config(dir.path(), kind, "c", 3), 42).unwrap();
        assert_eq!(a.input_hash, b.input_hash);
        let (fa, fb, fc) = (
            artifacts(&a.output),
            artifacts(&b.output),
            artifacts(&c.output),
        );
        assert_eq!(fa.len(), 2 + 6);
        assert_eq!(fa, fb, "{}", kind.name());
        // worker count is not part of the summary, so everything matches
        assert_eq!(fa, fc, "{}", kind.name());
        assert!(!a.output.join("INCOMPLETE").exists());
        let log = fs::read_to_string(c.output.join("run.log")).unwrap();
        assert!(log.contains("workers=3") && log.contains("status=complete"));
    }
}

#[test]
fn summary_matches_recomputation_from_the_table() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    train_once(dir.path());
    let out = run_experiment(&config(dir.path(), AttackKind::Fgsm, "run", 1), 3).unwrap();
    let records = read_results_csv(&out.output.join("results.csv")).unwrap();
    assert_eq!(records, out.report.records);
    let success = records
        .iter()
        .filter(|r| r.prediction_adv != r.speaker)
        .count() as f64
        / records.len() as f64;
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.output.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["aggregates"]["S"].as_f64().unwrap(), success);
    assert_eq!(summary["aggregates"]["clips"], 6);
    assert_eq!(summary["seed"], 3);
    assert!(summary.get("workers").is_none());
}

#[test]
fn a_different_seed_changes_the_input_hash() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    train_once(dir.path());
    let a = run_experiment(&config(dir.path(), AttackKind::Fgsm, "a", 1), 1).unwrap();
    let b = run_experiment(&config(dir.path(), AttackKind::Fgsm, "b", 1), 2).unwrap();
    assert_ne!(a.input_hash, b.input_hash);
}

#[test]
fn failed_run_leaves_marker_and_log() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    fs::write(dir.path().join("clf.ckpt"), b"junk").unwrap();
    let err = run_experiment(&config(dir.path(), AttackKind::Fgsm, "run", 1), 1).unwrap_err();
    assert!(err.to_string().contains("load-checkpoint"), "{err}");
    let out = dir.path().join("run");
    assert!(out.join("INCOMPLETE").exists());
    let log = fs::read_to_string(out.join("run.log")).unwrap();
    assert!(log.contains("status=failed"));
}
