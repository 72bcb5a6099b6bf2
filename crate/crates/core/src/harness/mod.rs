//! WAV I/O, synthetic corpora, experiment configuration and orchestration.

mod config;
mod corpus;
mod experiment;
mod wav;

pub use config::{
    resolve_seed, AttackKind, AttackSettings, ClassifierWidths, ExperimentConfig, PathsConfig,
    SCHEMA_VERSION, SEED_ENV,
};
pub use corpus::{
    prepare_clip, speaker_voices, synthesize_clip, synthesize_toy_corpus, CorpusManifest,
    CorpusSpec, ManifestEntry, Split, Voice, CLIP_SAMPLES, CLIP_SECS, MANIFEST_FILE,
};
pub use experiment::{
    attack_clip, evaluate_stored, proxy_metrics, read_results_csv, report_from_run, run_experiment,
    select_test_clips, train_on_corpus, write_report, RunOutcome, ADV_DIR, INCOMPLETE_MARKER,
    RESULTS_CSV, RUN_LOG, SUMMARY_JSON,
};
pub use wav::{read_wav, write_wav};

/// Derives an independent stream seed from a master seed and a path of
/// stream identifiers (splitmix64 mixing).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}
