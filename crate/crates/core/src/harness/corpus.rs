use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::derive_seed;
use super::wav::{read_wav, write_wav};
use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::error::{contract, Error, Result};

/// Clip length after preparation.
pub const CLIP_SECS: f64 = 4.0;
pub const CLIP_SAMPLES: usize = 32_000;
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Relative to the corpus directory.
    pub path: String,
    pub speaker: usize,
    pub split: Split,
    pub duration_secs: f64,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_err(&path, e))?;
        contract!(
            !entries.is_empty(),
            "manifest {} lists no clips",
            path.display()
        );
        Ok(Self {
            root: dir.to_path_buf(),
            entries,
        })
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn n_speakers(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.speaker + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn path_of(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    /// Reads and prepares one clip: mono 8 kHz, centre-cropped to 4 s.
    pub fn read(&self, e: &ManifestEntry) -> Result<AudioClip> {
        prepare_clip(read_wav(&self.path_of(e))?)
    }

    /// Every row resolves to a readable file of the declared rate and length.
    pub fn verify(&self) -> Result<()> {
        contract!(self.n_speakers() >= 2, "corpus needs at least 2 speakers");
        for s in 0..self.n_speakers() {
            contract!(
                self.entries
                    .iter()
                    .any(|e| e.speaker == s && e.split == Split::Test),
                "speaker {s} has no test clip"
            );
        }
        for e in &self.entries {
            let clip = read_wav(&self.path_of(e))?;
            contract!(
                clip.sample_rate() == e.sample_rate
                    && (clip.duration_secs() - e.duration_secs).abs() < 1e-9,
                "{}: file is {} s at {} Hz, manifest says {} s at {} Hz",
                e.path,
                clip.duration_secs(),
                clip.sample_rate(),
                e.duration_secs,
                e.sample_rate
            );
        }
        Ok(())
    }

    /// SHA-256 over the manifest rows and every file's bytes, in order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(serde_json::to_vec(e).expect("entry serializes"));
            let path = self.path_of(e);
            h.update(std::fs::read(&path).map_err(|err| Error::io(&path, err))?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Resamples nothing: rejects other rates and shorter clips, centre-crops
/// longer ones to [`CLIP_SAMPLES`].
pub fn prepare_clip(clip: AudioClip) -> Result<AudioClip> {
    contract!(
        clip.sample_rate() == SAMPLE_RATE,
        "clip is sampled at {} Hz; expected {SAMPLE_RATE}",
        clip.sample_rate()
    );
    contract!(
        clip.len() >= CLIP_SAMPLES,
        "clip has {} samples; at least {CLIP_SAMPLES} required",
        clip.len()
    );
    if clip.len() == CLIP_SAMPLES {
        return Ok(clip);
    }
    let start = (clip.len() - CLIP_SAMPLES) / 2;
    AudioClip::new(
        clip.samples()[start..start + CLIP_SAMPLES].to_vec(),
        SAMPLE_RATE,
    )
}

/// Size of a synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub train_per_speaker: usize,
    pub test_per_speaker: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// 10 speakers with 20 training and 10 test clips each.
    pub fn toy(seed: u64) -> Self {
        Self {
            n_speakers: 10,
            train_per_speaker: 20,
            test_per_speaker: 10,
            seed,
        }
    }
}

/// Voice parameters of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub pitch_hz: f64,
    /// Centre frequency and bandwidth of each resonance.
    pub formants: [(f64, f64); 3],
}

const PITCH_RANGE: (f64, f64) = (90.0, 250.0);
const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 900.0), (1000.0, 2300.0), (2500.0, 3600.0)];

/// Draws speaker voices. Each speaker owns a disjoint band of every range;
/// the band order is shuffled per resonance.
pub fn speaker_voices(n_speakers: usize, seed: u64) -> Vec<Voice> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x766f_6963]));
    let band = |(lo, hi): (f64, f64), slot: usize, rng: &mut ChaCha8Rng| {
        let w = (hi - lo) / n_speakers as f64;
        lo + w * (slot as f64 + 0.1 + 0.8 * rng.gen::<f64>())
    };
    let mut orders: Vec<Vec<usize>> = (0..4)
        .map(|_| {
            let mut o: Vec<usize> = (0..n_speakers).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let pitch_order = orders.pop().expect("four orders");
    (0..n_speakers)
        .map(|k| Voice {
            pitch_hz: band(PITCH_RANGE, pitch_order[k], &mut rng),
            formants: std::array::from_fn(|j| {
                let f = band(FORMANT_RANGES[j], orders[j][k], &mut rng);
                (f, rng.gen_range(60.0..120.0))
            }),
        })
        .collect()
}

/// One 4 s utterance: a jittered pulse train through three parallel
/// resonators, shaped by a random syllable envelope, plus a noise floor.
pub fn synthesize_clip(voice: &Voice, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = f64::from(SAMPLE_RATE);
    let n = CLIP_SAMPLES;
    let f0 = voice.pitch_hz * (1.0 + rng.gen_range(-0.03..0.03));
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let mut source = vec![0.0; n];
    let mut phase = rng.gen::<f64>();
    for (i, s) in source.iter_mut().enumerate() {
        let f = f0 * (1.0 + 0.01 * (2.0 * PI * vib_rate * i as f64 / fs + vib_phase).sin());
        phase += f / fs;
        if phase >= 1.0 {
            phase -= 1.0;
            *s = 1.0;
        }
    }
    let aspiration = Normal::new(0.0, 0.02).expect("valid std");
    for s in &mut source {
        *s += aspiration.sample(&mut rng);
    }
    let mut voiced = vec![0.0; n];
    for &(freq, bw) in &voice.formants {
        let r = (-PI * bw / fs).exp();
        let (a1, a2) = (2.0 * r * (2.0 * PI * freq / fs).cos(), -r * r);
        let gain = 1.0 - r;
        let (mut y1, mut y2) = (0.0, 0.0);
        for (v, &x) in voiced.iter_mut().zip(&source) {
            let y = gain * x + a1 * y1 + a2 * y2;
            *v += y;
            y2 = y1;
            y1 = y;
        }
    }
    // syllables with short dips between them
    let mut target = vec![0.0; n];
    let mut pos = 0usize;
    while pos < n {
        let syl = (rng.gen_range(0.15..0.35) * fs) as usize;
        let amp = rng.gen_range(0.4..1.0);
        let end = (pos + syl).min(n);
        target[pos..end].iter_mut().for_each(|t| *t = amp);
        pos = end;
        let gap = (rng.gen_range(0.03..0.1) * fs) as usize;
        let end = (pos + gap).min(n);
        target[pos..end].iter_mut().for_each(|t| *t = 0.1);
        pos = end;
    }
    let alpha = 1.0 - (-1.0 / (0.015 * fs)).exp();
    let mut env = target[0];
    for (v, &t) in voiced.iter_mut().zip(&target) {
        env += alpha * (t - env);
        *v *= env;
    }
    let peak = voiced.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let floor = Normal::new(0.0, 0.002).expect("valid std");
    let samples = voiced
        .iter()
        .map(|v| 0.6 * v / peak + floor.sample(&mut rng))
        .collect();
    AudioClip::new(samples, SAMPLE_RATE)
        .expect("finite non-empty")
        .quantize_pcm16()
}

/// Writes a synthetic corpus and its manifest to `out_dir`.
pub fn synthesize_toy_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<CorpusManifest> {
    contract!(spec.n_speakers >= 2, "corpus needs at least 2 speakers");
    contract!(
        spec.train_per_speaker >= 1 && spec.test_per_speaker >= 1,
        "every speaker needs training and test clips"
    );
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let voices = speaker_voices(spec.n_speakers, spec.seed);
    let per = spec.train_per_speaker + spec.test_per_speaker;
    let mut entries = Vec::with_capacity(spec.n_speakers * per);
    for k in 0..spec.n_speakers {
        for i in 0..per {
            let (split, j, tag) = if i < spec.train_per_speaker {
                (Split::Train, i, "train")
            } else {
                (Split::Test, i - spec.train_per_speaker, "test")
            };
            let clip_id = format!("spk{k:02}_{tag}{j:03}");
            entries.push(ManifestEntry {
                path: format!("spk{k:02}/{clip_id}.wav"),
                clip_id,
                speaker: k,
                split,
                duration_secs: CLIP_SECS,
                sample_rate: SAMPLE_RATE,
            });
        }
    }
    for k in 0..spec.n_speakers {
        let d = out_dir.join(format!("spk{k:02}"));
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    entries.par_iter().enumerate().try_for_each(|(idx, e)| {
        let clip = synthesize_clip(&voices[e.speaker], derive_seed(spec.seed, &[1, idx as u64]));
        write_wav(&out_dir.join(&e.path), &clip).map(|_| ())
    })?;
    let manifest = CorpusManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voices_use_disjoint_bands() {
        let v = speaker_voices(10, 3);
        for j in 0..3 {
            let (lo, hi) = FORMANT_RANGES[j];
            let w = (hi - lo) / 10.0;
            let mut slots: Vec<usize> = v
                .iter()
                .map(|s| ((s.formants[j].0 - lo) / w) as usize)
                .collect();
            slots.sort_unstable();
            assert_eq!(slots, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(v, speaker_voices(10, 3));
        assert_ne!(v, speaker_voices(10, 4));
    }

    #[test]
    fn clip_is_four_seconds_and_voiced() {
        let v = &speaker_voices(2, 1)[0];
        let c = synthesize_clip(v, 5);
        assert_eq!(c.len(), CLIP_SAMPLES);
        assert_eq!(c.samples(), c.quantize_pcm16().samples());
        let peak = c.samples().iter().fold(0.0f64, |m, s| m.max(s.abs()));
        assert!(peak > 0.5 && peak <= 0.62, "{peak}");
        assert_eq!(c.samples(), synthesize_clip(v, 5).samples());
    }

    #[test]
    fn corpus_files_and_manifest_agree() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            n_speakers: 3,
            train_per_speaker: 2,
            test_per_speaker: 1,
            seed: 9,
        };
        let m = synthesize_toy_corpus(&spec, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 9);
        m.verify().unwrap();
        let loaded = CorpusManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.split(Split::Test).len(), 3);
        let h = m.content_hash().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = synthesize_toy_corpus(&spec, dir2.path()).unwrap();
        assert_eq!(m2.content_hash().unwrap(), h);
    }

    #[test]
    fn preparation_crops_and_rejects() {
        let long = AudioClip::new(
            (0..CLIP_SAMPLES + 10).map(|i| i as f64 * 1e-6).collect(),
            8000,
        )
        .unwrap();
        let c = prepare_clip(long).unwrap();
        assert_eq!(c.len(), CLIP_SAMPLES);
        assert_eq!(c.samples()[0], 5.0 * 1e-6);
        assert!(prepare_clip(AudioClip::new(vec![0.1; 100], 8000).unwrap()).is_err());
        assert!(prepare_clip(AudioClip::new(vec![0.1; CLIP_SAMPLES], 16000).unwrap()).is_err());
    }
}
