use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackMode, LossVariant};
use crate::dsp::MfccConfig;
use crate::error::{Error, Result};
use crate::nets::{TrainConfig, XVectorConfig};

use super::corpus::MANIFEST_FILE;

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "FOOLHD_SEED";

/// Attack families runnable from the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Foolhd,
    FoolhdT,
    FoolhdMse,
    FoolhdNoskip,
    Fgsm,
    Bim,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Foolhd => "foolhd",
            AttackKind::FoolhdT => "foolhd-t",
            AttackKind::FoolhdMse => "foolhd-mse",
            AttackKind::FoolhdNoskip => "foolhd-noskip",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, AttackKind::Fgsm | AttackKind::Bim)
    }

    pub fn is_targeted(self) -> bool {
        self == AttackKind::FoolhdT
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AttackKind::Foolhd,
            AttackKind::FoolhdT,
            AttackKind::FoolhdMse,
            AttackKind::FoolhdNoskip,
            AttackKind::Fgsm,
            AttackKind::Bim,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown attack `{s}`")))
    }
}

/// Attack section; unset fields take the defaults of the chosen kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    pub kind: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gca_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bim_iterations: Option<usize>,
}

impl AttackSettings {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            max_iterations: None,
            lr: None,
            weight_decay: None,
            dropout: None,
            gca_channels: None,
            perceptual_weight: None,
            epsilon: None,
            bim_iterations: None,
        }
    }

    pub fn resolve(&self) -> AttackConfig {
        let mut c = if self.kind.is_targeted() {
            AttackConfig::targeted()
        } else {
            AttackConfig::untargeted()
        };
        match self.kind {
            AttackKind::FoolhdMse => c.loss_variant = LossVariant::Mse,
            AttackKind::FoolhdNoskip => c.skip = false,
            _ => {}
        }
        debug_assert!(self.kind.is_targeted() == (c.mode == AttackMode::Targeted));
        c.max_iterations = self.max_iterations.unwrap_or(c.max_iterations);
        c.lr = self.lr.unwrap_or(c.lr);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.gca_channels = self.gca_channels.unwrap_or(c.gca_channels);
        c.perceptual_weight = self.perceptual_weight.or(c.perceptual_weight);
        c.epsilon = self.epsilon.unwrap_or(c.epsilon);
        c.bim_iterations = self.bim_iterations.unwrap_or(c.bim_iterations);
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Corpus directory holding `manifest.csv`.
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub checkpoint: PathBuf,
}

/// Classifier widths; input and class counts come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierWidths {
    pub channels: usize,
    pub attention_dim: usize,
    pub fc: Vec<usize>,
}

impl Default for ClassifierWidths {
    fn default() -> Self {
        let d = XVectorConfig::new(1, 2);
        Self {
            channels: d.channels,
            attention_dim: d.attention_dim,
            fc: d.fc,
        }
    }
}

impl ClassifierWidths {
    pub fn model_config(&self, feat_dim: usize, n_classes: usize) -> XVectorConfig {
        XVectorConfig {
            channels: self.channels,
            attention_dim: self.attention_dim,
            fc: self.fc.clone(),
            ..XVectorConfig::new(feat_dim, n_classes)
        }
    }
}

/// One experiment, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed. Overridden by the environment, then by the CLI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Train a classifier and overwrite the checkpoint even if one exists.
    #[serde(default)]
    pub train_first: bool,
    /// Attack only the first N test clips of each speaker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_speaker: Option<usize>,
    pub paths: PathsConfig,
    pub attack: AttackSettings,
    #[serde(default = "MfccConfig::classifier")]
    pub front_end: MfccConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub classifier: ClassifierWidths,
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(paths: PathsConfig, kind: AttackKind) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            workers: 1,
            train_first: false,
            test_per_speaker: None,
            paths,
            attack: AttackSettings::new(kind),
            front_end: MfccConfig::classifier(),
            train: TrainConfig::default(),
            classifier: ClassifierWidths::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// CLI flag, then environment, then file.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        let env = std::env::var(SEED_ENV).ok();
        resolve_seed(cli, env.as_deref(), self.seed)
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version must be {SCHEMA_VERSION}"
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.test_per_speaker == Some(0) {
            return Err(Error::Config("test_per_speaker must be at least 1".into()));
        }
        let manifest = self.paths.dataset.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::Config(format!(
                "no corpus manifest at {}",
                manifest.display()
            )));
        }
        if !self.train_first && !self.paths.checkpoint.is_file() {
            return Err(Error::Config(format!(
                "checkpoint {} does not exist; set train_first to train one",
                self.paths.checkpoint.display()
            )));
        }
        self.attack.resolve().validate().map_err(config_err)?;
        self.front_end.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.classifier
            .model_config(self.front_end.feature_dim(), 2)
            .validate()
            .map_err(config_err)?;
        Ok(())
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    }
}

/// Seed precedence: `cli`, then `env`, then `file`. No default.
pub fn resolve_seed(cli: Option<u64>, env: Option<&str>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    if let Some(e) = env {
        return e
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{e}` is not an unsigned integer")));
    }
    file.ok_or_else(|| {
        Error::Config(format!(
            "a seed is required (--seed, {SEED_ENV} or `seed` in the config)"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
schema_version = 1
seed = 11
workers = 2

[paths]
dataset = "corpus"
output = "out"
checkpoint = "model.ckpt"

[attack]
kind = "foolhd-t"
gca_channels = 8
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.front_end, MfccConfig::classifier());
        let a = cfg.attack.resolve();
        assert_eq!(a.mode, AttackMode::Targeted);
        assert_eq!(a.max_iterations, 1000);
        assert_eq!(a.gca_channels, 8);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(
            ExperimentConfig::from_toml(&EXAMPLE.replace("workers = 2", "wrokers = 2")).is_err()
        );
        let err = ExperimentConfig::from_toml(
            &EXAMPLE.replace("schema_version = 1", "schema_version = 9"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some("2"), Some(3)).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some("2"), Some(3)).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some(3)).unwrap(), 3);
        assert!(resolve_seed(None, None, None).is_err());
        assert!(resolve_seed(None, Some("x"), Some(3)).is_err());
    }

    #[test]
    fn kinds_resolve_variants() {
        let mse = AttackSettings::new(AttackKind::FoolhdMse).resolve();
        assert_eq!(mse.loss_variant, LossVariant::Mse);
        assert!(!AttackSettings::new(AttackKind::FoolhdNoskip).resolve().skip);
        let fgsm = AttackSettings::new(AttackKind::Fgsm).resolve();
        assert_eq!(fgsm.epsilon, 0.004);
        assert_eq!(
            "foolhd-noskip".parse::<AttackKind>().unwrap(),
            AttackKind::FoolhdNoskip
        );
        assert!("pgd".parse::<AttackKind>().is_err());
    }

    #[test]
    fn validation_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.paths.dataset = dir.path().to_path_buf();
        assert!(cfg.validate().unwrap_err().to_string().contains("manifest"));
        std::fs::write(dir.path().join(MANIFEST_FILE), "").unwrap();
        cfg.paths.checkpoint = dir.path().join("none.ckpt");
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("checkpoint"));
        cfg.train_first = true;
        cfg.validate().unwrap();
    }
}
