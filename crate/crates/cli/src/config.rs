//! Sectioned `key = value` configuration files.
//!
//! Lines starting with `#` or `;` are comments. Every key is optional except
//! `pipeline.input`; unknown sections and keys are rejected with their line
//! number. Relative paths resolve against the directory of the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use diabnet::classifier::{ClassifierConfig, CnnSpec, MlpSpec};
use diabnet::data::NormalizerKind;
use diabnet::joint::{HeadKind, JointConfig};
use diabnet::sae::{SaeConfig, SparsityTarget};
use diabnet::vae::{BalancePolicy, VaeConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// The five compared training configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Configuration {
    /// MLP on the eight normalised features.
    Mlp,
    /// Separately trained SAE, then an MLP on the 400 latent features.
    SaeMlp,
    /// Separately trained SAE, then a CNN on the 20x20 latent grid.
    SaeCnn,
    /// SAE and MLP head trained jointly.
    SaeWithMlp,
    /// SAE and CNN head trained jointly.
    SaeWithCnn,
}

impl Configuration {
    pub const ALL: [Configuration; 5] = [
        Configuration::Mlp,
        Configuration::SaeMlp,
        Configuration::SaeCnn,
        Configuration::SaeWithMlp,
        Configuration::SaeWithCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Configuration::Mlp => "mlp",
            Configuration::SaeMlp => "sae_mlp",
            Configuration::SaeCnn => "sae_cnn",
            Configuration::SaeWithMlp => "sae_with_mlp",
            Configuration::SaeWithCnn => "sae_with_cnn",
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Configuration {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Configuration::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown configuration {s:?} (mlp, sae_mlp, sae_cnn, sae_with_mlp, sae_with_cnn)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSettings {
    /// Runs per configuration.
    pub repeats: usize,
    /// Runs for `sae_with_cnn`.
    pub flagship_repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub split_seed: u64,
    pub train_ratio: f64,
    pub normalizer: NormalizerKind,
    pub configuration: Configuration,
    pub balance: BalancePolicy,
    pub threshold: f64,
    pub vae: VaeConfig,
    pub sae: SaeConfig,
    pub mlp: MlpSpec,
    pub mlp_training: ClassifierConfig,
    pub cnn: CnnSpec,
    pub cnn_training: ClassifierConfig,
    /// Template for both joint heads; `head` and `epochs` are set per run.
    pub joint: JointConfig,
    pub joint_mlp_epochs: usize,
    pub joint_cnn_epochs: usize,
    pub experiment: ExperimentSettings,
}

impl PipelineConfig {
    /// Defaults for every section, reading `input`.
    pub fn with_input(input: impl Into<PathBuf>) -> Self {
        let joint = JointConfig::new(HeadKind::Cnn);
        Self {
            input: input.into(),
            output: PathBuf::from("out"),
            seed: 0,
            split_seed: 0,
            train_ratio: 0.9,
            normalizer: NormalizerKind::MinMax,
            configuration: Configuration::SaeWithCnn,
            balance: BalancePolicy::OnePass,
            threshold: 0.5,
            vae: VaeConfig::default(),
            sae: SaeConfig::default(),
            mlp: MlpSpec::default(),
            mlp_training: ClassifierConfig::mlp_default(),
            cnn: CnnSpec::default(),
            cnn_training: ClassifierConfig::cnn_default(),
            joint_mlp_epochs: JointConfig::new(HeadKind::Mlp).epochs,
            joint_cnn_epochs: joint.epochs,
            joint,
            experiment: ExperimentSettings {
                repeats: 11,
                flagship_repeats: 12,
            },
        }
    }

    /// Reads `path`; the input CSV must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::parse(&text, path, &base)?;
        if !cfg.input.is_file() {
            let missing = std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found");
            return Err(CliError::io(&cfg.input, missing));
        }
        Ok(cfg)
    }

    /// Parses `text`; `origin` names the source in errors, `base` anchors relative paths.
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let entries = parse_sections(text, origin)?;
        let mut cfg = Self::with_input(PathBuf::new());
        let mut saw_input = false;
        for ((section, key), (line, value)) in &entries {
            let err = |message: String| CliError::Config {
                path: origin.to_path_buf(),
                line: *line,
                message: format!("[{section}] {key}: {message}"),
            };
            let v = value.as_str();
            cfg.apply(section, key, v, base, &mut saw_input)
                .map_err(err)?;
        }
        if !saw_input {
            return Err(CliError::Config {
                path: origin.to_path_buf(),
                line: 0,
                message: "[pipeline] input is required".into(),
            });
        }
        cfg.validate().map_err(|message| CliError::Config {
            path: origin.to_path_buf(),
            line: 0,
            message,
        })?;
        Ok(cfg)
    }

    fn apply(
        &mut self,
        section: &str,
        key: &str,
        v: &str,
        base: &Path,
        saw_input: &mut bool,
    ) -> std::result::Result<(), String> {
        match (section, key) {
            ("pipeline", "input") => {
                self.input = base.join(v);
                *saw_input = true;
            }
            ("pipeline", "output") => self.output = base.join(v),
            ("pipeline", "seed") => self.seed = num(v)?,
            ("pipeline", "split_seed") => self.split_seed = num(v)?,
            ("pipeline", "train_ratio") => self.train_ratio = num(v)?,
            ("pipeline", "normalizer") => {
                self.normalizer = v.parse().map_err(|e: diabnet::Error| e.to_string())?
            }
            ("pipeline", "configuration") => self.configuration = v.parse()?,
            ("pipeline", "balance") => {
                self.balance = match v {
                    "one_pass" => BalancePolicy::OnePass,
                    "exact" => BalancePolicy::Exact,
                    other => {
                        return Err(format!(
                            "unknown balance policy {other:?} (one_pass, exact)"
                        ))
                    }
                }
            }
            ("pipeline", "threshold") => self.threshold = num(v)?,

            ("vae", "latent_dim") => self.vae.latent_dim = num(v)?,
            ("vae", "hidden") => self.vae.hidden = list(v)?,
            ("vae", "epochs") => self.vae.epochs = num(v)?,
            ("vae", "batch_size") => self.vae.batch_size = num(v)?,
            ("vae", "learning_rate") => self.vae.learning_rate = num(v)?,
            ("vae", "kl_weight") => self.vae.kl_weight = num(v)?,

            ("sae", "hidden") => self.sae.hidden = list(v)?,
            ("sae", "lambda") => self.sae.lambda = num(v)?,
            ("sae", "sparsity_target") => {
                self.sae.target = v.parse::<SparsityTarget>().map_err(|e| e.to_string())?
            }
            ("sae", "epochs") => self.sae.epochs = num(v)?,
            ("sae", "batch_size") => self.sae.batch_size = num(v)?,
            ("sae", "learning_rate") => self.sae.learning_rate = num(v)?,

            ("mlp", "hidden") => self.mlp.hidden = list(v)?,
            ("mlp", "dropout") => self.mlp.dropout = num(v)?,
            ("mlp", "epochs") => self.mlp_training.epochs = num(v)?,
            ("mlp", "batch_size") => self.mlp_training.batch_size = num(v)?,
            ("mlp", "learning_rate") => self.mlp_training.learning_rate = num(v)?,

            ("cnn", "filters") => self.cnn.filters = num(v)?,
            ("cnn", "kernel") => self.cnn.kernel = pair(v)?,
            ("cnn", "stride") => self.cnn.stride = num(v)?,
            ("cnn", "pool") => self.cnn.pool = pair(v)?,
            ("cnn", "dense") => self.cnn.dense = num(v)?,
            ("cnn", "dropout") => self.cnn.dropout = num(v)?,
            ("cnn", "epochs") => self.cnn_training.epochs = num(v)?,
            ("cnn", "batch_size") => self.cnn_training.batch_size = num(v)?,
            ("cnn", "learning_rate") => self.cnn_training.learning_rate = num(v)?,

            ("joint", "hidden") => self.joint.hidden = list(v)?,
            ("joint", "lambda") => self.joint.lambda = num(v)?,
            ("joint", "alpha") => self.joint.alpha = num(v)?,
            ("joint", "beta") => self.joint.beta = num(v)?,
            ("joint", "mlp_epochs") => self.joint_mlp_epochs = num(v)?,
            ("joint", "cnn_epochs") => self.joint_cnn_epochs = num(v)?,
            ("joint", "batch_size") => self.joint.batch_size = num(v)?,
            ("joint", "learning_rate") => self.joint.learning_rate = num(v)?,

            ("experiment", "repeats") => self.experiment.repeats = num(v)?,
            ("experiment", "flagship_repeats") => self.experiment.flagship_repeats = num(v)?,

            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(format!(
                "train_ratio {} must lie in (0, 1)",
                self.train_ratio
            ));
        }
        for c in Configuration::ALL {
            self.vae_config(0).validate().map_err(|e| e.to_string())?;
            self.sae_config(0).validate().map_err(|e| e.to_string())?;
            self.classifier_config(c, 0)
                .validate()
                .map_err(|e| e.to_string())?;
            if let Some(j) = self.joint_config(c, 0) {
                j.validate().map_err(|e| e.to_string())?;
            }
        }
        if self.experiment.repeats < 2 || self.experiment.flagship_repeats < 2 {
            return Err("experiment repeats must be at least 2".into());
        }
        Ok(())
    }

    pub fn vae_config(&self, seed: u64) -> VaeConfig {
        VaeConfig {
            seed,
            ..self.vae.clone()
        }
    }

    pub fn sae_config(&self, seed: u64) -> SaeConfig {
        SaeConfig {
            seed,
            ..self.sae.clone()
        }
    }

    /// Training settings of the classifier stage of `configuration`.
    pub fn classifier_config(&self, configuration: Configuration, seed: u64) -> ClassifierConfig {
        let base = match configuration {
            Configuration::SaeCnn | Configuration::SaeWithCnn => &self.cnn_training,
            _ => &self.mlp_training,
        };
        ClassifierConfig {
            seed,
            threshold: self.threshold,
            ..base.clone()
        }
    }

    /// Joint settings for the jointly trained configurations.
    pub fn joint_config(&self, configuration: Configuration, seed: u64) -> Option<JointConfig> {
        let (head, epochs) = match configuration {
            Configuration::SaeWithMlp => (HeadKind::Mlp, self.joint_mlp_epochs),
            Configuration::SaeWithCnn => (HeadKind::Cnn, self.joint_cnn_epochs),
            _ => return None,
        };
        Some(JointConfig {
            head,
            epochs,
            seed,
            threshold: self.threshold,
            mlp: self.mlp.clone(),
            cnn: self.cnn.clone(),
            ..self.joint.clone()
        })
    }

    /// Runs of `configuration` in an experiment.
    pub fn repeats_for(&self, configuration: Configuration) -> usize {
        if configuration == Configuration::SaeWithCnn {
            self.experiment.flagship_repeats
        } else {
            self.experiment.repeats
        }
    }
}

/// `(section, key) -> (line, value)`.
type Entries = BTreeMap<(String, String), (usize, String)>;

const SECTIONS: [&str; 7] = [
    "pipeline",
    "vae",
    "sae",
    "mlp",
    "cnn",
    "joint",
    "experiment",
];

fn parse_sections(text: &str, origin: &Path) -> Result<Entries> {
    let err = |line: usize, message: String| CliError::Config {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut entries = Entries::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(line, format!("malformed section header {trimmed:?}")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected `key = value`, got {trimmed:?}")))?;
        let section = section
            .clone()
            .ok_or_else(|| err(line, "key outside any section".into()))?;
        let key = key.trim().to_string();
        if entries.contains_key(&(section.clone(), key.clone())) {
            return Err(err(line, format!("duplicate key [{section}] {key}")));
        }
        entries.insert((section, key), (line, value.trim().to_string()));
    }
    Ok(entries)
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(p.trim())).collect()
}

fn pair(v: &str) -> std::result::Result<(usize, usize), String> {
    match list(v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected two comma-separated integers, got {v:?}")),
    }
}
