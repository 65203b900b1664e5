//! Run configuration: built-in defaults, then an optional config file, then
//! command-line flags. The resolved form is written to `run.json`.

use std::path::{Path, PathBuf};

use ecgnet::network::{Arch, ModelConfig};
use ecgnet::signal_io::SignalFormat;
use ecgnet::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Preprocess,
    Train,
    Predict,
    Cv,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub manifest: PathBuf,
    pub data_root: Option<PathBuf>,
    pub format: SignalFormat,
    pub out: PathBuf,
    /// Epoch log of `train`.
    pub log: Option<PathBuf>,
    /// `id,split` file choosing the train and validation records of `train`.
    pub fold_spec: Option<PathBuf>,
    /// Checkpoints read by `predict`.
    pub checkpoints: Vec<PathBuf>,
    /// Records the ensemble votes on after training.
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub paths: Paths,
    pub seed: u64,
    pub model: ModelConfig,
    /// Also carries the augmentation and preprocessing settings.
    pub train: TrainConfig,
    pub folds: usize,
    /// Fold of a `folds`-way stratified split used by `train` when no
    /// fold spec is given.
    pub fold: usize,
    pub members: usize,
    pub spectrogram_format: SignalFormat,
    /// Train folds or ensemble members on parallel threads.
    pub fast: bool,
}

/// A config file: a TOML document with optional top-level `seed` and `arch`
/// and `[model]`, `[train]`, `[augment]` and `[preprocess]` sections, or a
/// `run.json` written by an earlier run.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub arch: Option<Arch>,
    pub model: Option<toml::Table>,
    pub train: Option<toml::Table>,
    pub augment: Option<toml::Table>,
    pub preprocess: Option<toml::Table>,
    /// Set when the file is a previous `run.json`.
    pub previous: Option<RunConfig>,
}

fn take_table(doc: &mut toml::Table, key: &str) -> Result<Option<toml::Table>, CliError> {
    match doc.remove(key) {
        None => Ok(None),
        Some(toml::Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(CliError::Usage(format!("config: `{key}` must be a section"))),
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let previous: RunConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            return Ok(ConfigFile {
                previous: Some(previous),
                ..Default::default()
            });
        }
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let seed = match doc.remove("seed") {
            None => None,
            Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(v) => return Err(CliError::Usage(format!("config: seed must be a non-negative integer, got {v}"))),
        };
        let arch = match doc.remove("arch") {
            None => None,
            Some(toml::Value::String(s)) => Some(s.parse().map_err(CliError::Usage)?),
            Some(v) => return Err(CliError::Usage(format!("config: arch must be a string, got {v}"))),
        };
        let file = ConfigFile {
            seed,
            arch,
            model: take_table(&mut doc, "model")?,
            train: take_table(&mut doc, "train")?,
            augment: take_table(&mut doc, "augment")?,
            preprocess: take_table(&mut doc, "preprocess")?,
            previous: None,
        };
        if let Some(key) = doc.keys().next() {
            return Err(CliError::Usage(format!("config: unknown key `{key}`")));
        }
        Ok(file)
    }
}

/// Replaces the fields of `base` named in `table`; unknown keys are errors.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: Option<&toml::Table>, section: &str) -> Result<T, CliError> {
    let Some(table) = table else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("config serializes")).expect("config round-trips"));
    };
    let mut value = serde_json::to_value(base).expect("config serializes");
    let patch = serde_json::to_value(table).map_err(|e| CliError::Usage(format!("[{section}]: {e}")))?;
    merge(&mut value, patch);
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults for `command`, with the config file applied on top.
    pub fn from_file(command: CommandKind, paths: Paths, arch: Option<Arch>, file: &ConfigFile) -> Result<Self, CliError> {
        if let Some(prev) = &file.previous {
            let mut run = prev.clone();
            run.command = command;
            run.paths = paths;
            if let Some(arch) = arch {
                if arch != run.model.arch {
                    run.model = ModelConfig {
                        scale: run.model.scale,
                        ..ModelConfig::for_arch(arch)
                    };
                }
            }
            return Ok(run);
        }
        let file_arch = file
            .model
            .as_ref()
            .and_then(|m| m.get("arch"))
            .and_then(|v| v.as_str())
            .map(|s| s.parse::<Arch>())
            .transpose()
            .map_err(CliError::Usage)?;
        let arch = arch.or(file_arch).or(file.arch).unwrap_or(Arch::Cnn);
        let mut model = overlay(&ModelConfig::for_arch(arch), file.model.as_ref(), "model")?;
        model.arch = arch;
        let mut train = overlay(&TrainConfig::default(), file.train.as_ref(), "train")?;
        train.augment = overlay(&train.augment, file.augment.as_ref(), "augment")?;
        train.preprocess = overlay(&train.preprocess, file.preprocess.as_ref(), "preprocess")?;
        let seed = file.seed.unwrap_or(0);
        train.seed = seed;
        Ok(RunConfig {
            command,
            paths,
            seed,
            model,
            train,
            folds: 5,
            fold: 0,
            members: ecgnet::evaluation::ENSEMBLE_SIZE,
            spectrogram_format: SignalFormat::Text,
            fast: false,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.model.input_bins != self.train.preprocess.n_bins() {
            return Err(CliError::Usage(format!(
                "model expects {} frequency bins but the preprocessing window yields {}",
                self.model.input_bins,
                self.train.preprocess.n_bins()
            )));
        }
        if self.folds < 2 || self.fold >= self.folds {
            return Err(CliError::Usage(format!("need folds >= 2 and fold < folds, got fold {} of {}", self.fold, self.folds)));
        }
        if self.members < 2 {
            return Err(CliError::Usage("an ensemble needs at least 2 members".into()));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("run config serializes");
        crate::error::write_file(path, text.as_bytes())
    }
}
