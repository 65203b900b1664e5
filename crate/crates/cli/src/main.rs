//! `ecgnet`: preprocess ECG records, train and apply the CNN and CRNN
//! classifiers, cross-validate, and build majority-vote ensembles.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ecgnet::network::Arch;
use ecgnet::signal_io::SignalFormat;

use config::{CommandKind, ConfigFile, Paths, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ecgnet", version, about = "Single-lead ECG rhythm classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the normalized log spectrogram of every record.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pre: PreprocessFlags,
        /// Spectrogram file format.
        #[arg(long, default_value = "text", value_parser = parse_format)]
        spectrogram_format: SignalFormat,
    },
    /// Train one network with early stopping on a validation split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        pre: PreprocessFlags,
        /// `id,split` rows (split is `train` or `val`) choosing the records.
        #[arg(long)]
        fold_spec: Option<PathBuf>,
        /// Without a fold spec, hold out this fold of a stratified split.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        /// Epoch log (JSON lines); defaults to the checkpoint path with a
        /// `.train.jsonl` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Classify records with one checkpoint, or by majority vote over several.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        pre: PreprocessFlags,
    },
    /// Stratified k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        pre: PreprocessFlags,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train a majority-vote ensemble on stratified subsets.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        pre: PreprocessFlags,
        #[arg(long)]
        members: Option<usize>,
        /// Records to vote on after training; defaults to the training
        /// manifest.
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory signal paths are relative to; defaults to the manifest's.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Signal file format.
    #[arg(long, default_value = "text", value_parser = parse_format)]
    format: SignalFormat,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config file, or the `run.json` of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Channel-width multiplier.
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long, value_enum)]
    augment: Option<OnOff>,
    /// Mean dropout bursts per 10 s.
    #[arg(long)]
    burst_rate: Option<f64>,
    #[arg(long)]
    burst_width_ms: Option<f64>,
    /// Emulated heart-rate range `lo,hi` in bpm.
    #[arg(long, value_parser = parse_range)]
    hr_range: Option<(f64, f64)>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train folds or ensemble members on parallel threads.
    #[arg(long)]
    fast: bool,
}

#[derive(Debug, Args)]
struct PreprocessFlags {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    tukey_shape: Option<f64>,
    #[arg(long)]
    no_normalize: bool,
}

fn parse_format(s: &str) -> Result<SignalFormat, String> {
    s.parse()
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse()
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(lo)?, parse(hi)?))
}

impl PreprocessFlags {
    fn apply(&self, run: &mut RunConfig) {
        let p = &mut run.train.preprocess;
        if let Some(v) = self.eps {
            p.eps = v;
        }
        if let Some(v) = self.window {
            p.window_samples = v;
            run.model.input_bins = v / 2 + 1;
        }
        if let Some(v) = self.hop {
            p.hop_samples = v;
        }
        if let Some(v) = self.tukey_shape {
            p.tukey_shape = v;
        }
        if self.no_normalize {
            p.normalize = false;
        }
    }
}

impl TrainFlags {
    fn apply(&self, run: &mut RunConfig) {
        let t = &mut run.train;
        if let Some(a) = self.augment {
            t.augment.enabled = matches!(a, OnOff::On);
        }
        if let Some(v) = self.burst_rate {
            t.augment.burst_rate_per_10s = v;
        }
        if let Some(v) = self.burst_width_ms {
            t.augment.burst_width_ms = v;
        }
        if let Some(v) = self.hr_range {
            t.augment.hr_range_bpm = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
            // An explicit --patience still wins and is validated as given.
            t.patience_epochs = t.patience_epochs.min(v);
        }
        if let Some(v) = self.patience {
            t.patience_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        run.fast |= self.fast;
    }
}

fn resolve(command: CommandKind, common: &Common, arch: Option<Arch>, mut paths: Paths) -> Result<RunConfig, CliError> {
    let file = match &common.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    paths.manifest = common.manifest.clone();
    paths.data_root = common.data_root.clone();
    paths.format = common.format;
    paths.out = common.out.clone();
    let mut run = RunConfig::from_file(command, paths, arch, &file)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
        run.train.seed = seed;
    }
    Ok(run)
}

fn empty_paths() -> Paths {
    Paths {
        manifest: PathBuf::new(),
        data_root: None,
        format: SignalFormat::Text,
        out: PathBuf::new(),
        log: None,
        fold_spec: None,
        checkpoints: Vec::new(),
        eval_manifest: None,
    }
}

fn build_run(command: Command) -> Result<RunConfig, CliError> {
    let run = match command {
        Command::Preprocess {
            common,
            pre,
            spectrogram_format,
        } => {
            let mut run = resolve(CommandKind::Preprocess, &common, None, empty_paths())?;
            pre.apply(&mut run);
            run.spectrogram_format = spectrogram_format;
            run
        }
        Command::Train {
            common,
            model,
            train,
            pre,
            fold_spec,
            fold,
            folds,
            log,
        } => {
            let paths = Paths {
                fold_spec,
                log,
                ..empty_paths()
            };
            let mut run = resolve(CommandKind::Train, &common, model.arch, paths)?;
            model.apply(&mut run);
            train.apply(&mut run);
            pre.apply(&mut run);
            run.fold = fold.unwrap_or(run.fold);
            run.folds = folds.unwrap_or(run.folds);
            run
        }
        Command::Predict { common, checkpoints, pre } => {
            let paths = Paths {
                checkpoints,
                ..empty_paths()
            };
            let mut run = resolve(CommandKind::Predict, &common, None, paths)?;
            pre.apply(&mut run);
            run
        }
        Command::Cv {
            common,
            model,
            train,
            pre,
            folds,
        } => {
            let mut run = resolve(CommandKind::Cv, &common, model.arch, empty_paths())?;
            model.apply(&mut run);
            train.apply(&mut run);
            pre.apply(&mut run);
            run.folds = folds.unwrap_or(run.folds);
            run
        }
        Command::Ensemble {
            common,
            model,
            train,
            pre,
            members,
            eval_manifest,
        } => {
            let paths = Paths {
                eval_manifest,
                ..empty_paths()
            };
            let mut run = resolve(CommandKind::Ensemble, &common, model.arch, paths)?;
            model.apply(&mut run);
            train.apply(&mut run);
            pre.apply(&mut run);
            run.members = members.unwrap_or(run.members);
            run
        }
    };
    run.validate()?;
    Ok(run)
}

impl ModelFlags {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(s) = self.scale {
            run.model.scale = s;
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = build_run(cli.command).and_then(|run| commands::execute(&run));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ecgnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
