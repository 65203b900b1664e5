//! Optimization loops: class-weighted mini-batch training, early stopping on
//! validation `F1_avg`, and the three-phase CRNN protocol.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::{augment, AugmentConfig};
use crate::diffcompute::{softmax, weighted_cross_entropy_batch, Adam, AdamConfig, Mode, Real};
use crate::evaluation::{argmax, ConfusionMatrix, MetricsReport};
use crate::network::{spectrogram_batch, AggregatorKind, Model, ModelConfig, NetworkError};
use crate::signal_io::{ClassCounts, EcgRecord, Label};
use crate::spectrogram::{preprocess, PreprocessConfig, Spectrogram, SpectrogramError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptySplit,
    #[error("record {0} has no label")]
    Unlabeled(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch} (records {ids:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ids: Vec<String>,
    },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Bucket size for length bucketing, in batches.
    pub batches_per_bucket: usize,
    /// Epoch cap for plain training and for CRNN phases 1 and 3.
    pub max_epochs: usize,
    /// Also clamped to the epoch cap of each CRNN phase.
    pub patience_epochs: usize,
    pub lr: f64,
    /// Overrides `max_epochs` for CRNN phase 1.
    pub phase1_epochs: Option<usize>,
    pub phase2_epochs: usize,
    /// Overrides `max_epochs` for CRNN phase 3.
    pub phase3_epochs: Option<usize>,
    pub phase3_decay_every: usize,
    pub phase3_decay_factor: f64,
    pub augment: AugmentConfig,
    pub preprocess: PreprocessConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 20,
            batches_per_bucket: 4,
            max_epochs: 500,
            patience_epochs: 50,
            lr: 1e-3,
            phase1_epochs: None,
            phase2_epochs: 100,
            phase3_epochs: None,
            phase3_decay_every: 200,
            phase3_decay_factor: 10.0,
            augment: AugmentConfig::default(),
            preprocess: PreprocessConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if self.batch_size == 0 || self.batches_per_bucket == 0 || self.max_epochs == 0 || self.patience_epochs == 0 {
            return bad("batch_size, batches_per_bucket, max_epochs and patience_epochs must be positive");
        }
        if self.patience_epochs > self.max_epochs {
            return bad("patience_epochs must not exceed max_epochs");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.phase2_epochs == 0 || self.phase3_decay_every == 0 || !(self.phase3_decay_factor > 0.0) {
            return bad("phase settings must be positive");
        }
        if self.phase1_epochs == Some(0) || self.phase3_epochs == Some(0) {
            return bad("phase epoch overrides must be positive");
        }
        self.augment.validate().map_err(TrainError::BadConfig)
    }

    /// Learning rate in (1-based) epoch `epoch` of phase 3.
    pub fn phase3_lr(&self, epoch: usize) -> f64 {
        let decays = (epoch.max(1) - 1) / self.phase3_decay_every;
        self.lr / self.phase3_decay_factor.powi(decays as i32)
    }
}

/// Per-class loss weights `N / (4 N_c)`; classes with no examples get 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: [f64; Label::COUNT],
    pub absent: Vec<Label>,
}

pub fn compute_class_weights(counts: &ClassCounts) -> ClassWeights {
    let total = counts.total() as f64;
    let mut absent = Vec::new();
    let weights = Label::ALL.map(|c| {
        let n = counts.get(c);
        if n == 0 {
            absent.push(c);
            0.0
        } else {
            total / (Label::COUNT as f64 * n as f64)
        }
    });
    ClassWeights { weights, absent }
}

fn labels_of(records: &[&EcgRecord]) -> Result<Vec<Label>> {
    records
        .iter()
        .map(|r| r.label.ok_or_else(|| TrainError::Unlabeled(r.id.clone())))
        .collect()
}

/// Groups example indices into batches of similar spectrogram length.
///
/// A random order is stably sorted by length and cut into buckets of
/// `batch_size * batches_per_bucket` examples. Each bucket is shuffled and
/// cut into batches, and the batch order is shuffled. With one batch per
/// bucket every batch holds near-identical lengths; larger buckets mix
/// lengths within a batch, which keeps batchnorm's batch statistics close
/// to the population statistics it uses at inference.
pub fn length_bucketed_batches<R: Rng + ?Sized>(
    lengths: &[usize],
    batch_size: usize,
    batches_per_bucket: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for bucket in order.chunks_mut(batch_size * batches_per_bucket.max(1)) {
        bucket.shuffle(rng);
        batches.extend(bucket.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

/// Tracks the optimizer and the state shared across epochs of one phase.
pub struct Trainer<T: Real> {
    pub adam: Adam<T>,
    pub class_weights: Vec<T>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(lr: f64, weights: &ClassWeights, seed: u64) -> Self {
        Trainer {
            adam: Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            }),
            class_weights: weights.weights.iter().map(|&w| crate::diffcompute::cst(w)).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        }
    }

    /// One pass over `records`: fresh augmentation, length-bucketed
    /// batches, one Adam step per batch. Returns the mean batch loss.
    pub fn train_epoch(&mut self, model: &mut Model<T>, records: &[&EcgRecord], config: &TrainConfig) -> Result<f64> {
        if records.is_empty() {
            return Err(TrainError::EmptySplit);
        }
        self.epoch += 1;
        let labels = labels_of(records)?;
        let specs: Vec<Spectrogram> = records
            .iter()
            .map(|r| {
                if config.augment.enabled {
                    preprocess(&augment(r, &config.augment, &mut self.rng), &config.preprocess)
                } else {
                    preprocess(r, &config.preprocess)
                }
            })
            .collect::<std::result::Result<_, _>>()?;
        let lengths: Vec<usize> = specs.iter().map(|s| s.valid_frames).collect();
        let batches = length_bucketed_batches(&lengths, config.batch_size, config.batches_per_bucket, &mut self.rng);
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch_specs: Vec<&Spectrogram> = idx.iter().map(|&i| &specs[i]).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i].index()).collect();
            let x = spectrogram_batch::<T>(&batch_specs)?;
            model.zero_grad();
            let logits = model.forward(x, Mode::Train, &mut self.rng)?;
            let (loss, grad) = weighted_cross_entropy_batch(&logits, &batch_labels, &self.class_weights);
            let loss = crate::diffcompute::to_f64(loss);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: bi,
                    ids: idx.iter().map(|&i| records[i].id.clone()).collect(),
                });
            }
            model.backward(&grad);
            self.adam.step(model.params_mut());
            total += loss;
        }
        Ok(total / batches.len() as f64)
    }
}

/// Class probabilities for each record, in input order. Records are scored
/// in inference mode in length-sorted batches.
pub fn predict_probs<T: Real>(
    model: &mut Model<T>,
    records: &[&EcgRecord],
    preprocess_config: &PreprocessConfig,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let specs: Vec<Spectrogram> = records
        .iter()
        .map(|r| preprocess(r, preprocess_config))
        .collect::<std::result::Result<_, _>>()?;
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by_key(|&i| specs[i].valid_frames);
    let mut out = vec![Vec::new(); specs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<&Spectrogram> = chunk.iter().map(|&i| &specs[i]).collect();
        let logits = model.forward(spectrogram_batch::<T>(&batch)?, Mode::Infer, &mut rng)?;
        for (row, &i) in chunk.iter().enumerate() {
            let p = softmax(logits.row(row));
            out[i] = p.iter().map(|&v| crate::diffcompute::to_f64(v)).collect();
        }
    }
    Ok(out)
}

pub fn evaluate<T: Real>(
    model: &mut Model<T>,
    records: &[&EcgRecord],
    preprocess_config: &PreprocessConfig,
    batch_size: usize,
) -> Result<MetricsReport> {
    let labels = labels_of(records)?;
    let probs = predict_probs(model, records, preprocess_config, batch_size)?;
    let cm = ConfusionMatrix::from_pairs(
        labels
            .iter()
            .zip(&probs)
            .map(|(&t, p)| (t, Label::from_index(argmax(p)).expect("class index"))),
    );
    Ok(MetricsReport::from_confusion(&cm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Single,
    Phase1,
    Phase2,
    Phase3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub loss: f64,
    pub val_f1_avg: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned model; 0 if no epoch ran.
    pub best_epoch: usize,
    pub best_val_f1_avg: f64,
}

/// Generic early-stopping loop. `step(model, epoch)` trains one epoch and
/// returns `(loss, lr)`; `score(model)` returns the validation `F1_avg`.
/// Keeps a copy of the best-scoring model and stops after `patience`
/// epochs without strict improvement.
pub fn early_stopping_loop<M: Clone, S, V>(
    mut model: M,
    phase: Phase,
    max_epochs: usize,
    patience: usize,
    mut step: S,
    mut score: V,
) -> Result<(M, TrainHistory)>
where
    S: FnMut(&mut M, usize) -> Result<(f64, f64)>,
    V: FnMut(&mut M) -> Result<f64>,
{
    let mut best: Option<(M, usize, f64)> = None;
    let mut epochs = Vec::new();
    for epoch in 1..=max_epochs {
        let (loss, lr) = step(&mut model, epoch)?;
        let f1 = score(&mut model)?;
        epochs.push(EpochRecord {
            phase,
            epoch,
            loss,
            val_f1_avg: f1,
            lr,
        });
        match &best {
            Some((_, _, b)) if f1 <= *b => {}
            _ => best = Some((model.clone(), epoch, f1)),
        }
        let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(0);
        if epoch - best_epoch >= patience {
            break;
        }
    }
    let (model, best_epoch, best_val_f1_avg) = best.unwrap_or((model, 0, f64::NEG_INFINITY));
    Ok((
        model,
        TrainHistory {
            epochs,
            best_epoch,
            best_val_f1_avg,
        },
    ))
}

/// Weighted-loss training with early stopping on validation `F1_avg`.
/// `lr_at(epoch)` gives the learning rate of each (1-based) epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit_phase<T: Real>(
    model: Model<T>,
    train: &[&EcgRecord],
    val: &[&EcgRecord],
    config: &TrainConfig,
    phase: Phase,
    max_epochs: usize,
    seed: u64,
    lr_at: impl Fn(usize) -> f64,
) -> Result<(Model<T>, TrainHistory)> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let weights = compute_class_weights(&ClassCounts::from_labels(labels_of(train)?));
    let mut trainer = Trainer::<T>::new(lr_at(1), &weights, seed);
    let patience = config.patience_epochs.min(max_epochs);
    early_stopping_loop(
        model,
        phase,
        max_epochs,
        patience,
        |m, epoch| {
            let lr = lr_at(epoch);
            trainer.adam.set_lr(lr);
            Ok((trainer.train_epoch(m, train, config)?, lr))
        },
        |m| Ok(evaluate(m, val, &config.preprocess, config.batch_size)?.f1_avg),
    )
}

pub fn fit_with_early_stopping<T: Real>(
    model: Model<T>,
    train: &[&EcgRecord],
    val: &[&EcgRecord],
    config: &TrainConfig,
) -> Result<(Model<T>, TrainHistory)> {
    config.validate()?;
    fit_phase(model, train, val, config, Phase::Single, config.max_epochs, config.seed, |_| config.lr)
}

#[derive(Debug, Clone)]
pub struct ThreePhaseResult<T> {
    pub model: Model<T>,
    pub histories: [TrainHistory; 3],
    /// The phase (2 or 3) whose best model was returned.
    pub chosen_phase: Phase,
    pub best_val_f1_avg: f64,
    /// Conv parameter values of the best phase-1 model. Phase 2 must leave
    /// them bit-identical.
    pub phase1_best_conv: Vec<Vec<T>>,
}

/// Phase 1 trains the conv stack with temporal averaging; phase 2 swaps in
/// the LSTM and trains it with the conv stack frozen; phase 3 trains
/// everything with a step-decayed learning rate. The better of the phase 2
/// and phase 3 models (by validation `F1_avg`) is returned.
pub fn train_crnn_three_phase<T: Real>(
    config: &ModelConfig,
    train: &[&EcgRecord],
    val: &[&EcgRecord],
    train_config: &TrainConfig,
) -> Result<ThreePhaseResult<T>> {
    train_config.validate()?;
    let seed = train_config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<T>::build_with_rng(config.clone(), &mut rng)?;
    model.swap_aggregator(AggregatorKind::TemporalAverage, &mut rng)?;

    let p1_epochs = train_config.phase1_epochs.unwrap_or(train_config.max_epochs);
    let (mut model, h1) = fit_phase(model, train, val, train_config, Phase::Phase1, p1_epochs, seed ^ 0x1, |_| {
        train_config.lr
    })?;
    let phase1_best_conv: Vec<Vec<T>> = model.conv_params().iter().map(|p| p.value.clone()).collect();

    model.swap_aggregator(AggregatorKind::Lstm, &mut rng)?;
    model.set_conv_frozen(true);
    let (mut p2_model, h2) = fit_phase(
        model,
        train,
        val,
        train_config,
        Phase::Phase2,
        train_config.phase2_epochs,
        seed ^ 0x2,
        |_| train_config.lr,
    )?;

    let phase2_model = p2_model.clone();
    p2_model.set_conv_frozen(false);
    let p3_epochs = train_config.phase3_epochs.unwrap_or(train_config.max_epochs);
    let (p3_model, h3) = fit_phase(p2_model, train, val, train_config, Phase::Phase3, p3_epochs, seed ^ 0x3, |e| {
        train_config.phase3_lr(e)
    })?;

    let (model, chosen_phase, best) = if h3.best_val_f1_avg >= h2.best_val_f1_avg {
        (p3_model, Phase::Phase3, h3.best_val_f1_avg)
    } else {
        (phase2_model, Phase::Phase2, h2.best_val_f1_avg)
    };
    Ok(ThreePhaseResult {
        model,
        histories: [h1, h2, h3],
        chosen_phase,
        best_val_f1_avg: best,
        phase1_best_conv,
    })
}

/// Trains one model for `config.arch`: the three-phase protocol for a CRNN,
/// plain early-stopped training for a CNN.
pub fn train_model<T: Real>(
    config: &ModelConfig,
    train: &[&EcgRecord],
    val: &[&EcgRecord],
    train_config: &TrainConfig,
) -> Result<(Model<T>, Vec<TrainHistory>)> {
    match config.arch {
        crate::network::Arch::Crnn => {
            let r = train_crnn_three_phase(config, train, val, train_config)?;
            Ok((r.model, r.histories.to_vec()))
        }
        crate::network::Arch::Cnn => {
            let model = Model::build(config.clone(), train_config.seed)?;
            let (m, h) = fit_with_early_stopping(model, train, val, train_config)?;
            Ok((m, vec![h]))
        }
    }
}
