//! The two architectures: a CNN that averages its last feature maps over
//! time, and a CRNN that feeds them to a bidirectional LSTM.
//!
//! Both share the same convolutional stack of `num_blocks` ConvBlocks. Each
//! block is `layers_per_block` layers of 5x5 conv + batch norm + ReLU; the
//! last layer of a block changes the channel count and is followed by a 2x2
//! ceil-mode max pool and dropout. The very first conv lifts the single
//! spectrogram channel to `base_channels`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcompute::pool::pooled_len;
use crate::diffcompute::{
    softmax, Batch, BatchMask, BatchNorm, BiLstm, ComputeError, Conv2d, Dense, Dropout, MaxPool2x2, Mode, Param,
    Real, Relu, TemporalMean, Tensor,
};
use crate::spectrogram::Spectrogram;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("example {example} has {frames} frames; this depth needs at least {required}")]
    TooShortForDepth {
        example: usize,
        frames: usize,
        required: usize,
    },
    #[error("incompatible shapes: {0}")]
    IncompatibleShapes(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Cnn,
    Crnn,
}

impl std::str::FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(Arch::Cnn),
            "crnn" => Ok(Arch::Crnn),
            other => Err(format!("unknown architecture '{other}' (expected cnn or crnn)")),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Cnn => "cnn",
            Arch::Crnn => "crnn",
        })
    }
}

/// How the features leaving the conv stack become one vector per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    TemporalAverage,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub base_channels: usize,
    pub channel_increment: usize,
    pub lstm_layers: usize,
    /// Output width of each bidirectional layer (both directions together),
    /// unless `lstm_width_per_direction` is set.
    pub lstm_width: usize,
    pub lstm_width_per_direction: bool,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub input_bins: usize,
    /// Multiplier on channel counts and LSTM width; depth is never scaled.
    pub scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::cnn()
    }
}

/// `x * scale` rounded to the nearest multiple of 4, at least 4.
fn scaled(x: usize, scale: f64) -> usize {
    (((x as f64 * scale) / 4.0).round() as usize * 4).max(4)
}

impl ModelConfig {
    pub fn cnn() -> Self {
        ModelConfig {
            arch: Arch::Cnn,
            num_blocks: 6,
            layers_per_block: 4,
            base_channels: 64,
            channel_increment: 32,
            lstm_layers: 3,
            lstm_width: 200,
            lstm_width_per_direction: false,
            dropout_p: 0.15,
            num_classes: 4,
            input_bins: 33,
            scale: 1.0,
        }
    }

    pub fn crnn() -> Self {
        ModelConfig {
            arch: Arch::Crnn,
            num_blocks: 4,
            layers_per_block: 6,
            ..ModelConfig::cnn()
        }
    }

    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::Cnn => Self::cnn(),
            Arch::Crnn => Self::crnn(),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetworkError::BadConfig(m.to_string()));
        if self.num_blocks == 0 || self.layers_per_block == 0 {
            return bad("num_blocks and layers_per_block must be positive");
        }
        if self.base_channels == 0 || self.num_classes < 2 || self.input_bins == 0 {
            return bad("base_channels, input_bins must be positive and num_classes >= 2");
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad("scale must be a positive finite number");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.arch == Arch::Crnn {
            if self.lstm_layers == 0 {
                return bad("a CRNN needs at least one LSTM layer");
            }
            if !self.lstm_width_per_direction && self.lstm_width % 2 != 0 {
                return bad("lstm_width (total) must be even");
            }
        }
        Ok(())
    }

    pub fn aggregator(&self) -> AggregatorKind {
        match self.arch {
            Arch::Cnn => AggregatorKind::TemporalAverage,
            Arch::Crnn => AggregatorKind::Lstm,
        }
    }

    /// Output channels of each ConvBlock, after scaling.
    pub fn block_channels(&self) -> Vec<usize> {
        (0..self.num_blocks)
            .map(|b| scaled(self.base_channels + b * self.channel_increment, self.scale))
            .collect()
    }

    /// Feature (frequency) size at the input and after every block.
    pub fn feature_ladder(&self) -> Vec<usize> {
        let mut f = vec![self.input_bins];
        for _ in 0..self.num_blocks {
            f.push(pooled_len(*f.last().unwrap()));
        }
        f
    }

    pub fn conv_depth(&self) -> usize {
        self.num_blocks * self.layers_per_block
    }

    /// Per-frame vector length leaving the conv stack, `F_last * C_last`.
    pub fn stack_output_dim(&self) -> usize {
        self.feature_ladder().last().unwrap() * self.block_channels().last().unwrap()
    }

    pub fn lstm_hidden_per_direction(&self) -> usize {
        let width = if self.lstm_width_per_direction {
            scaled(self.lstm_width, self.scale)
        } else {
            scaled(self.lstm_width, self.scale) / 2
        };
        width.max(1)
    }

    /// Smallest number of spectrogram frames the stack accepts: the frames
    /// entering the last block must be at least 2.
    pub fn min_frames(&self) -> usize {
        (1usize << (self.num_blocks - 1)) + 1
    }
}

/// One conv + batch norm + ReLU, optionally followed by pooling.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    relu: Relu,
    pool: Option<MaxPool2x2>,
    pool_input_mask: Option<BatchMask>,
}

impl<T: Real> ConvLayer<T> {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, pooled: bool, rng: &mut R) -> Self {
        ConvLayer {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), cout),
            relu: Relu::new(),
            pool: pooled.then(MaxPool2x2::new),
            pool_input_mask: None,
        }
    }

    fn forward(&mut self, x: Batch<T>, mode: Mode, keep: bool) -> crate::diffcompute::Result<Batch<T>> {
        let y = self.conv.forward(x, keep)?;
        let y = self.bn.forward(y, mode)?;
        let y = self.relu.forward(y, keep);
        Ok(match self.pool.as_mut() {
            Some(pool) => {
                self.pool_input_mask = keep.then(|| y.mask.clone());
                pool.forward(&y, keep)
            }
            None => y,
        })
    }

    fn backward(&mut self, dy: Batch<T>, need_input_grad: bool) -> Option<Batch<T>> {
        let dy = match self.pool.as_mut() {
            Some(pool) => {
                let mask = self.pool_input_mask.take().expect("pool mask kept in forward");
                pool.backward(&dy, mask)
            }
            None => dy,
        };
        let dy = self.relu.backward(dy);
        let dy = self.bn.backward(&dy);
        self.conv.backward(&dy, need_input_grad)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub layers: Vec<ConvLayer<T>>,
    dropout: Dropout<T>,
}

#[derive(Debug, Clone)]
pub enum Aggregator<T> {
    TemporalAverage(TemporalMean),
    Lstm(BiLstm<T>),
}

impl<T: Real> Aggregator<T> {
    pub fn kind(&self) -> AggregatorKind {
        match self {
            Aggregator::TemporalAverage(_) => AggregatorKind::TemporalAverage,
            Aggregator::Lstm(_) => AggregatorKind::Lstm,
        }
    }
}

/// Shape of the activations after one stage of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    /// Padded frame count of the batch.
    pub time: usize,
    pub feat: usize,
    pub chan: usize,
    /// Valid frames of each example.
    pub valid: Vec<usize>,
}

impl StageShape {
    fn of<T: Real>(stage: impl Into<String>, x: &Batch<T>) -> Self {
        StageShape {
            stage: stage.into(),
            time: x.time,
            feat: x.feat,
            chan: x.chan,
            valid: x.mask.lengths().to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    stack_mask: BatchMask,
    stack_time: usize,
    stack_feat: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub aggregator: Aggregator<T>,
    head_dropout: Dropout<T>,
    pub classifier: Dense<T>,
    conv_frozen: bool,
    cache: Option<ForwardCache>,
    trace: Vec<StageShape>,
}

impl<T: Real> Model<T> {
    /// Builds the network for `config` with weights drawn from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(config, &mut rng)
    }

    pub fn build_with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let channels = config.block_channels();
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut prev = channels[0];
        for (b, &cout) in channels.iter().enumerate() {
            let mut layers = Vec::with_capacity(config.layers_per_block);
            for l in 0..config.layers_per_block {
                let cin = if b == 0 && l == 0 { 1 } else { prev };
                let last = l + 1 == config.layers_per_block;
                let out = if last { cout } else { prev };
                layers.push(ConvLayer::new(&format!("block{b}.layer{l}"), cin, out, last, rng));
            }
            prev = cout;
            blocks.push(ConvBlock {
                layers,
                dropout: Dropout::new(config.dropout_p),
            });
        }
        let (aggregator, classifier) = Self::make_head(&config, config.aggregator(), rng);
        Ok(Model {
            head_dropout: Dropout::new(config.dropout_p),
            config,
            blocks,
            aggregator,
            classifier,
            conv_frozen: false,
            cache: None,
            trace: Vec::new(),
        })
    }

    fn make_head<R: Rng + ?Sized>(config: &ModelConfig, kind: AggregatorKind, rng: &mut R) -> (Aggregator<T>, Dense<T>) {
        let dim = config.stack_output_dim();
        match kind {
            AggregatorKind::TemporalAverage => (
                Aggregator::TemporalAverage(TemporalMean::new()),
                Dense::new("classifier", dim, config.num_classes, rng),
            ),
            AggregatorKind::Lstm => {
                let lstm = BiLstm::new(
                    "lstm",
                    dim,
                    config.lstm_hidden_per_direction(),
                    config.lstm_layers.max(1),
                    config.dropout_p,
                    rng,
                );
                let out = lstm.output_dim();
                (Aggregator::Lstm(lstm), Dense::new("classifier", out, config.num_classes, rng))
            }
        }
    }

    /// Replaces the aggregator and classifier with freshly initialized ones
    /// of the requested kind. Conv parameters are untouched.
    pub fn swap_aggregator<R: Rng + ?Sized>(&mut self, target: AggregatorKind, rng: &mut R) -> Result<()> {
        if self.config.stack_output_dim() == 0 {
            return Err(NetworkError::IncompatibleShapes("conv stack emits empty frames".into()));
        }
        if target == AggregatorKind::Lstm && self.config.lstm_layers == 0 {
            return Err(NetworkError::IncompatibleShapes("config has no LSTM layers".into()));
        }
        let (aggregator, classifier) = Self::make_head(&self.config, target, rng);
        self.aggregator = aggregator;
        self.classifier = classifier;
        self.cache = None;
        Ok(())
    }

    pub fn aggregator_kind(&self) -> AggregatorKind {
        self.aggregator.kind()
    }

    pub fn classifier_inputs(&self) -> usize {
        self.classifier.inputs
    }

    /// Freezes (or unfreezes) every conv and batch-norm parameter. While
    /// frozen, training forward passes use batch-norm running statistics and
    /// the backward pass stops at the aggregator.
    pub fn set_conv_frozen(&mut self, frozen: bool) {
        self.conv_frozen = frozen;
        for p in self.conv_params_mut() {
            p.frozen = frozen;
        }
    }

    pub fn conv_frozen(&self) -> bool {
        self.conv_frozen
    }

    pub fn conv_params(&self) -> Vec<&Param<T>> {
        self.blocks.iter().flat_map(|b| b.layers.iter().flat_map(|l| l.params())).collect()
    }

    fn conv_params_mut(&mut self) -> Vec<&mut Param<T>> {
        block_params_mut(&mut self.blocks)
    }

    /// All parameters in a fixed order: conv stack, aggregator, classifier.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv_params();
        if let Aggregator::Lstm(lstm) = &self.aggregator {
            p.extend(lstm.params());
        }
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = block_params_mut(&mut self.blocks);
        if let Aggregator::Lstm(lstm) = &mut self.aggregator {
            p.extend(lstm.params_mut());
        }
        p.extend(self.classifier.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params().iter().filter(|p| p.is_trainable()).map(|p| p.len()).sum()
    }

    /// Shapes recorded during the most recent forward pass.
    pub fn trace(&self) -> &[StageShape] {
        &self.trace
    }

    fn check_depth(&self, x: &Batch<T>) -> Result<()> {
        if x.feat != self.config.input_bins || x.chan != 1 {
            return Err(NetworkError::IncompatibleShapes(format!(
                "expected frames of {} bins x 1 channel, got {} x {}",
                self.config.input_bins, x.feat, x.chan
            )));
        }
        let required = self.config.min_frames();
        for (example, &frames) in x.mask.lengths().iter().enumerate() {
            if frames < required {
                return Err(NetworkError::TooShortForDepth {
                    example,
                    frames,
                    required,
                });
            }
        }
        Ok(())
    }

    /// Forward pass to logits, shape `[B, 1, 1, num_classes]`.
    pub fn forward<R: Rng + ?Sized>(&mut self, x: Batch<T>, mode: Mode, rng: &mut R) -> Result<Batch<T>> {
        self.check_depth(&x)?;
        let train = mode == Mode::Train;
        let conv_train = train && !self.conv_frozen;
        let conv_mode = if conv_train { Mode::Train } else { Mode::Infer };
        self.trace.clear();
        self.trace.push(StageShape::of("input", &x));
        let mut h = x;
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for layer in &mut block.layers {
                h = layer.forward(h, conv_mode, conv_train)?;
            }
            h = block.dropout.forward(h, mode, rng);
            self.trace.push(StageShape::of(format!("block{}", b + 1), &h));
        }
        let cache = ForwardCache {
            stack_mask: h.mask.clone(),
            stack_time: h.time,
            stack_feat: h.feat,
        };
        let pooled = match &mut self.aggregator {
            Aggregator::TemporalAverage(mean) => mean.forward(&h, train),
            Aggregator::Lstm(lstm) => {
                let flat = h.flatten_features();
                self.trace.push(StageShape::of("flatten", &flat));
                lstm.forward(flat, mode, rng)?
            }
        };
        self.trace.push(StageShape::of("aggregate", &pooled));
        let pooled = self.head_dropout.forward(pooled, mode, rng);
        let logits = self.classifier.forward(pooled, train)?;
        self.trace.push(StageShape::of("classifier", &logits));
        self.cache = train.then_some(cache);
        Ok(logits)
    }

    /// Backpropagates the gradient of the loss with respect to the logits,
    /// accumulating into every trainable parameter.
    pub fn backward(&mut self, dlogits: &Batch<T>) {
        let cache = self.cache.take().expect("backward without a training forward pass");
        let d = self.classifier.backward(dlogits);
        let d = self.head_dropout.backward(d);
        let d = match &mut self.aggregator {
            Aggregator::TemporalAverage(mean) => mean.backward(&d),
            Aggregator::Lstm(lstm) => lstm
                .backward(&d, cache.stack_mask.clone(), cache.stack_time)
                .unflatten_features(cache.stack_feat),
        };
        if self.conv_frozen {
            return;
        }
        let mut d = Some(d);
        let n_blocks = self.blocks.len();
        for (b, block) in self.blocks.iter_mut().enumerate().rev() {
            let mut g = block.dropout.backward(d.take().unwrap());
            let n_layers = block.layers.len();
            for (l, layer) in block.layers.iter_mut().enumerate().rev() {
                let first = b == 0 && l == 0;
                match layer.backward(g, !first) {
                    Some(next) => g = next,
                    None => {
                        debug_assert!(first && n_layers > 0 && n_blocks > 0);
                        return;
                    }
                }
            }
            d = Some(g);
        }
    }

    /// Class probabilities in inference mode, one row per example.
    pub fn predict_proba(&mut self, x: Batch<T>) -> Result<Vec<Vec<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.forward(x, Mode::Infer, &mut rng)?;
        Ok((0..logits.batch).map(|b| softmax(logits.row(b))).collect())
    }
}

fn block_params_mut<T: Real>(blocks: &mut [ConvBlock<T>]) -> Vec<&mut Param<T>> {
    blocks
        .iter_mut()
        .flat_map(|b| b.layers.iter_mut().flat_map(|l| l.params_mut()))
        .collect()
}

/// Stacks spectrograms into a padded single-channel batch.
pub fn spectrogram_batch<T: Real>(specs: &[&Spectrogram]) -> Result<Batch<T>> {
    let tensors: Vec<Tensor<T>> = specs
        .iter()
        .map(|s| {
            let data = s.frames[..s.valid_frames * s.n_bins].iter().map(|&v| crate::diffcompute::cst(v)).collect();
            Tensor::new(s.valid_frames, s.n_bins, 1, data)
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(Batch::from_tensors(&tensors)?)
}
