//! Activation containers.
//!
//! All activations use a `[time][feature][channel]` layout, channels
//! fastest. A [`Batch`] stacks examples padded to a common number of frames
//! and carries a [`BatchMask`] with each example's valid length.

use super::{shape_err, Real, Result};

/// A single example, `time x feat x chan`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub time: usize,
    pub feat: usize,
    pub chan: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(time: usize, feat: usize, chan: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != time * feat * chan {
            return Err(shape_err(
                "tensor",
                format!("{time}x{feat}x{chan} needs {} values, got {}", time * feat * chan, data.len()),
            ));
        }
        Ok(Tensor {
            time,
            feat,
            chan,
            data,
        })
    }

    pub fn zeros(time: usize, feat: usize, chan: usize) -> Self {
        Tensor {
            time,
            feat,
            chan,
            data: vec![T::zero(); time * feat * chan],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.time, self.feat, self.chan]
    }

    pub fn at(&self, t: usize, f: usize, c: usize) -> T {
        self.data[(t * self.feat + f) * self.chan + c]
    }
}

/// Valid frame count of every example in a padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMask {
    valid: Vec<usize>,
}

impl BatchMask {
    pub fn new(valid: Vec<usize>, padded_time: usize) -> Result<Self> {
        if let Some(&v) = valid.iter().find(|&&v| v == 0 || v > padded_time) {
            return Err(shape_err(
                "mask",
                format!("valid length {v} outside 1..={padded_time}"),
            ));
        }
        Ok(BatchMask { valid })
    }

    pub fn full(batch: usize, time: usize) -> Self {
        BatchMask {
            valid: vec![time; batch],
        }
    }

    pub fn valid(&self, b: usize) -> usize {
        self.valid[b]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Lengths after a ceil-mode 2x pooling in time.
    pub fn pooled(&self) -> BatchMask {
        BatchMask {
            valid: self.valid.iter().map(|v| v.div_ceil(2)).collect(),
        }
    }
}

/// Padded stack of examples, `batch x time x feat x chan`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub time: usize,
    pub feat: usize,
    pub chan: usize,
    pub mask: BatchMask,
}

impl<T: Real> Batch<T> {
    pub fn zeros(time: usize, feat: usize, chan: usize, mask: BatchMask) -> Self {
        let batch = mask.len();
        Batch {
            data: vec![T::zero(); batch * time * feat * chan],
            batch,
            time,
            feat,
            chan,
            mask,
        }
    }

    /// A batch of fixed-size vectors (`time = feat = 1`).
    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("batch", "row data does not match rows x cols"));
        }
        Ok(Batch {
            data,
            batch: rows,
            time: 1,
            feat: 1,
            chan: cols,
            mask: BatchMask::full(rows, 1),
        })
    }

    /// Stacks tensors sharing `feat` and `chan`, zero-padding in time.
    pub fn from_tensors(tensors: &[Tensor<T>]) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| shape_err("batch", "empty batch"))?;
        let (feat, chan) = (first.feat, first.chan);
        let time = tensors.iter().map(|t| t.time).max().unwrap_or(0);
        let mask = BatchMask::new(tensors.iter().map(|t| t.time).collect(), time)?;
        let mut out = Batch::zeros(time, feat, chan, mask);
        for (b, t) in tensors.iter().enumerate() {
            if t.feat != feat || t.chan != chan {
                return Err(shape_err(
                    "batch",
                    format!("example {b} is ?x{}x{}, expected ?x{feat}x{chan}", t.feat, t.chan),
                ));
            }
            out.example_mut(b)[..t.data.len()].copy_from_slice(&t.data);
        }
        Ok(out)
    }

    /// Extracts the valid frames of example `b`.
    pub fn tensor(&self, b: usize) -> Tensor<T> {
        let v = self.mask.valid(b);
        Tensor {
            time: v,
            feat: self.feat,
            chan: self.chan,
            data: self.example(b)[..v * self.frame_len()].to_vec(),
        }
    }

    pub fn frame_len(&self) -> usize {
        self.feat * self.chan
    }

    pub fn example_len(&self) -> usize {
        self.time * self.feat * self.chan
    }

    pub fn valid(&self, b: usize) -> usize {
        self.mask.valid(b)
    }

    pub fn example(&self, b: usize) -> &[T] {
        let n = self.example_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn example_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.example_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Valid part of example `b`.
    pub fn valid_slice(&self, b: usize) -> &[T] {
        let n = self.valid(b) * self.frame_len();
        &self.example(b)[..n]
    }

    pub fn valid_slice_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.valid(b) * self.frame_len();
        &mut self.example_mut(b)[..n]
    }

    /// Row `b` of a vector batch.
    pub fn row(&self, b: usize) -> &[T] {
        self.example(b)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.time, self.feat, self.chan]
    }

    /// Merges feature and channel axes: `[f][c]` becomes channel `f*C + c`.
    /// With channels-last storage this is a relabelling only.
    pub fn flatten_features(mut self) -> Self {
        self.chan *= self.feat;
        self.feat = 1;
        self
    }

    /// Inverse of [`Batch::flatten_features`].
    pub fn unflatten_features(mut self, feat: usize) -> Self {
        assert_eq!(self.chan % feat, 0);
        self.chan /= feat;
        self.feat = feat;
        self
    }

    pub fn same_layout(&self) -> Self {
        Batch::zeros(self.time, self.feat, self.chan, self.mask.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Batch {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of `(example, frame, feature)` positions inside the mask.
    pub fn valid_positions(&self) -> usize {
        self.mask.lengths().iter().sum::<usize>() * self.feat
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            data: self.data.iter().map(|&v| super::cst(super::to_f64(v))).collect(),
            batch: self.batch,
            time: self.time,
            feat: self.feat,
            chan: self.chan,
            mask: self.mask.clone(),
        }
    }
}
