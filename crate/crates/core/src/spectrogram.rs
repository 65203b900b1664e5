//! Log-spectrogram frontend.
//!
//! A record is cut into Tukey-windowed frames (64 samples, hop 32 at the
//! defaults), each frame is transformed with a real DFT and the magnitudes of
//! the 33 non-negative frequency bins are kept. The magnitudes are then
//! log-compressed and standardized per record.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal_io::EcgRecord;

#[derive(Debug, Error, PartialEq)]
pub enum SpectrogramError {
    #[error("Tukey shape parameter must lie in [0, 1], got {0}")]
    BadShape(f64),
    #[error("window length must be at least 2, got {0}")]
    BadWindow(usize),
    #[error("hop must be positive")]
    BadHop,
    #[error("signal has {len} samples, shorter than the {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("log transform requires non-negative input, found {value} at frame {frame}, bin {bin}")]
    NegativeInput { value: f64, frame: usize, bin: usize },
}

pub type Result<T> = std::result::Result<T, SpectrogramError>;

/// Time-by-frequency matrix stored row-major (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
    /// Frames holding real data; frames past this index are padding.
    pub valid_frames: usize,
    pub hop_samples: usize,
    pub window_samples: usize,
}

impl Spectrogram {
    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.frames[frame * self.n_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.frames[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Spectrogram {
        Spectrogram {
            frames: self.frames.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Writes the matrix as comma-separated text, one frame per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.frames.len() * 12);
        for t in 0..self.n_frames {
            let row: Vec<String> = self.frame(t).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Little-endian binary dump: `u32` frames, `u32` bins, then `f32` values.
    pub fn to_bin(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.frames.len());
        out.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_bins as u32).to_le_bytes());
        for &v in &self.frames {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }
}

/// Frontend parameters. Defaults reproduce the published configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window_samples: usize,
    pub hop_samples: usize,
    pub tukey_shape: f64,
    pub eps: f64,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window_samples: 64,
            hop_samples: 32,
            tukey_shape: 0.25,
            eps: 1e-6,
            normalize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn n_bins(&self) -> usize {
        self.window_samples / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        frame_count(len, self.window_samples, self.hop_samples)
    }
}

/// `floor((len - window) / hop) + 1`, or 0 when the signal is shorter than
/// one window.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window || hop == 0 {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Symmetric tapered-cosine window. `shape` is the fraction of the window
/// covered by the two cosine tapers: 0 gives a rectangular window and 1 a
/// Hann window.
pub fn tukey_window(length: usize, shape: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&shape) {
        return Err(SpectrogramError::BadShape(shape));
    }
    if length < 2 {
        return Err(SpectrogramError::BadWindow(length));
    }
    let mut w = vec![1.0; length];
    if shape == 0.0 {
        return Ok(w);
    }
    let span = (length - 1) as f64;
    let taper = shape * span / 2.0;
    // Fill the first half and mirror it so the window is exactly symmetric.
    for n in 0..length.div_ceil(2) {
        let x = n as f64;
        let v = if x < taper {
            0.5 * (1.0 + (PI * (x / taper - 1.0)).cos())
        } else {
            1.0
        };
        w[n] = v;
        w[length - 1 - n] = v;
    }
    Ok(w)
}

/// One-sided STFT magnitude with no signal padding.
pub fn stft_magnitude(
    samples: &[f32],
    window_samples: usize,
    hop_samples: usize,
    shape: f64,
) -> Result<Spectrogram> {
    if hop_samples == 0 {
        return Err(SpectrogramError::BadHop);
    }
    let window = tukey_window(window_samples, shape)?;
    if samples.len() < window_samples {
        return Err(SpectrogramError::TooShort {
            len: samples.len(),
            window: window_samples,
        });
    }
    let n_frames = frame_count(samples.len(), window_samples, hop_samples);
    let n_bins = window_samples / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_samples);
    let mut buffer = vec![Complex::new(0.0, 0.0); window_samples];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut frames = Vec::with_capacity(n_frames * n_bins);
    for t in 0..n_frames {
        let start = t * hop_samples;
        for (i, slot) in buffer.iter_mut().enumerate() {
            *slot = Complex::new(samples[start + i] as f64 * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buffer, &mut scratch);
        frames.extend(buffer[..n_bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram {
        frames,
        n_frames,
        n_bins,
        valid_frames: n_frames,
        hop_samples,
        window_samples,
    })
}

/// Entry-wise `ln(value + eps)`.
pub fn log_transform(spec: &Spectrogram, eps: f64) -> Result<Spectrogram> {
    if let Some(i) = spec.frames.iter().position(|&v| v < 0.0 || v.is_nan()) {
        return Err(SpectrogramError::NegativeInput {
            value: spec.frames[i],
            frame: i / spec.n_bins,
            bin: i % spec.n_bins,
        });
    }
    Ok(spec.map(|v| (v + eps).ln()))
}

/// Inputs whose variance falls below this are treated as constant and map
/// to all zeros.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-record standardization to zero mean and unit variance, with
/// statistics taken over the valid frames only. Padding frames are left
/// untouched.
pub fn normalize(spec: &Spectrogram) -> Spectrogram {
    let n = spec.valid_frames * spec.n_bins;
    if n == 0 {
        return spec.clone();
    }
    let valid = &spec.frames[..n];
    let mean = valid.iter().sum::<f64>() / n as f64;
    let var = valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let mut out = spec.clone();
    if var < VARIANCE_FLOOR {
        out.frames[..n].iter_mut().for_each(|v| *v = 0.0);
        return out;
    }
    let scale = var.sqrt().recip();
    for v in &mut out.frames[..n] {
        *v = (*v - mean) * scale;
    }
    out
}

/// STFT magnitude, log transform and (optionally) normalization.
pub fn preprocess_samples(samples: &[f32], config: &PreprocessConfig) -> Result<Spectrogram> {
    let spec = stft_magnitude(
        samples,
        config.window_samples,
        config.hop_samples,
        config.tukey_shape,
    )?;
    let spec = log_transform(&spec, config.eps)?;
    Ok(if config.normalize { normalize(&spec) } else { spec })
}

pub fn preprocess(record: &EcgRecord, config: &PreprocessConfig) -> Result<Spectrogram> {
    preprocess_samples(&record.samples, config)
}
