//! Synthetic two-class corpus: regular pulse trains (labelled Normal) and
//! pulse trains with irregular beat intervals (labelled AF).
//!
//! Both classes share the same mean rate, pulse shape and noise level, so the
//! only cue is the regularity of the beat-to-beat interval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::signal_io::{Dataset, EcgRecord, Label, SignalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub records: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub sample_rate_hz: f64,
    /// Beat rate of the regular class.
    pub regular_bpm: f64,
    /// Relative standard deviation of regular intervals.
    pub regular_jitter: f64,
    /// Irregular intervals are uniform on this range, in seconds.
    pub irregular_interval_s: (f64, f64),
    pub pulse_sigma_ms: f64,
    pub noise_sd: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            records: 200,
            min_duration_s: 9.0,
            max_duration_s: 30.0,
            sample_rate_hz: 300.0,
            regular_bpm: 80.0,
            regular_jitter: 0.02,
            irregular_interval_s: (0.3, 1.2),
            pulse_sigma_ms: 10.0,
            noise_sd: 0.05,
        }
    }
}

/// Sums a Gaussian pulse of unit height at each beat time and adds white
/// noise.
pub fn pulse_train<R: Rng + ?Sized>(
    beats_s: &[f64],
    n_samples: usize,
    sample_rate_hz: f64,
    sigma_ms: f64,
    noise_sd: f64,
    rng: &mut R,
) -> Vec<f32> {
    let sigma = sigma_ms * 1e-3 * sample_rate_hz;
    let reach = (5.0 * sigma).ceil() as isize;
    let mut x = vec![0.0f64; n_samples];
    for &b in beats_s {
        let center = b * sample_rate_hz;
        let c = center.round() as isize;
        for i in (c - reach).max(0)..(c + reach + 1).min(n_samples as isize) {
            let d = (i as f64 - center) / sigma;
            x[i as usize] += (-0.5 * d * d).exp();
        }
    }
    if noise_sd > 0.0 {
        let noise = Normal::new(0.0, noise_sd).expect("valid noise level");
        for v in &mut x {
            *v += noise.sample(rng);
        }
    }
    x.into_iter().map(|v| v as f32).collect()
}

fn beat_times<R: Rng + ?Sized>(config: &SyntheticConfig, duration_s: f64, irregular: bool, rng: &mut R) -> Vec<f64> {
    let period = 60.0 / config.regular_bpm;
    let mut t = rng.random_range(0.0..period);
    let mut beats = Vec::new();
    while t < duration_s {
        beats.push(t);
        t += if irregular {
            let (lo, hi) = config.irregular_interval_s;
            rng.random_range(lo..hi)
        } else {
            period * (1.0 + config.regular_jitter * rng.random_range(-1.0..1.0f64) * 3f64.sqrt())
        };
    }
    beats
}

/// Generates `config.records` records, alternating Normal and AF, with ids
/// `syn0000`, `syn0001`, and so on.
pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<Dataset, SignalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..config.records)
        .map(|i| {
            let irregular = i % 2 == 1;
            let duration = rng.random_range(config.min_duration_s..=config.max_duration_s);
            let n = (duration * config.sample_rate_hz).round() as usize;
            let beats = beat_times(config, duration, irregular, &mut rng);
            let samples = pulse_train(&beats, n, config.sample_rate_hz, config.pulse_sigma_ms, config.noise_sd, &mut rng);
            let label = if irregular { Label::Af } else { Label::Normal };
            EcgRecord::new(format!("syn{i:04}"), samples, config.sample_rate_hz, Some(label), 128)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::from_records(records)
}
