//! Training-time signal augmentation: dropout bursts and random resampling.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::signal_io::EcgRecord;

/// How `burst_width_ms` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BurstExtent {
    /// The whole zeroed span is `burst_width_ms` long (center +- width/2).
    #[default]
    Total,
    /// `burst_width_ms` is zeroed on each side of the center.
    EachSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Mean number of bursts per 10 s of signal.
    pub burst_rate_per_10s: f64,
    pub burst_width_ms: f64,
    pub burst_extent: BurstExtent,
    /// Heart rate every training record is assumed to have.
    pub hr_assumed_bpm: f64,
    /// Range the emulated heart rate is drawn from, uniformly.
    pub hr_range_bpm: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            burst_rate_per_10s: 2.0,
            burst_width_ms: 50.0,
            burst_extent: BurstExtent::Total,
            hr_assumed_bpm: 80.0,
            hr_range_bpm: (60.0, 120.0),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.hr_range_bpm;
        if !(lo > 0.0 && hi < 300.0 && lo <= hi) {
            return Err(format!("hr range must satisfy 0 < lo <= hi < 300, got [{lo}, {hi}]"));
        }
        if !(self.hr_assumed_bpm > 0.0) {
            return Err("assumed heart rate must be positive".into());
        }
        if !(self.burst_width_ms > 0.0) {
            return Err("burst width must be positive".into());
        }
        if !(self.burst_rate_per_10s >= 0.0 && self.burst_rate_per_10s.is_finite()) {
            return Err("burst rate must be a non-negative number".into());
        }
        Ok(())
    }

    /// Number of samples zeroed on each side of a burst center.
    pub fn burst_half_width(&self, sample_rate_hz: f64) -> usize {
        let side_s = match self.burst_extent {
            BurstExtent::Total => self.burst_width_ms / 2000.0,
            BurstExtent::EachSide => self.burst_width_ms / 1000.0,
        };
        // Guard against 7.4999999 when the span is an exact sample count.
        (side_s * sample_rate_hz + 1e-9).floor() as usize
    }
}

/// Zeroes `center - half ..= center + half` (clipped to the signal) around
/// each center.
pub fn zero_bursts(samples: &mut [f32], centers: &[usize], half_width: usize) {
    let n = samples.len();
    for &c in centers {
        let lo = c.saturating_sub(half_width);
        let hi = (c + half_width).min(n.saturating_sub(1));
        for s in &mut samples[lo..=hi] {
            *s = 0.0;
        }
    }
}

/// Draws burst centers: a Poisson number with mean proportional to the
/// record duration, each uniform over the sample indices.
pub fn draw_burst_centers<R: Rng + ?Sized>(
    len: usize,
    sample_rate_hz: f64,
    config: &AugmentConfig,
    rng: &mut R,
) -> Vec<usize> {
    let duration_s = len as f64 / sample_rate_hz;
    let mean = config.burst_rate_per_10s * duration_s / 10.0;
    if len == 0 || mean <= 0.0 {
        return Vec::new();
    }
    let count = Poisson::new(mean)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0);
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

pub fn dropout_bursts<R: Rng + ?Sized>(
    samples: &[f32],
    sample_rate_hz: f64,
    config: &AugmentConfig,
    rng: &mut R,
) -> Vec<f32> {
    let centers = draw_burst_centers(samples.len(), sample_rate_hz, config, rng);
    let mut out = samples.to_vec();
    zero_bursts(&mut out, &centers, config.burst_half_width(sample_rate_hz));
    out
}

/// Time-stretch factor `hr_assumed / r` for a heart rate `r` drawn
/// uniformly from the configured range.
pub fn draw_stretch_factor<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> f64 {
    let (lo, hi) = config.hr_range_bpm;
    let rate = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    config.hr_assumed_bpm / rate
}

/// Linear-interpolation resampling to `round(factor * len)` samples;
/// output sample `i` reads the input at position `i / factor`, clamped to
/// the last sample. `factor == 1` returns an exact copy.
pub fn resample_by_factor(samples: &[f32], factor: f64) -> Vec<f32> {
    if factor == 1.0 || samples.len() < 2 {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as f64 * factor).round() as usize).max(1);
    let last = (samples.len() - 1) as f64;
    (0..out_len)
        .map(|i| {
            let pos = (i as f64 / factor).min(last);
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            if j + 1 >= samples.len() || frac == 0.0 {
                samples[j]
            } else {
                let (a, b) = (samples[j] as f64, samples[j + 1] as f64);
                (a + (b - a) * frac) as f32
            }
        })
        .collect()
}

pub fn random_resample<R: Rng + ?Sized>(samples: &[f32], config: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let factor = draw_stretch_factor(config, rng);
    resample_by_factor(samples, factor)
}

/// Random resampling followed by dropout bursts, so burst widths are exact
/// in output time. Disabled configs return the record unchanged.
pub fn augment<R: Rng + ?Sized>(record: &EcgRecord, config: &AugmentConfig, rng: &mut R) -> EcgRecord {
    if !config.enabled {
        return record.clone();
    }
    let resampled = random_resample(&record.samples, config, rng);
    let samples = dropout_bursts(&resampled, record.sample_rate_hz, config, rng);
    let tag: u32 = rng.random();
    EcgRecord {
        id: format!("{}#aug{tag:08x}", record.id),
        samples,
        sample_rate_hz: record.sample_rate_hz,
        label: record.label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_io::Label;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize) -> Vec<f32> {
        (0..n).map(|i| 1.0 + i as f32 * 0.01).collect()
    }

    #[test]
    fn zero_rate_is_identity() {
        let cfg = AugmentConfig {
            burst_rate_per_10s: 0.0,
            ..Default::default()
        };
        let x = ramp(3000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dropout_bursts(&x, 300.0, &cfg, &mut rng), x);
    }

    #[test]
    fn fifty_ms_burst_at_300hz_is_fifteen_samples() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.burst_half_width(300.0), 7);
        let mut x = ramp(3000);
        zero_bursts(&mut x, &[1500], 7);
        let zeros: Vec<usize> = (0..3000).filter(|&i| x[i] == 0.0).collect();
        assert_eq!(zeros, (1493..=1507).collect::<Vec<_>>());
        let wide = AugmentConfig {
            burst_extent: BurstExtent::EachSide,
            ..Default::default()
        };
        assert_eq!(wide.burst_half_width(300.0), 15);
    }

    #[test]
    fn overlapping_bursts_union() {
        let mut x = ramp(1000);
        zero_bursts(&mut x, &[100, 105, 995], 7);
        let zeros = x.iter().filter(|&&v| v == 0.0).count();
        // [93,112] plus [988,999] clipped at the end of the signal.
        assert_eq!(zeros, 20 + 12);
        assert!(zeros <= 3 * 15);
    }

    #[test]
    fn bursts_only_touch_their_windows() {
        let cfg = AugmentConfig {
            burst_rate_per_10s: 10.0,
            ..Default::default()
        };
        let x = ramp(9000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = draw_burst_centers(x.len(), 300.0, &cfg, &mut rng);
        assert!(!centers.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = dropout_bursts(&x, 300.0, &cfg, &mut rng);
        for i in 0..x.len() {
            let inside = centers.iter().any(|&c| i + 7 >= c && i <= c + 7);
            if inside {
                assert_eq!(y[i], 0.0);
            } else {
                assert_eq!(y[i].to_bits(), x[i].to_bits());
            }
        }
    }

    #[test]
    fn unit_factor_is_bit_exact() {
        let x: Vec<f32> = (0..777).map(|i| (i as f32 * 0.3).sin()).collect();
        assert_eq!(resample_by_factor(&x, 1.0), x);
        let cfg = AugmentConfig {
            hr_range_bpm: (80.0, 80.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_resample(&x, &cfg, &mut rng), x);
    }

    #[test]
    fn stretch_lengths_at_range_ends() {
        let x = ramp(3000);
        assert_eq!(resample_by_factor(&x, 80.0 / 120.0).len(), 2000);
        assert_eq!(resample_by_factor(&x, 80.0 / 60.0).len(), 4000);
    }

    /// Unit pulses every `period` samples.
    fn pulse_train(len: usize, period: usize) -> Vec<f32> {
        (0..len).map(|i| if i % period == 0 { 1.0 } else { 0.0 }).collect()
    }

    fn peak_positions(x: &[f32]) -> Vec<usize> {
        (1..x.len() - 1)
            .filter(|&i| x[i] > 0.5 && x[i] >= x[i - 1] && x[i] > x[i + 1])
            .chain(if x[0] > 0.5 { Some(0) } else { None })
            .collect()
    }

    #[test]
    fn faster_heart_rate_shortens_beat_intervals() {
        // 80 bpm at 300 Hz: one beat every 225 samples.
        let x = pulse_train(3000, 225);
        let y = resample_by_factor(&x, 80.0 / 120.0);
        let mut peaks = peak_positions(&y);
        peaks.sort();
        let intervals: Vec<usize> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(!intervals.is_empty());
        // 120 bpm at 300 Hz is 150 samples per beat.
        for d in intervals {
            assert!((149..=151).contains(&d), "interval {d}");
        }
    }

    #[test]
    fn augment_disabled_is_identity_and_enabled_is_deterministic() {
        let rec = EcgRecord::new("r1", ramp(2700), 300.0, Some(Label::Af), 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(augment(&rec, &AugmentConfig::disabled(), &mut rng), rec);

        let cfg = AugmentConfig::default();
        let a = augment(&rec, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = augment(&rec, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.label, Some(Label::Af));
        assert!(a.id.starts_with("r1#aug"));
    }

    #[test]
    fn augment_length_bounds() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for len in [128usize, 129, 1000, 2700, 9001] {
            let rec = EcgRecord::new("x", ramp(len), 300.0, None, 128).unwrap();
            for _ in 0..200 {
                let out = augment(&rec, &cfg, &mut rng).samples.len();
                let lo = (2.0 * len as f64 / 3.0).ceil() as usize - 1;
                let hi = (4.0 * len as f64 / 3.0).floor() as usize + 1;
                assert!((lo..=hi).contains(&out), "len {len} -> {out}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            hr_range_bpm: (0.0, 120.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            hr_range_bpm: (60.0, 300.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
