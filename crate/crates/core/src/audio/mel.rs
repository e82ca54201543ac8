//! Magnitude mel spectrograms and per-spectrogram log/min-max normalization.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::AudioClip;
use crate::{Error, Result};

/// Added to magnitudes before the natural log.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::SAMPLE_RATE,
            window_samples: crate::WINDOW_LENGTH,
            hop_samples: crate::HOP_LENGTH,
            n_mels: crate::N_MELS,
            f_min: 30.0,
            f_max: crate::SAMPLE_RATE as f64 / 2.0,
        }
    }
}

/// A T×F time-frequency matrix (frames by mel bins).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub hop_samples: usize,
    pub window_samples: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    /// Wraps an already computed T×F matrix using the default framing.
    pub fn from_values(values: Array2<f64>) -> Self {
        let n_mels = values.ncols();
        Self {
            values,
            hop_samples: crate::HOP_LENGTH,
            window_samples: crate::WINDOW_LENGTH,
            n_mels,
            sample_rate: crate::SAMPLE_RATE,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

/// Slaney-style mel scale: linear below 1 kHz, logarithmic above.
pub(crate) fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

pub(crate) fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Triangular filters with area (Slaney) normalization, shape
/// (n_mels, window/2 + 1).
fn filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.window_samples / 2 + 1;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.window_samples as f64)
        .collect();
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            let w = rising.min(falling).max(0.0);
            fb[[m, k]] = w * norm;
        }
    }
    fb
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct MelExtractor {
    config: MelConfig,
    window: Vec<f64>,
    filters: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("config", &self.config).finish()
    }
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        if config.window_samples < 2 || config.hop_samples == 0 || config.n_mels == 0 {
            return Err(Error::Config("mel framing parameters must be positive".into()));
        }
        if !(config.f_min >= 0.0 && config.f_max > config.f_min) {
            return Err(Error::Config("mel frequency range is empty".into()));
        }
        let n = config.window_samples;
        // Periodic Hann.
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filters = filterbank(&config);
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            config,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Number of frames for `len` samples: frame t is centred on sample
    /// `t * hop`, giving `ceil(len / hop)` frames.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.config.hop_samples)
    }

    /// Mel magnitude spectrogram (not yet log-normalized).
    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        let cfg = &self.config;
        if clip.sample_rate != cfg.sample_rate {
            return Err(Error::InvalidInput(format!(
                "expected {} Hz audio, got {} Hz",
                cfg.sample_rate, clip.sample_rate
            )));
        }
        let n = cfg.window_samples;
        let len = clip.samples.len();
        if len < n {
            return Err(Error::InvalidInput(format!(
                "clip of {len} samples is shorter than one {n}-sample window"
            )));
        }
        let half = (n / 2) as isize;
        let last = len as isize - 1;
        // Reflect padding without repeating the edge sample.
        let sample_at = |i: isize| -> f64 {
            let j = if i < 0 {
                -i
            } else if i > last {
                2 * last - i
            } else {
                i
            };
            clip.samples[j as usize] as f64
        };

        let frames = self.frame_count(len);
        let n_bins = n / 2 + 1;
        let mut values = Array2::zeros((frames, cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; n_bins];
        for t in 0..frames {
            let start = (t * cfg.hop_samples) as isize - half;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(sample_at(start + i as isize) * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mag.iter_mut().zip(&buf[..n_bins]) {
                *m = c.norm();
            }
            for (mel, out) in values.row_mut(t).iter_mut().enumerate() {
                let row = self.filters.row(mel);
                *out = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
            }
        }
        Ok(MelSpectrogram {
            values,
            hop_samples: cfg.hop_samples,
            window_samples: n,
            n_mels: cfg.n_mels,
            sample_rate: cfg.sample_rate,
        })
    }

    /// `compute` followed by [`log_normalize`].
    pub fn features(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        Ok(log_normalize(&self.compute(clip)?))
    }
}

/// Mel magnitude spectrogram with the default 16 kHz / 2048 / 512 / 229
/// parameters.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<MelSpectrogram> {
    MelExtractor::new(MelConfig::default())?.compute(clip)
}

/// `(ln(m + LOG_FLOOR) - min) / (max - min)` with min and max over the whole
/// matrix. A constant matrix maps to zeros.
pub fn log_normalize(spec: &MelSpectrogram) -> MelSpectrogram {
    let logged = spec.values.mapv(|m| (m.max(0.0) + LOG_FLOOR).ln());
    let min = logged.iter().copied().fold(f64::INFINITY, f64::min);
    let max = logged.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if range > 0.0 && range.is_finite() {
        logged.mapv(|v| ((v - min) / range).clamp(0.0, 1.0))
    } else {
        Array2::zeros(logged.raw_dim())
    };
    MelSpectrogram {
        values,
        ..spec.clone()
    }
}
