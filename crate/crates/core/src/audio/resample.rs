//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel.

use super::AudioClip;
use crate::{Error, Result};

/// Zero crossings of the sinc kernel on each side.
const ZERO_CROSSINGS: f64 = 16.0;
/// Passband edge as a fraction of the output Nyquist frequency.
const ROLLOFF: f64 = 0.945;
const KAISER_BETA: f64 = 8.6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resamples `clip` to `target_rate`. Output length is
/// `ceil(len * target_rate / source_rate)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(Error::InvalidInput("cannot resample an empty clip".into()));
    }
    if target_rate == 0 || clip.sample_rate == 0 {
        return Err(Error::InvalidInput("sample rates must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }

    let g = gcd(clip.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g; // L
    let down = clip.sample_rate as u64 / g; // M
    let cutoff = (target_rate as f64 / clip.sample_rate as f64).min(1.0) * ROLLOFF;
    let half_width = ZERO_CROSSINGS / cutoff;
    let taps_each_side = half_width.ceil() as i64;
    let i0_beta = bessel_i0(KAISER_BETA);

    // Output sample n sits at input time n*M/L; its fractional part cycles
    // through L phases.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (-taps_each_side + 1..=taps_each_side)
                .map(|k| {
                    let x = frac - k as f64;
                    let r = x / half_width;
                    if r.abs() >= 1.0 {
                        0.0
                    } else {
                        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                        cutoff * sinc(cutoff * x) * w
                    }
                })
                .collect()
        })
        .collect();

    let n_in = clip.samples.len() as i64;
    let n_out = ((clip.samples.len() as u64 * up + down - 1) / down) as usize;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let kernel = &phases[(pos % up) as usize];
        let mut acc = 0.0f64;
        for (j, &h) in kernel.iter().enumerate() {
            // Tap j multiplies input sample base + k with k = j - taps + 1.
            let idx = base + j as i64 - taps_each_side + 1;
            if idx >= 0 && idx < n_in {
                acc += h * clip.samples[idx as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    AudioClip::new(out, target_rate)
}
