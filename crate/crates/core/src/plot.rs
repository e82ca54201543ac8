//! Piano-roll rasters: one `scale`-pixel row per pitch (highest pitch on
//! top), one `scale`-pixel column per frame. Frame activity is drawn in
//! blue, onset frames in red, silence in white.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::{Error, Result, N_PITCHES};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([40, 90, 200]);
const ONSET: Rgb<u8> = Rgb([210, 40, 40]);

/// Renders a T×88 binary frame roll, optionally overlaid with onsets.
pub fn render_roll(frame: &Array2<u8>, onset: Option<&Array2<u8>>, scale: u32) -> Result<RgbImage> {
    if frame.ncols() != N_PITCHES {
        return Err(Error::InvalidInput(format!("roll has {} columns, expected {N_PITCHES}", frame.ncols())));
    }
    if onset.is_some_and(|o| o.dim() != frame.dim()) {
        return Err(Error::InvalidInput("onset roll shape differs from frame roll".into()));
    }
    if scale == 0 {
        return Err(Error::InvalidInput("scale must be at least 1".into()));
    }
    let frames = frame.nrows().max(1) as u32;
    let mut img = RgbImage::from_pixel(frames * scale, N_PITCHES as u32 * scale, BACKGROUND);
    for ((t, k), &v) in frame.indexed_iter() {
        let is_onset = onset.is_some_and(|o| o[[t, k]] != 0);
        let color = if is_onset {
            ONSET
        } else if v != 0 {
            FRAME
        } else {
            continue;
        };
        let row = (N_PITCHES - 1 - k) as u32;
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(t as u32 * scale + dx, row * scale + dy, color);
            }
        }
    }
    Ok(img)
}

/// Writes [`render_roll`] output as a PNG.
pub fn save_roll_png(path: &Path, frame: &Array2<u8>, onset: Option<&Array2<u8>>, scale: u32) -> Result<()> {
    render_roll(frame, onset, scale)?.save(path)?;
    Ok(())
}
