//! Full-length transcription: the clip's mel matrix is cut into abutting
//! windows (the last one zero-padded), each window is log-normalized and
//! transcribed on its own, and the outputs are concatenated and trimmed.

use ndarray::{concatenate, s, Array2, Axis};

use crate::datasets::{crop_rows, features};
use crate::labels::{binarize, rolls_to_notes, NoteEvent};
use crate::model::{Transcriber, TranscriberParams};
use crate::{Error, Result};

/// Probability above which a cell counts as active.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Transcription {
    pub posteriorgram: Array2<f64>,
    pub onset: Option<Array2<f64>>,
    pub notes: Vec<NoteEvent>,
}

/// Transcribes a T×F mel magnitude matrix in windows of `window` frames.
pub fn transcribe_mel(
    model: &Transcriber,
    params: &TranscriberParams,
    mel: &Array2<f64>,
    window: usize,
    threshold: f64,
) -> Result<Transcription> {
    if window < model.config().attention_window {
        return Err(Error::Config(format!(
            "window of {window} frames is shorter than the attention window"
        )));
    }
    let total = mel.nrows();
    if total == 0 {
        return Err(Error::InvalidInput("empty spectrogram".into()));
    }
    let starts: Vec<usize> = (0..total).step_by(window).collect();
    let crops: Vec<Array2<f64>> = starts.iter().map(|&s| features(&crop_rows(mel, s, window))).collect();
    let mut posts = Vec::with_capacity(crops.len());
    let mut onsets = Vec::with_capacity(crops.len());
    for crop in &crops {
        let out = model.transcribe(params, crop)?;
        posts.push(out.posteriorgram);
        if let Some(o) = out.onset {
            onsets.push(o);
        }
    }
    let join = |parts: &[Array2<f64>]| -> Array2<f64> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views)
            .expect("equal widths")
            .slice(s![..total, ..])
            .to_owned()
    };
    let posteriorgram = join(&posts);
    let onset = (!onsets.is_empty()).then(|| join(&onsets));

    let rate = crate::frame_rate();
    let frame_roll = binarize(&posteriorgram, threshold);
    let onset_roll = onset.as_ref().map(|o| binarize(o, threshold));
    let notes = rolls_to_notes(&frame_roll.values, onset_roll.as_ref().map(|r| &r.values), rate)?;
    Ok(Transcription {
        posteriorgram,
        onset,
        notes,
    })
}
