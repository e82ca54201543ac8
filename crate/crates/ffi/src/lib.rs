//! C interface to `amt-core`.
//!
//! Every fallible function returns an [`AmtStatus`]; on failure a message is
//! available from [`amt_last_error`] on the same thread. Objects cross the
//! boundary as opaque pointers that must be released with their matching
//! `*_free` function. No function unwinds into C: panics are caught and
//! reported as [`AmtStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use amt_core::audio::{resample, AudioClip, MelConfig, MelExtractor};
use amt_core::datasets::load_audio;
use amt_core::labels::NoteEvent;
use amt_core::metrics::{evaluate_notes, ScoreTriple};
use amt_core::model::{Transcriber, TranscriberParams};
use amt_core::training::Checkpoint;
use amt_core::transcribe::transcribe_mel;
use amt_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> AmtStatus {
    match err {
        Error::Io { .. } | Error::Wav { .. } | Error::Image(_) | Error::EmptyCorpus(_) => AmtStatus::Io,
        Error::Checkpoint(_) => AmtStatus::Checkpoint,
        _ => AmtStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for [`amt_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (AmtStatus, String)>) -> AmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            AmtStatus::Internal
        }
    }
}

fn core_err(e: Error) -> (AmtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AmtStatus, String) {
    (AmtStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (AmtStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (AmtStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn samples_arg(samples: *const f32, len: usize, sample_rate: u32) -> Result<AudioClip, (AmtStatus, String)> {
    if samples.is_null() && len > 0 {
        return Err(null("samples"));
    }
    let data = if len == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(samples, len).to_vec()
    };
    let clip = AudioClip::new(data, sample_rate).map_err(core_err)?;
    if clip.sample_rate == amt_core::SAMPLE_RATE {
        Ok(clip)
    } else {
        resample(&clip, amt_core::SAMPLE_RATE).map_err(core_err)
    }
}

/// Message describing the last failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn amt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn amt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A trained transcriber loaded from a checkpoint.
pub struct AmtModel {
    model: Transcriber,
    params: TranscriberParams,
    mel: MelExtractor,
    window: usize,
}

/// One transcribed note: times in seconds, MIDI pitch.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmtNote {
    pub onset: f64,
    pub offset: f64,
    pub pitch: u8,
}

/// An owned list of notes.
pub struct AmtNotes {
    notes: Vec<AmtNote>,
}

/// Precision, recall and F1 in `[0, 1]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AmtScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Frame, note and note-with-offset scores of one clip.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AmtClipScores {
    pub frame: AmtScore,
    pub note: AmtScore,
    pub note_with_offset: AmtScore,
}

impl From<ScoreTriple> for AmtScore {
    fn from(s: ScoreTriple) -> Self {
        Self {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        }
    }
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn amt_model_load(path: *const c_char, out: *mut *mut AmtModel) -> AmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ckpt = Checkpoint::load(&path_arg(path)?).map_err(core_err)?;
        let model = Transcriber::new(ckpt.config.model.clone()).map_err(core_err)?;
        let mel = MelExtractor::new(MelConfig {
            n_mels: ckpt.config.model.n_mels,
            ..MelConfig::default()
        })
        .map_err(core_err)?;
        let handle = AmtModel {
            model,
            params: ckpt.state.theta,
            mel,
            window: ckpt.config.segment_frames,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`amt_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn amt_model_free(model: *mut AmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mel bins the model expects.
///
/// # Safety
/// `model` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn amt_model_n_mels(model: *const AmtModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().n_mels)
}

unsafe fn run_transcription(
    model: *const AmtModel,
    clip: AudioClip,
    threshold: f64,
    out: *mut *mut AmtNotes,
) -> Result<(), (AmtStatus, String)> {
    let m = model.as_ref().ok_or_else(|| null("model"))?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err((AmtStatus::InvalidArgument, format!("threshold {threshold} is outside [0, 1]")));
    }
    let mut clip = clip;
    let min = m.mel.config().window_samples;
    if clip.samples.len() < min {
        clip.samples.resize(min, 0.0);
    }
    let spec = m.mel.compute(&clip).map_err(core_err)?;
    let t = transcribe_mel(&m.model, &m.params, &spec.values, m.window, threshold).map_err(core_err)?;
    let notes = t
        .notes
        .iter()
        .map(|n| AmtNote {
            onset: n.onset,
            offset: n.offset,
            pitch: n.pitch,
        })
        .collect();
    *out = Box::into_raw(Box::new(AmtNotes { notes }));
    Ok(())
}

/// Transcribes mono samples at `sample_rate` Hz into `*out`.
///
/// # Safety
/// `samples` must point to `len` readable floats, `model` must be live and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn amt_transcribe_samples(
    model: *const AmtModel,
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    threshold: f64,
    out: *mut *mut AmtNotes,
) -> AmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let clip = samples_arg(samples, len, sample_rate)?;
        run_transcription(model, clip, threshold, out)
    })
}

/// Transcribes a WAV file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string, `model` live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn amt_transcribe_file(
    model: *const AmtModel,
    path: *const c_char,
    threshold: f64,
    out: *mut *mut AmtNotes,
) -> AmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let clip = load_audio(&path_arg(path)?, amt_core::SAMPLE_RATE, 0).map_err(core_err)?;
        run_transcription(model, clip, threshold, out)
    })
}

/// Number of notes in a list; 0 for null.
///
/// # Safety
/// `notes` must be a live list or null.
#[no_mangle]
pub unsafe extern "C" fn amt_notes_len(notes: *const AmtNotes) -> usize {
    notes.as_ref().map_or(0, |n| n.notes.len())
}

/// Copies note `index` into `*out`.
///
/// # Safety
/// `notes` must be a live list and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn amt_notes_get(notes: *const AmtNotes, index: usize, out: *mut AmtNote) -> AmtStatus {
    guard(|| {
        let list = notes.as_ref().ok_or_else(|| null("notes"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = *list
            .notes
            .get(index)
            .ok_or_else(|| (AmtStatus::InvalidArgument, format!("index {index} out of range")))?;
        Ok(())
    })
}

/// Releases a note list. Null is ignored.
///
/// # Safety
/// `notes` must come from a transcription call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn amt_notes_free(notes: *mut AmtNotes) {
    if !notes.is_null() {
        drop(Box::from_raw(notes));
    }
}

/// Normalized log-mel features of mono samples, row-major frames × `n_mels`.
///
/// Call with `out` null to learn the frame count through `*frames`; then
/// pass a buffer of at least `frames * n_mels` values as `capacity`.
///
/// # Safety
/// `samples` must point to `len` floats, `frames` must be writable and `out`
/// (when non-null) must have room for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn amt_mel_spectrogram(
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    n_mels: usize,
    out: *mut f64,
    capacity: usize,
    frames: *mut usize,
) -> AmtStatus {
    guard(|| {
        let frames = frames.as_mut().ok_or_else(|| null("frames"))?;
        let clip = samples_arg(samples, len, sample_rate)?;
        let mel = MelExtractor::new(MelConfig {
            n_mels,
            ..MelConfig::default()
        })
        .map_err(core_err)?;
        let spec = mel.features(&clip).map_err(core_err)?;
        *frames = spec.frames();
        if out.is_null() {
            return Ok(());
        }
        let needed = spec.values.len();
        if capacity < needed {
            return Err((
                AmtStatus::BufferTooSmall,
                format!("buffer holds {capacity} values, {needed} needed"),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, needed);
        for (d, s) in dst.iter_mut().zip(spec.values.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

unsafe fn note_list(p: *const AmtNote, n: usize, what: &str) -> Result<Vec<NoteEvent>, (AmtStatus, String)> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|n| NoteEvent::new(n.onset, n.offset, n.pitch).map_err(core_err))
        .collect()
}

/// Scores predicted notes against reference notes.
///
/// # Safety
/// `pred` and `reference` must point to `n_pred` and `n_ref` notes (either
/// may be null when its count is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amt_note_metrics(
    pred: *const AmtNote,
    n_pred: usize,
    reference: *const AmtNote,
    n_ref: usize,
    out: *mut AmtClipScores,
) -> AmtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let pred = note_list(pred, n_pred, "pred")?;
        let reference = note_list(reference, n_ref, "reference")?;
        let s = evaluate_notes(&pred, &reference, amt_core::frame_rate()).map_err(core_err)?;
        *out = AmtClipScores {
            frame: s.frame.into(),
            note: s.note.into(),
            note_with_offset: s.note_offset.into(),
        };
        Ok(())
    })
}
