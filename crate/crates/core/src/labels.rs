//! Note annotations, frame/onset piano rolls and the conversions between
//! them.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result, MAX_MIDI, MIN_MIDI, N_PITCHES};

/// Default number of frames marked per note onset in the onset target.
pub const DEFAULT_ONSET_WIDTH: usize = 2;

/// Absorbs float error when converting frame-aligned times back to frames.
const FRAME_EPS: f64 = 1e-9;

/// One note: onset and offset in seconds, MIDI pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    pub onset: f64,
    pub offset: f64,
    pub pitch: u8,
}

impl NoteEvent {
    pub fn new(onset: f64, offset: f64, pitch: u8) -> Result<Self> {
        let note = Self {
            onset,
            offset,
            pitch,
        };
        note.validate()?;
        Ok(note)
    }

    /// Builds a note from an onset/duration pair.
    pub fn from_duration(onset: f64, duration: f64, pitch: u8) -> Result<Self> {
        Self::new(onset, onset + duration, pitch)
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_MIDI..=MAX_MIDI).contains(&self.pitch) {
            return Err(Error::InvalidLabel(format!(
                "pitch {} outside {MIN_MIDI}..={MAX_MIDI} in note {self:?}",
                self.pitch
            )));
        }
        if !(self.onset.is_finite() && self.offset.is_finite()) || self.onset < 0.0 {
            return Err(Error::InvalidLabel(format!("bad times in note {self:?}")));
        }
        if self.offset <= self.onset {
            return Err(Error::InvalidLabel(format!(
                "offset not after onset in note {self:?}"
            )));
        }
        Ok(())
    }

    /// Column of this pitch in an 88-wide roll.
    pub fn key_index(&self) -> usize {
        (self.pitch - MIN_MIDI) as usize
    }
}

/// Binary T×88 matrix of active notes.
#[derive(Debug, Clone, PartialEq)]
pub struct PianoRoll {
    pub values: Array2<u8>,
    pub frame_rate: f64,
}

/// Binary T×88 matrix marking the first frames of each note.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetRoll {
    pub values: Array2<u8>,
    pub onset_width_frames: usize,
}

impl PianoRoll {
    pub fn zeros(frames: usize, frame_rate: f64) -> Self {
        Self {
            values: Array2::zeros((frames, N_PITCHES)),
            frame_rate,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    /// Rows `start..start + len`, zero-filled past the end.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            values: slice_rows(&self.values, start, len),
            frame_rate: self.frame_rate,
        }
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }
}

impl OnsetRoll {
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            values: slice_rows(&self.values, start, len),
            onset_width_frames: self.onset_width_frames,
        }
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }
}

fn slice_rows(values: &Array2<u8>, start: usize, len: usize) -> Array2<u8> {
    let mut out = Array2::zeros((len, values.ncols()));
    for (dst, src) in (0..len).zip(start..values.nrows()) {
        out.row_mut(dst).assign(&values.row(src));
    }
    out
}

fn time_to_frame(t: f64, frame_rate: f64) -> usize {
    (t * frame_rate + FRAME_EPS).floor().max(0.0) as usize
}

/// Frame and onset targets for `frames` frames. A note covers frames
/// `floor(onset*rate) .. floor(offset*rate)` (at least one frame); its onset
/// marks are the first `onset_width` of those frames.
pub fn notes_to_rolls(
    notes: &[NoteEvent],
    frames: usize,
    frame_rate: f64,
    onset_width: usize,
) -> Result<(PianoRoll, OnsetRoll)> {
    if onset_width == 0 {
        return Err(Error::Config("onset width must be at least one frame".into()));
    }
    let mut frame = PianoRoll::zeros(frames, frame_rate);
    let mut onset = OnsetRoll {
        values: Array2::zeros((frames, N_PITCHES)),
        onset_width_frames: onset_width,
    };
    for note in notes {
        note.validate()?;
        let p = note.key_index();
        let start = time_to_frame(note.onset, frame_rate);
        let end = time_to_frame(note.offset, frame_rate).max(start + 1);
        for t in start..end.min(frames) {
            frame.values[[t, p]] = 1;
        }
        for t in start..(start + onset_width).min(end).min(frames) {
            onset.values[[t, p]] = 1;
        }
    }
    Ok((frame, onset))
}

/// 1 where `post > threshold` (strict).
pub fn binarize(post: &Array2<f64>, threshold: f64) -> PianoRoll {
    PianoRoll {
        values: post.mapv(|v| u8::from(v > threshold)),
        frame_rate: crate::frame_rate(),
    }
}

/// Extracts notes from a frame roll.
///
/// Without an onset roll every maximal run of active frames is a note. With
/// one, a note may only start on a frame where the onset roll is active, and
/// a rising edge of the onset roll inside a note ends it and starts the next.
/// Runs with no onset mark are dropped.
pub fn rolls_to_notes(
    frame: &Array2<u8>,
    onset: Option<&Array2<u8>>,
    frame_rate: f64,
) -> Result<Vec<NoteEvent>> {
    if let Some(on) = onset {
        if on.dim() != frame.dim() {
            return Err(Error::InvalidInput(format!(
                "frame roll {:?} and onset roll {:?} differ in shape",
                frame.dim(),
                on.dim()
            )));
        }
    }
    if frame.ncols() != N_PITCHES {
        return Err(Error::InvalidInput(format!(
            "roll has {} columns, expected {N_PITCHES}",
            frame.ncols()
        )));
    }
    let frames = frame.nrows();
    let mut notes = Vec::new();
    let mut emit = |p: usize, s: usize, e: usize| {
        notes.push(NoteEvent {
            onset: s as f64 / frame_rate,
            offset: e as f64 / frame_rate,
            pitch: MIN_MIDI + p as u8,
        });
    };
    for p in 0..N_PITCHES {
        let mut current: Option<usize> = None;
        for t in 0..frames {
            let active = frame[[t, p]] != 0;
            match onset {
                None => match (current, active) {
                    (None, true) => current = Some(t),
                    (Some(s), false) => {
                        emit(p, s, t);
                        current = None;
                    }
                    _ => {}
                },
                Some(on) => {
                    let marked = on[[t, p]] != 0;
                    let rising = marked && (t == 0 || on[[t - 1, p]] == 0);
                    match current {
                        Some(s) if !active => {
                            emit(p, s, t);
                            current = None;
                        }
                        Some(s) if rising => {
                            emit(p, s, t);
                            current = Some(t);
                        }
                        None if active && marked => current = Some(t),
                        _ => {}
                    }
                }
            }
        }
        if let Some(s) = current {
            emit(p, s, frames);
        }
    }
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    Ok(notes)
}

/// Parses a label file: an optional `onset\toffset\tpitch` header, then one
/// note per line. Columns past the third are ignored.
pub fn parse_label_tsv(text: &str) -> Result<Vec<NoteEvent>> {
    let mut notes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if lineno == 0 && cols.first().is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if cols.len() < 3 {
            return Err(Error::InvalidLabel(format!(
                "line {}: expected onset, offset, pitch",
                lineno + 1
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidLabel(format!("line {}: bad number {s:?}", lineno + 1)))
        };
        let pitch = num(cols[2])?;
        if pitch.fract() != 0.0 || !(0.0..=127.0).contains(&pitch) {
            return Err(Error::InvalidLabel(format!(
                "line {}: pitch {pitch} is not a MIDI note number",
                lineno + 1
            )));
        }
        notes.push(NoteEvent::new(num(cols[0])?, num(cols[1])?, pitch as u8)?);
    }
    Ok(notes)
}

pub fn format_label_tsv(notes: &[NoteEvent]) -> String {
    let mut out = String::from("onset\toffset\tpitch\n");
    for n in notes {
        let _ = writeln!(out, "{}\t{}\t{}", n.onset, n.offset, n.pitch);
    }
    out
}

pub fn read_label_tsv(path: &Path) -> Result<Vec<NoteEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_tsv(&text).map_err(|e| Error::InvalidLabel(format!("{}: {e}", path.display())))
}

pub fn write_label_tsv(path: &Path, notes: &[NoteEvent]) -> Result<()> {
    std::fs::write(path, format_label_tsv(notes)).map_err(|e| Error::io(path, e))
}

/// Converts `onset\tduration\tpitch` rows to note events.
pub fn from_onset_duration_rows(rows: &[(f64, f64, u8)]) -> Result<Vec<NoteEvent>> {
    rows.iter()
        .map(|&(on, dur, p)| NoteEvent::from_duration(on, dur, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RATE: f64 = 31.25;

    #[test]
    fn empty_notes_give_empty_rolls() {
        let (f, o) = notes_to_rolls(&[], 10, RATE, 2).unwrap();
        assert!(f.values.iter().all(|&v| v == 0));
        assert!(o.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_note_frame_arithmetic() {
        let note = NoteEvent::new(0.512, 1.024, 60).unwrap();
        let (f, o) = notes_to_rolls(&[note], 40, RATE, 1).unwrap();
        for t in 0..40 {
            for p in 0..88 {
                let want_frame = u8::from(p == 39 && (16..32).contains(&t));
                let want_onset = u8::from(p == 39 && t == 16);
                assert_eq!(f.values[[t, p]], want_frame, "frame ({t},{p})");
                assert_eq!(o.values[[t, p]], want_onset, "onset ({t},{p})");
            }
        }
    }

    #[test]
    fn abutting_notes_get_separate_onsets() {
        let a = NoteEvent::new(0.32, 0.64, 64).unwrap();
        let b = NoteEvent::new(0.64, 0.96, 64).unwrap();
        let (f, o) = notes_to_rolls(&[a, b], 40, RATE, 2).unwrap();
        let col = 64 - 21;
        assert!((10..30).all(|t| f.values[[t, col]] == 1));
        let marks: Vec<usize> = (0..40).filter(|&t| o.values[[t, col]] == 1).collect();
        assert_eq!(marks, vec![10, 11, 20, 21]);
        let back = rolls_to_notes(&f.values, Some(&o.values), RATE).unwrap();
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn out_of_range_pitch_names_the_note() {
        let bad = NoteEvent {
            onset: 0.0,
            offset: 1.0,
            pitch: 20,
        };
        let err = notes_to_rolls(&[bad], 10, RATE, 2).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel(ref m) if m.contains("pitch 20")));
    }

    #[test]
    fn binarize_is_strict() {
        let half = Array2::from_elem((3, 88), 0.5);
        assert!(binarize(&half, 0.5).values.iter().all(|&v| v == 0));
        let ones = Array2::from_elem((3, 88), 1.0);
        assert!(binarize(&ones, 0.5).values.iter().all(|&v| v == 1));
    }

    #[test]
    fn zero_roll_has_no_notes() {
        let z = Array2::zeros((20, 88));
        assert!(rolls_to_notes(&z, None, RATE).unwrap().is_empty());
        assert!(rolls_to_notes(&z, Some(&z), RATE).unwrap().is_empty());
    }

    #[test]
    fn run_without_onset_is_filtered() {
        let mut f = Array2::zeros((30, 88));
        for t in 10..=20 {
            f[[t, 5]] = 1;
        }
        let on = Array2::zeros((30, 88));
        assert!(rolls_to_notes(&f, Some(&on), RATE).unwrap().is_empty());
        assert_eq!(rolls_to_notes(&f, None, RATE).unwrap().len(), 1);
    }

    #[test]
    fn mid_run_onset_splits() {
        let mut f = Array2::zeros((30, 88));
        let mut on = Array2::zeros((30, 88));
        for t in 5..25 {
            f[[t, 0]] = 1;
        }
        on[[5, 0]] = 1;
        on[[6, 0]] = 1;
        on[[15, 0]] = 1;
        let notes = rolls_to_notes(&f, Some(&on), RATE).unwrap();
        let frames: Vec<(f64, f64)> = notes.iter().map(|n| (n.onset * RATE, n.offset * RATE)).collect();
        assert_eq!(frames.len(), 2);
        assert!((frames[0].0 - 5.0).abs() < 1e-9 && (frames[0].1 - 15.0).abs() < 1e-9);
        assert!((frames[1].0 - 15.0).abs() < 1e-9 && (frames[1].1 - 25.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f = Array2::zeros((10, 88));
        let on = Array2::zeros((11, 88));
        assert!(matches!(rolls_to_notes(&f, Some(&on), RATE), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn tsv_round_trip_and_header() {
        let notes = vec![
            NoteEvent::new(0.5, 1.25, 60).unwrap(),
            NoteEvent::new(1.0, 1.1, 108).unwrap(),
        ];
        let text = format_label_tsv(&notes);
        assert!(text.starts_with("onset\toffset\tpitch\n"));
        assert_eq!(parse_label_tsv(&text).unwrap(), notes);
        assert!(parse_label_tsv("0.1\t0.2\t12\n").is_err());
        assert!(parse_label_tsv("0.1\t0.2\n").is_err());
        // Extra columns (e.g. velocity) are tolerated.
        assert_eq!(parse_label_tsv("0.5\t1.25\t60\t80\n").unwrap()[0], notes[0]);
    }

    #[test]
    fn duration_converter() {
        let notes = from_onset_duration_rows(&[(0.5, 0.25, 60)]).unwrap();
        assert_eq!(notes[0].offset, 0.75);
        assert!(from_onset_duration_rows(&[(0.5, 0.0, 60)]).is_err());
    }

    /// Frame-aligned notes, non-overlapping per pitch, each at least two
    /// frames long (with width-1 onsets a one-frame note directly followed
    /// by another of the same pitch is indistinguishable from one note).
    fn aligned_notes() -> impl Strategy<Value = Vec<NoteEvent>> {
        prop::collection::vec((0usize..6, 21u8..=108, 2usize..12, 0usize..4), 0..25).prop_map(|specs| {
            let mut next_free = [0usize; 89];
            let mut notes = Vec::new();
            for (slot, pitch, len, gap) in specs {
                let p = pitch as usize - 21;
                let start = next_free[p] + gap + slot;
                let end = start + len;
                next_free[p] = end;
                notes.push(NoteEvent {
                    onset: start as f64 / RATE,
                    offset: end as f64 / RATE,
                    pitch,
                });
            }
            notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
            notes
        })
    }

    proptest! {
        #[test]
        fn notes_round_trip_through_rolls(notes in aligned_notes()) {
            let frames = notes.iter().map(|n| (n.offset * RATE).round() as usize).max().unwrap_or(0) + 3;
            let (f, o) = notes_to_rolls(&notes, frames, RATE, 1).unwrap();
            let back = rolls_to_notes(&f.values, Some(&o.values), RATE).unwrap();
            prop_assert_eq!(back, notes);
        }

        #[test]
        fn onset_filtering_never_adds_notes(bits in prop::collection::vec(0u8..2, 40 * 88), obits in prop::collection::vec(0u8..2, 40 * 88)) {
            let f = Array2::from_shape_vec((40, 88), bits).unwrap();
            let on = Array2::from_shape_vec((40, 88), obits).unwrap();
            let plain = rolls_to_notes(&f, None, RATE).unwrap();
            let filtered = rolls_to_notes(&f, Some(&on), RATE).unwrap();
            // Rising onset edges strictly inside an active run are the only
            // way to split a run into more than one note.
            let mut splits = 0;
            for p in 0..88 {
                for t in 1..40 {
                    if f[[t, p]] == 1 && f[[t - 1, p]] == 1 && on[[t, p]] == 1 && on[[t - 1, p]] == 0 {
                        splits += 1;
                    }
                }
            }
            prop_assert!(filtered.len() <= plain.len() + splits);

            // Keeping only marks that sit on run starts removes every split.
            let mut starts_only = on.clone();
            for p in 0..88 {
                for t in 0..40 {
                    let run_start = f[[t, p]] == 1 && (t == 0 || f[[t - 1, p]] == 0);
                    if !run_start {
                        starts_only[[t, p]] = 0;
                    }
                }
            }
            let filtered = rolls_to_notes(&f, Some(&starts_only), RATE).unwrap();
            prop_assert!(filtered.len() <= plain.len());
            for n in plain.iter().chain(&filtered) {
                prop_assert!(n.offset > n.onset);
                prop_assert!(n.offset - n.onset >= 1.0 / RATE - 1e-12);
            }
        }

        #[test]
        fn binarize_is_idempotent(vals in prop::collection::vec(0.0f64..=1.0, 5 * 88), th in 0.0f64..1.0) {
            let post = Array2::from_shape_vec((5, 88), vals).unwrap();
            let once = binarize(&post, th);
            let twice = binarize(&once.as_f64(), th);
            prop_assert_eq!(once.values, twice.values);
        }
    }
}
