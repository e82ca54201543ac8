//! Frame-wise, note-wise and note-with-offset-wise precision/recall/F1.
//!
//! Note scores use a maximum-cardinality one-to-one matching between
//! reference and predicted notes, as `mir_eval.transcription` does.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::labels::{notes_to_rolls, NoteEvent};
use crate::{Error, Result};

/// Default onset tolerance in seconds.
pub const ONSET_TOLERANCE: f64 = 0.05;
/// Default offset tolerance as a fraction of the reference duration.
pub const OFFSET_RATIO: f64 = 0.2;
/// Distances are compared after absorbing this much float error.
const TOLERANCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    /// Scores from a match count and the two list sizes. Empty denominators
    /// give 0.
    pub fn from_counts(matched: usize, n_pred: usize, n_ref: usize) -> Self {
        let precision = if n_pred == 0 { 0.0 } else { matched as f64 / n_pred as f64 };
        let recall = if n_ref == 0 { 0.0 } else { matched as f64 / n_ref as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    fn get(&self, i: usize) -> f64 {
        [self.precision, self.recall, self.f1][i]
    }
}

/// One-to-one pairs of (reference index, prediction index).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchingResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_reference: usize,
    pub unmatched_prediction: usize,
}

/// Which constraints a note pair has to meet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub onset: f64,
    /// `(ratio, minimum)`: offsets must agree within
    /// `max(minimum, ratio * reference duration)`.
    pub offset: Option<(f64, f64)>,
}

impl Tolerance {
    pub fn onset_only(onset: f64) -> Self {
        Self {
            onset,
            offset: None,
        }
    }

    pub fn with_offset(onset: f64, ratio: f64) -> Self {
        Self {
            onset,
            offset: Some((ratio, onset)),
        }
    }

    pub fn admits(&self, reference: &NoteEvent, predicted: &NoteEvent) -> bool {
        if reference.pitch != predicted.pitch {
            return false;
        }
        if (reference.onset - predicted.onset).abs() > self.onset + TOLERANCE_EPS {
            return false;
        }
        match self.offset {
            None => true,
            Some((ratio, minimum)) => {
                let tol = minimum.max(ratio * reference.duration());
                (reference.offset - predicted.offset).abs() <= tol + TOLERANCE_EPS
            }
        }
    }
}

/// Maximum bipartite matching (augmenting paths).
pub fn match_notes(reference: &[NoteEvent], predicted: &[NoteEvent], tol: Tolerance) -> MatchingResult {
    let adjacency: Vec<Vec<usize>> = reference
        .iter()
        .map(|r| {
            predicted
                .iter()
                .enumerate()
                .filter(|(_, p)| tol.admits(r, p))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; predicted.len()];

    fn augment(
        r: usize,
        adjacency: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &p in &adjacency[r] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            let free = match owner[p] {
                None => true,
                Some(other) => augment(other, adjacency, owner, seen),
            };
            if free {
                owner[p] = Some(r);
                return true;
            }
        }
        false
    }

    for r in 0..reference.len() {
        let mut seen = vec![false; predicted.len()];
        augment(r, &adjacency, &mut owner, &mut seen);
    }
    let mut pairs: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(p, r)| r.map(|r| (r, p)))
        .collect();
    pairs.sort_unstable();
    MatchingResult {
        unmatched_reference: reference.len() - pairs.len(),
        unmatched_prediction: predicted.len() - pairs.len(),
        pairs,
    }
}

/// Cell-wise scores of two binary rolls of equal shape.
pub fn frame_metrics(pred: &Array2<u8>, reference: &Array2<u8>) -> Result<ScoreTriple> {
    if pred.dim() != reference.dim() {
        return Err(Error::InvalidInput(format!(
            "prediction roll {:?} and reference roll {:?} differ in shape",
            pred.dim(),
            reference.dim()
        )));
    }
    let (mut tp, mut n_pred, mut n_ref) = (0, 0, 0);
    for (&p, &r) in pred.iter().zip(reference.iter()) {
        let (p, r) = (p != 0, r != 0);
        tp += usize::from(p && r);
        n_pred += usize::from(p);
        n_ref += usize::from(r);
    }
    Ok(ScoreTriple::from_counts(tp, n_pred, n_ref))
}

/// Onset-only note scores.
pub fn note_metrics(pred: &[NoteEvent], reference: &[NoteEvent], onset_tol: f64) -> ScoreTriple {
    let m = match_notes(reference, pred, Tolerance::onset_only(onset_tol));
    ScoreTriple::from_counts(m.pairs.len(), pred.len(), reference.len())
}

/// Note scores that also require offsets within
/// `max(onset_tol, offset_ratio * reference duration)`.
pub fn note_offset_metrics(
    pred: &[NoteEvent],
    reference: &[NoteEvent],
    onset_tol: f64,
    offset_ratio: f64,
) -> ScoreTriple {
    let m = match_notes(reference, pred, Tolerance::with_offset(onset_tol, offset_ratio));
    ScoreTriple::from_counts(m.pairs.len(), pred.len(), reference.len())
}

/// The three metric families for one clip.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClipScores {
    pub frame: ScoreTriple,
    pub note: ScoreTriple,
    pub note_offset: ScoreTriple,
}

impl ClipScores {
    fn family(&self, i: usize) -> &ScoreTriple {
        match i {
            0 => &self.frame,
            1 => &self.note,
            _ => &self.note_offset,
        }
    }
}

/// Scores a predicted note list against a reference. Frame scores come from
/// rolls rendered over the span of both lists at `frame_rate`.
pub fn evaluate_notes(pred: &[NoteEvent], reference: &[NoteEvent], frame_rate: f64) -> Result<ClipScores> {
    let end = pred
        .iter()
        .chain(reference)
        .map(|n| n.offset)
        .fold(0.0f64, f64::max);
    let frames = (end * frame_rate).ceil() as usize + 1;
    let (pred_roll, _) = notes_to_rolls(pred, frames, frame_rate, 1)?;
    let (ref_roll, _) = notes_to_rolls(reference, frames, frame_rate, 1)?;
    Ok(ClipScores {
        frame: frame_metrics(&pred_roll.values, &ref_roll.values)?,
        note: note_metrics(pred, reference, ONSET_TOLERANCE),
        note_offset: note_offset_metrics(pred, reference, ONSET_TOLERANCE, OFFSET_RATIO),
    })
}

/// Mean and population standard deviation of one score.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }

    /// Percentages with one decimal, e.g. `68.4 ± 7.7`.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub const FAMILY_NAMES: [&str; 3] = ["frame", "note", "note_with_offset"];
const SCORE_NAMES: [&str; 3] = ["P", "R", "F1"];

/// Per-clip scores plus their unweighted corpus statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub clips: Vec<(String, ClipScores)>,
    /// `[family][P, R, F1]`.
    pub summary: [[MeanStd; 3]; 3],
}

pub fn corpus_report(clips: Vec<(String, ClipScores)>) -> Result<CorpusReport> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("corpus report needs at least one clip".into()));
    }
    let mut summary = [[MeanStd::default(); 3]; 3];
    for (f, row) in summary.iter_mut().enumerate() {
        for (s, cell) in row.iter_mut().enumerate() {
            *cell = MeanStd::of(clips.iter().map(|(_, c)| c.family(f).get(s)));
        }
    }
    Ok(CorpusReport { clips, summary })
}

impl CorpusReport {
    pub fn mean(&self, family: usize, score: usize) -> f64 {
        self.summary[family][score].mean
    }

    /// Tab-separated: one row per clip, then `mean` and `std` rows, all in
    /// percent with one decimal.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("clip");
        for f in FAMILY_NAMES {
            for s in SCORE_NAMES {
                let _ = write!(out, "\t{f}_{s}");
            }
        }
        out.push('\n');
        for (name, c) in &self.clips {
            out.push_str(name);
            for f in 0..3 {
                for s in 0..3 {
                    let _ = write!(out, "\t{:.1}", 100.0 * c.family(f).get(s));
                }
            }
            out.push('\n');
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            out.push_str(label);
            for row in &self.summary {
                for cell in row {
                    let v = if pick == 0 { cell.mean } else { cell.std };
                    let _ = write!(out, "\t{:.1}", 100.0 * v);
                }
            }
            out.push('\n');
        }
        out
    }

    /// Metric × P/R/F1 table with `mean ± std` cells.
    pub fn to_text(&self) -> String {
        let mut out = format!("clips: {}\n", self.clips.len());
        let _ = writeln!(out, "{:<18}{:>14}{:>14}{:>14}", "metric", "P", "R", "F1");
        for (name, row) in FAMILY_NAMES.iter().zip(&self.summary) {
            let _ = writeln!(
                out,
                "{:<18}{:>14}{:>14}{:>14}",
                name,
                row[0].percent(),
                row[1].percent(),
                row[2].percent()
            );
        }
        out
    }
}
