//! Oracles shared by several integration test targets.
#![allow(dead_code)]

use amt_core::labels::NoteEvent;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-9;

/// Whether `pred` may be matched to `reference`, written out from the
/// tolerance rules rather than taken from the library.
pub fn compatible(reference: &NoteEvent, pred: &NoteEvent, with_offset: bool) -> bool {
    if reference.pitch != pred.pitch || (reference.onset - pred.onset).abs() > 0.05 + EPS {
        return false;
    }
    if !with_offset {
        return true;
    }
    let tol = f64::max(0.05, 0.2 * (reference.offset - reference.onset));
    (reference.offset - pred.offset).abs() <= tol + EPS
}

/// Size of the largest one-to-one matching, by exhaustive search over
/// subsets of predictions (dynamic programming on a bitmask).
pub fn brute_force_matches(reference: &[NoteEvent], pred: &[NoteEvent], with_offset: bool) -> usize {
    assert!(pred.len() <= 16, "oracle is exponential in the prediction count");
    let full = 1usize << pred.len();
    // best[mask] = most matches for the references handled so far using
    // exactly the predictions in `mask`.
    let mut best = vec![None; full];
    best[0] = Some(0usize);
    for r in reference {
        let mut next = best.clone();
        for mask in 0..full {
            let Some(v) = best[mask] else { continue };
            for (j, p) in pred.iter().enumerate() {
                if mask & (1 << j) == 0 && compatible(r, p, with_offset) {
                    let m = mask | (1 << j);
                    if next[m].map_or(true, |old| old < v + 1) {
                        next[m] = Some(v + 1);
                    }
                }
            }
        }
        best = next;
    }
    best.into_iter().flatten().max().unwrap_or(0)
}

pub fn f1(matched: usize, n_pred: usize, n_ref: usize) -> f64 {
    let p = if n_pred == 0 { 0.0 } else { matched as f64 / n_pred as f64 };
    let r = if n_ref == 0 { 0.0 } else { matched as f64 / n_ref as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Up to `max` notes crowded onto three pitches so that tolerance windows
/// overlap and greedy choices matter.
pub fn crowded_notes(rng: &mut ChaCha8Rng, max: usize) -> Vec<NoteEvent> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| {
            let onset = rng.gen_range(0..40) as f64 * 0.01;
            let duration = rng.gen_range(5..60) as f64 * 0.01;
            NoteEvent::new(onset, onset + duration, rng.gen_range(60..63)).unwrap()
        })
        .collect()
}

use amt_core::audio::{MelConfig, MelExtractor};
use amt_core::datasets::{generate_synthetic_corpus, load_entries, LoadedClip, Role, SyntheticSpec, Timbre};
use amt_core::training::TrainConfig;

/// Clips of a generated corpus, loaded by role.
pub struct Corpus {
    pub dir: tempfile::TempDir,
    pub labelled: Vec<LoadedClip>,
    pub unlabelled: Vec<LoadedClip>,
    pub test: Vec<LoadedClip>,
}

pub fn corpus(spec: &SyntheticSpec, n_mels: usize) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_corpus(spec, dir.path()).unwrap();
    let mel = MelExtractor::new(MelConfig {
        n_mels,
        ..MelConfig::default()
    })
    .unwrap();
    let load = |role| load_entries(&manifest, &[role], &mel, 2).unwrap();
    Corpus {
        labelled: load(Role::Labelled),
        unlabelled: load(Role::Unlabelled),
        test: load(Role::Test),
        dir,
    }
}

/// A few short clips, enough for plumbing tests.
pub fn tiny_corpus(seed: u64) -> Corpus {
    corpus(
        &SyntheticSpec {
            n_clips: 6,
            notes_per_clip: (4, 8),
            pitch_range: (60, 67),
            duration_secs: 2.0,
            note_frames: (4, 12),
            polyphony: 2,
            seed,
            timbre: Timbre::Harmonics,
            labelled: 2,
            unlabelled: 2,
        },
        16,
    )
}

/// A model small enough to train for a few iterations in a test.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.depth = 1;
    c.model.base_channels = 2;
    c.model.attention_window = 5;
    c.model.n_mels = 16;
    c.segment_frames = 32;
    c.batch.labelled = 2;
    c.batch.unlabelled = 2;
    c.seed = seed;
    c.validate_every = 0;
    c
}
