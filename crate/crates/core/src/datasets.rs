//! Corpus manifests, a synthetic corpus generator, and random batch sampling.
//!
//! Clips are loaded once into mel magnitude matrices; training batches are
//! frame-aligned crops of those matrices, log-normalized per crop.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{log_normalize, read_wav, resample, write_wav, AudioClip, MelExtractor, MelSpectrogram};
use crate::labels::{notes_to_rolls, read_label_tsv, write_label_tsv, NoteEvent, OnsetRoll, PianoRoll};
use crate::{Error, Result};

/// Manifest file name written next to a prepared corpus.
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Labelled,
    Unlabelled,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Labelled => "labelled",
            Role::Unlabelled => "unlabelled",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "labelled" => Ok(Role::Labelled),
            "unlabelled" => Ok(Role::Unlabelled),
            "test" => Ok(Role::Test),
            other => Err(Error::InvalidInput(format!("unknown manifest role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: Role,
    pub audio: PathBuf,
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    pub fn count(&self, role: Role) -> usize {
        self.with_role(role).count()
    }

    /// Checks the manifest's structural invariants: labelled entries carry a
    /// label file, and no audio path appears under two roles.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.role == Role::Labelled && e.label.is_none() {
                return Err(Error::InvalidInput(format!("labelled entry {} has no label", e.audio.display())));
            }
            if !seen.insert(&e.audio) {
                return Err(Error::InvalidInput(format!("{} is listed more than once", e.audio.display())));
            }
        }
        Ok(())
    }

    /// `role\taudio_path\tlabel_path`, with `-` for a missing label. Paths
    /// under `base` are written relative to it.
    pub fn to_tsv(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::from("role\taudio_path\tlabel_path\n");
        for e in &self.entries {
            let label = e.label.as_deref().map_or_else(|| "-".to_string(), rel);
            let _ = writeln!(out, "{}\t{}\t{}", e.role.as_str(), rel(&e.audio), label);
        }
        out
    }

    /// Parses [`CorpusManifest::to_tsv`] output; relative paths resolve
    /// against `base`.
    pub fn from_tsv(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (i == 0 && line.starts_with("role")) {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::InvalidInput(format!("manifest line {}: expected 3 columns", i + 1)));
            }
            let label = (cols[2] != "-").then(|| base.join(cols[2]));
            entries.push(ManifestEntry {
                role: Role::parse(cols[0])?,
                audio: base.join(cols[1]),
                label,
            });
        }
        let manifest = Self { entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_tsv(base)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path.parent().unwrap_or(Path::new("")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusLayout {
    /// Audio files anywhere below the root, each labelled by a sibling
    /// `.tsv` with the same stem. Files under a directory named `test` are
    /// test clips.
    MapsLike,
    /// `<split>_data/*.wav` with labels in `<split>_labels/*.tsv`.
    MusicnetLike,
}

impl std::str::FromStr for CorpusLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maps_like" => Ok(Self::MapsLike),
            "musicnet_like" => Ok(Self::MusicnetLike),
            other => Err(Error::Config(format!("unknown corpus layout {other:?}"))),
        }
    }
}

/// Reads an exclusion list: one file name per line, `#` comments allowed.
pub fn read_exclusion_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            warn!("skipping unreadable directory {}: {e}", dir.display());
            return;
        }
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            walk(&path, out);
        } else {
            out.push(path);
        }
    }
}

fn is_wav(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Builds a manifest from a directory tree. Audio files with a label
/// become labelled training clips, the rest unlabelled; test-split files
/// are tagged as test whether or not they have labels.
pub fn scan_corpus(root: &Path, layout: CorpusLayout, exclude: &BTreeSet<String>) -> Result<CorpusManifest> {
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    walk(root, &mut files);
    files.retain(|p| is_wav(p) && !exclude.contains(&file_name(p)));
    files.sort();

    let mut entries = Vec::new();
    for audio in files {
        if let Err(e) = fs::File::open(&audio) {
            warn!("skipping unreadable file {}: {e}", audio.display());
            continue;
        }
        let rel = audio.strip_prefix(root).unwrap_or(&audio);
        let (test, label) = match layout {
            CorpusLayout::MapsLike => {
                let test = rel
                    .parent()
                    .is_some_and(|d| d.components().any(|c| c.as_os_str().eq_ignore_ascii_case("test")));
                (test, audio.with_extension("tsv"))
            }
            CorpusLayout::MusicnetLike => {
                let dir = rel.parent().and_then(|d| d.to_str()).unwrap_or("");
                let Some(split) = dir.strip_suffix("_data") else {
                    warn!("skipping {}: not inside a <split>_data directory", audio.display());
                    continue;
                };
                let label = root
                    .join(format!("{split}_labels"))
                    .join(audio.file_stem().unwrap_or_default())
                    .with_extension("tsv");
                (split == "test", label)
            }
        };
        let label = label.is_file().then_some(label);
        let role = match (test, &label) {
            (true, _) => Role::Test,
            (false, Some(_)) => Role::Labelled,
            (false, None) => Role::Unlabelled,
        };
        entries.push(ManifestEntry { role, audio, label });
    }
    if entries.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    Ok(CorpusManifest { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timbre {
    Sine,
    /// Three harmonics with amplitude `1/k`.
    Harmonics,
}

/// Parameters of a generated corpus. Roles are assigned in clip order:
/// the first `labelled` clips, then `unlabelled`, then the rest as test.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub notes_per_clip: (usize, usize),
    /// Inclusive MIDI range.
    pub pitch_range: (u8, u8),
    pub duration_secs: f64,
    /// Note length range in frames.
    pub note_frames: (usize, usize),
    pub polyphony: usize,
    pub seed: u64,
    pub timbre: Timbre,
    pub labelled: usize,
    pub unlabelled: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clips: 10,
            notes_per_clip: (4, 8),
            pitch_range: (48, 84),
            duration_secs: 4.0,
            note_frames: (4, 16),
            polyphony: 3,
            seed: 0,
            timbre: Timbre::Harmonics,
            labelled: 10,
            unlabelled: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pitch_range;
        if lo < crate::MIN_MIDI || hi > crate::MAX_MIDI || lo > hi {
            return Err(Error::Config(format!("pitch range {lo}..={hi} is outside the piano")));
        }
        if self.notes_per_clip.0 > self.notes_per_clip.1 || self.note_frames.0 < 2 || self.note_frames.0 > self.note_frames.1 {
            return Err(Error::Config("synthetic ranges must be ordered and notes at least 2 frames long".into()));
        }
        if self.polyphony == 0 || !(self.duration_secs > 0.0) {
            return Err(Error::Config("polyphony and duration must be positive".into()));
        }
        Ok(())
    }

    fn role(&self, i: usize) -> Role {
        if i < self.labelled {
            Role::Labelled
        } else if i < self.labelled + self.unlabelled {
            Role::Unlabelled
        } else {
            Role::Test
        }
    }
}

/// Draws a note list: frame-aligned boundaries, at most `polyphony`
/// simultaneous notes, and at least one free frame between notes of the
/// same pitch.
pub fn random_notes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<NoteEvent> {
    let rate = crate::frame_rate();
    let total = (spec.duration_secs * rate).floor() as usize;
    let wanted = rng.gen_range(spec.notes_per_clip.0..=spec.notes_per_clip.1);
    let mut busy = vec![0usize; total];
    let mut spans: Vec<(usize, usize, u8)> = Vec::new();
    let mut attempts = 0;
    while spans.len() < wanted && attempts < 100 * wanted.max(1) {
        attempts += 1;
        let len = rng.gen_range(spec.note_frames.0..=spec.note_frames.1);
        if len + 1 > total {
            break;
        }
        let start = rng.gen_range(0..total - len);
        let end = start + len;
        let pitch = rng.gen_range(spec.pitch_range.0..=spec.pitch_range.1);
        let clash = spans
            .iter()
            .any(|&(s, e, p)| p == pitch && start <= e && s <= end);
        if clash || busy[start..end].iter().any(|&b| b >= spec.polyphony) {
            continue;
        }
        busy[start..end].iter_mut().for_each(|b| *b += 1);
        spans.push((start, end, pitch));
    }
    let mut notes: Vec<NoteEvent> = spans
        .into_iter()
        .map(|(s, e, p)| NoteEvent {
            onset: s as f64 / rate,
            offset: e as f64 / rate,
            pitch: p,
        })
        .collect();
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    notes
}

fn midi_hz(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

/// Renders notes as windowed sinusoids at their equal-tempered pitch, with
/// 10 ms linear attack and release ramps, normalized to a 0.5 peak.
pub fn render_notes(notes: &[NoteEvent], duration_secs: f64, timbre: Timbre) -> AudioClip {
    let sr = f64::from(crate::SAMPLE_RATE);
    let len = (duration_secs * sr).round() as usize;
    let mut buf = vec![0.0f64; len.max(1)];
    let ramp = (0.01 * sr) as usize;
    let partials: &[usize] = match timbre {
        Timbre::Sine => &[1],
        Timbre::Harmonics => &[1, 2, 3],
    };
    for note in notes {
        let start = (note.onset * sr).round() as usize;
        let end = ((note.offset * sr).round() as usize).min(buf.len());
        let n = end.saturating_sub(start);
        let f0 = midi_hz(note.pitch);
        for i in 0..n {
            let env = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
            let t = i as f64 / sr;
            let v: f64 = partials
                .iter()
                .filter(|&&k| (k as f64) * f0 < sr / 2.0)
                .map(|&k| (2.0 * PI * k as f64 * f0 * t).sin() / k as f64)
                .sum();
            buf[start + i] += env * v;
        }
    }
    let peak = buf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    AudioClip {
        samples: buf.iter().map(|v| (v * gain) as f32).collect(),
        sample_rate: crate::SAMPLE_RATE,
    }
}

/// Writes `clip_NNN.wav` / `clip_NNN.tsv` pairs and a manifest into `out`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let notes = random_notes(spec, &mut rng);
        let clip = render_notes(&notes, spec.duration_secs, spec.timbre);
        let audio = out.join(format!("clip_{i:03}.wav"));
        let label = out.join(format!("clip_{i:03}.tsv"));
        write_wav(&audio, &clip)?;
        write_label_tsv(&label, &notes)?;
        let role = spec.role(i);
        entries.push(ManifestEntry {
            role,
            audio,
            label: (role != Role::Unlabelled).then_some(label),
        });
    }
    let manifest = CorpusManifest { entries };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A clip ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub audio: PathBuf,
    pub role: Role,
    /// Mel magnitudes, T×F, before log normalization.
    pub mel: Array2<f64>,
    pub notes: Option<Vec<NoteEvent>>,
    pub frame_roll: Option<PianoRoll>,
    pub onset_roll: Option<OnsetRoll>,
}

/// Reads, downmixes and resamples `path`, zero-padding clips shorter than
/// one analysis window.
pub fn load_audio(path: &Path, sample_rate: u32, min_len: usize) -> Result<AudioClip> {
    let mut clip = read_wav(path)?;
    if clip.sample_rate != sample_rate {
        clip = resample(&clip, sample_rate)?;
    }
    if clip.samples.len() < min_len {
        clip.samples.resize(min_len, 0.0);
    }
    Ok(clip)
}

pub fn load_clip(entry: &ManifestEntry, mel: &MelExtractor, onset_width: usize) -> Result<LoadedClip> {
    let cfg = mel.config();
    let audio = load_audio(&entry.audio, cfg.sample_rate, cfg.window_samples)?;
    let spec = mel.compute(&audio)?;
    let frames = spec.frames();
    let rate = f64::from(cfg.sample_rate) / cfg.hop_samples as f64;
    let (notes, frame_roll, onset_roll) = match &entry.label {
        Some(path) => {
            let notes = read_label_tsv(path)?;
            let (f, o) = notes_to_rolls(&notes, frames, rate, onset_width)?;
            (Some(notes), Some(f), Some(o))
        }
        None => (None, None, None),
    };
    Ok(LoadedClip {
        audio: entry.audio.clone(),
        role: entry.role,
        mel: spec.values,
        notes,
        frame_roll,
        onset_roll,
    })
}

/// Loads every entry with one of `roles`.
pub fn load_entries(
    manifest: &CorpusManifest,
    roles: &[Role],
    mel: &MelExtractor,
    onset_width: usize,
) -> Result<Vec<LoadedClip>> {
    manifest
        .entries
        .iter()
        .filter(|e| roles.contains(&e.role))
        .map(|e| load_clip(e, mel, onset_width))
        .collect()
}

/// Rows `start..start + len` of a T×F matrix, zero past the end.
pub fn crop_rows(m: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, m.ncols()));
    let end = (start + len).min(m.nrows());
    if start < end {
        out.slice_mut(s![..end - start, ..]).assign(&m.slice(s![start..end, ..]));
    }
    out
}

/// Per-crop log normalization of a mel magnitude window.
pub fn features(mel: &Array2<f64>) -> Array2<f64> {
    log_normalize(&MelSpectrogram::from_values(mel.clone())).values
}

/// One labelled training example.
#[derive(Debug, Clone)]
pub struct LabelledSegment {
    pub spec: Array2<f64>,
    pub frames: Array2<f64>,
    pub onsets: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub labelled: Vec<LabelledSegment>,
    pub unlabelled: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BatchSpec {
    pub labelled: usize,
    pub unlabelled: usize,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labelled == 0 {
            return Err(Error::Config("labelled batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws labelled and unlabelled crops from fixed pools.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labelled: Vec<LoadedClip>,
    unlabelled: Vec<LoadedClip>,
    spec: BatchSpec,
    segment_frames: usize,
}

impl BatchSampler {
    /// Test-tagged clips are refused unless `allow_test` is set, which only
    /// continual learning does, and then only in the unlabelled pool.
    pub fn new(
        labelled: Vec<LoadedClip>,
        unlabelled: Vec<LoadedClip>,
        spec: BatchSpec,
        segment_frames: usize,
        allow_test: bool,
    ) -> Result<Self> {
        spec.validate()?;
        if segment_frames == 0 {
            return Err(Error::Config("segment length must be positive".into()));
        }
        if labelled.is_empty() {
            return Err(Error::InvalidInput("labelled pool is empty".into()));
        }
        if let Some(c) = labelled.iter().find(|c| c.role != Role::Labelled || c.frame_roll.is_none()) {
            return Err(Error::InvalidInput(format!("{} is not a labelled training clip", c.audio.display())));
        }
        if let Some(c) = unlabelled
            .iter()
            .find(|c| c.role == Role::Labelled || (c.role == Role::Test && !allow_test))
        {
            return Err(Error::InvalidInput(format!(
                "{} ({}) cannot enter the unlabelled pool",
                c.audio.display(),
                c.role.as_str()
            )));
        }
        if spec.unlabelled > 0 && unlabelled.is_empty() {
            return Err(Error::InvalidInput("unlabelled batch requested but the pool is empty".into()));
        }
        Ok(Self {
            labelled,
            unlabelled,
            spec,
            segment_frames,
        })
    }

    pub fn spec(&self) -> BatchSpec {
        self.spec
    }

    pub fn segment_frames(&self) -> usize {
        self.segment_frames
    }

    pub fn labelled_pool(&self) -> &[LoadedClip] {
        &self.labelled
    }

    pub fn unlabelled_pool(&self) -> &[LoadedClip] {
        &self.unlabelled
    }

    /// Adds clips to the unlabelled pool (continual learning).
    pub fn extend_unlabelled(&mut self, clips: Vec<LoadedClip>) {
        self.unlabelled.extend(clips);
    }

    /// `n` pool indices: distinct when the pool is large enough, drawn with
    /// replacement otherwise.
    fn pick(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
        if n <= pool {
            sample(rng, pool, n).into_vec()
        } else {
            (0..n).map(|_| rng.gen_range(0..pool)).collect()
        }
    }

    fn offset(&self, rng: &mut ChaCha8Rng, frames: usize) -> usize {
        let max = frames.saturating_sub(self.segment_frames);
        rng.gen_range(0..=max)
    }

    pub fn next_batch(&self, rng: &mut ChaCha8Rng) -> Batch {
        let len = self.segment_frames;
        let labelled = Self::pick(rng, self.labelled.len(), self.spec.labelled)
            .into_iter()
            .map(|i| {
                let clip = &self.labelled[i];
                let start = self.offset(rng, clip.mel.nrows());
                let frames = clip.frame_roll.as_ref().expect("labelled clip");
                let onsets = clip.onset_roll.as_ref().expect("labelled clip");
                LabelledSegment {
                    spec: features(&crop_rows(&clip.mel, start, len)),
                    frames: frames.window(start, len).as_f64(),
                    onsets: onsets.window(start, len).as_f64(),
                }
            })
            .collect();
        let unlabelled = if self.spec.unlabelled == 0 {
            Vec::new()
        } else {
            Self::pick(rng, self.unlabelled.len(), self.spec.unlabelled)
                .into_iter()
                .map(|i| {
                    let clip = &self.unlabelled[i];
                    let start = self.offset(rng, clip.mel.nrows());
                    features(&crop_rows(&clip.mel, start, len))
                })
                .collect()
        };
        Batch { labelled, unlabelled }
    }
}
