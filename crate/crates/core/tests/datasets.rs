use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use amt_core::audio::{write_wav, AudioClip, MelConfig, MelExtractor};
use amt_core::datasets::*;
use amt_core::labels::{rolls_to_notes, write_label_tsv, NoteEvent};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

fn tiny_wav(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_wav(path, &AudioClip::new(vec![0.0; 4096], 16_000).unwrap()).unwrap();
}

fn tiny_label(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_label_tsv(path, &[NoteEvent::new(0.0, 0.1, 60).unwrap()]).unwrap();
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_clips: 4,
        notes_per_clip: (3, 6),
        pitch_range: (55, 70),
        duration_secs: 2.0,
        note_frames: (3, 12),
        polyphony: 2,
        seed,
        timbre: Timbre::Harmonics,
        labelled: 2,
        unlabelled: 1,
    }
}

#[test]
fn a4_note_peaks_at_440_hz() {
    for timbre in [Timbre::Sine, Timbre::Harmonics] {
        let clip = render_notes(&[NoteEvent::new(0.5, 1.0, 69).unwrap()], 1.5, timbre);
        assert_eq!(clip.sample_rate, 16_000);
        let seg = &clip.samples[8_000..16_000];
        let mut buf: Vec<Complex<f64>> = seg.iter().map(|&s| Complex::new(f64::from(s), 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let peak = (1..buf.len() / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        // 8000 samples at 16 kHz: 2 Hz per bin.
        assert_eq!(peak as f64 * 2.0, 440.0);
        // Silence outside the note.
        assert!(clip.samples[..7_000].iter().all(|&s| s == 0.0));
    }
}

#[test]
fn same_seed_gives_byte_identical_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic_corpus(&small_spec(9), a.path()).unwrap();
    generate_synthetic_corpus(&small_spec(9), b.path()).unwrap();
    let names: BTreeSet<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 4 * 2 + 1);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn synthetic_labels_round_trip_through_rolls() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        labelled: 4,
        unlabelled: 0,
        ..small_spec(3)
    };
    let manifest = generate_synthetic_corpus(&spec, dir.path()).unwrap();
    let mel = MelExtractor::new(MelConfig {
        n_mels: 32,
        ..MelConfig::default()
    })
    .unwrap();
    for clip in load_entries(&manifest, &[Role::Labelled], &mel, 2).unwrap() {
        let notes = clip.notes.unwrap();
        let back = rolls_to_notes(
            &clip.frame_roll.unwrap().values,
            Some(&clip.onset_roll.unwrap().values),
            amt_core::frame_rate(),
        )
        .unwrap();
        let key = |n: &NoteEvent| (n.pitch, (n.onset * 1e6).round() as i64);
        let mut a = notes.clone();
        let mut b = back.clone();
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pitch, y.pitch);
            assert!((x.onset - y.onset).abs() < 1e-6 && (x.offset - y.offset).abs() < 1e-6, "{x:?} vs {y:?}");
        }
    }
}

#[test]
fn roles_follow_the_spec_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_corpus(&small_spec(1), dir.path()).unwrap();
    assert_eq!((m.count(Role::Labelled), m.count(Role::Unlabelled), m.count(Role::Test)), (2, 1, 1));
    assert!(m.with_role(Role::Unlabelled).all(|e| e.label.is_none()));
    let reread = CorpusManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(reread, m);
}

#[test]
fn maps_like_scan_counts_labelled_and_unlabelled() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..8 {
        let wav = dir.path().join(format!("lab/piece_{i}.wav"));
        tiny_wav(&wav);
        tiny_label(&wav.with_extension("tsv"));
    }
    for i in 0..104 {
        tiny_wav(&dir.path().join(format!("unlab/{:03}/take.wav", i)));
    }
    let m = scan_corpus(dir.path(), CorpusLayout::MapsLike, &BTreeSet::new()).unwrap();
    assert_eq!((m.count(Role::Labelled), m.count(Role::Unlabelled)), (8, 104));
    // Deterministic ordering.
    let again = scan_corpus(dir.path(), CorpusLayout::MapsLike, &BTreeSet::new()).unwrap();
    assert_eq!(m, again);
    let mut sorted = m.entries.clone();
    sorted.sort_by(|a, b| a.audio.cmp(&b.audio));
    assert_eq!(sorted, m.entries);
}

#[test]
fn exclusion_list_and_test_directories() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b", "c"] {
        let wav = dir.path().join(format!("train/{name}.wav"));
        tiny_wav(&wav);
        tiny_label(&wav.with_extension("tsv"));
    }
    let t = dir.path().join("test/d.wav");
    tiny_wav(&t);
    tiny_label(&t.with_extension("tsv"));
    let list = dir.path().join("exclude.txt");
    fs::write(&list, "# overlapping pieces\nb.wav\n").unwrap();
    let m = scan_corpus(dir.path(), CorpusLayout::MapsLike, &read_exclusion_list(&list).unwrap()).unwrap();
    assert!(m.entries.iter().all(|e| !e.audio.ends_with("b.wav")));
    assert_eq!((m.count(Role::Labelled), m.count(Role::Test)), (2, 1));
}

#[test]
fn musicnet_like_layout() {
    let dir = tempfile::tempdir().unwrap();
    tiny_wav(&dir.path().join("train_data/1.wav"));
    tiny_label(&dir.path().join("train_labels/1.tsv"));
    tiny_wav(&dir.path().join("train_data/2.wav"));
    tiny_wav(&dir.path().join("test_data/3.wav"));
    tiny_label(&dir.path().join("test_labels/3.tsv"));
    let m = scan_corpus(dir.path(), CorpusLayout::MusicnetLike, &BTreeSet::new()).unwrap();
    let roles: Vec<Role> = m.entries.iter().map(|e| e.role).collect();
    assert_eq!(roles, [Role::Test, Role::Labelled, Role::Unlabelled]);
}

#[test]
fn empty_corpus_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(scan_corpus(dir.path(), CorpusLayout::MapsLike, &BTreeSet::new()).is_err());
}

fn loaded_corpus() -> (tempfile::TempDir, Vec<LoadedClip>, Vec<LoadedClip>, Vec<LoadedClip>) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_clips: 6,
        labelled: 1,
        unlabelled: 3,
        ..small_spec(4)
    };
    let m = generate_synthetic_corpus(&spec, dir.path()).unwrap();
    let mel = MelExtractor::new(MelConfig {
        n_mels: 16,
        ..MelConfig::default()
    })
    .unwrap();
    let lab = load_entries(&m, &[Role::Labelled], &mel, 2).unwrap();
    let unl = load_entries(&m, &[Role::Unlabelled], &mel, 2).unwrap();
    let test = load_entries(&m, &[Role::Test], &mel, 2).unwrap();
    (dir, lab, unl, test)
}

#[test]
fn one_shot_sampling_reuses_the_single_clip() {
    let (_d, lab, unl, _) = loaded_corpus();
    let spec = BatchSpec {
        labelled: 3,
        unlabelled: 8,
    };
    let sampler = BatchSampler::new(lab.clone(), unl, spec, 16, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let batch = sampler.next_batch(&mut rng);
        assert_eq!((batch.labelled.len(), batch.unlabelled.len()), (3, 8));
        for seg in &batch.labelled {
            assert_eq!(seg.spec.dim(), (16, 16));
            assert_eq!(seg.frames.dim(), (16, 88));
        }
    }
    // With one labelled clip every crop is a window of that clip's roll.
    let roll = lab[0].frame_roll.as_ref().unwrap();
    let batch = sampler.next_batch(&mut rng);
    for seg in &batch.labelled {
        let found = (0..=roll.frames() - 16).any(|s| roll.window(s, 16).as_f64() == seg.frames);
        assert!(found);
    }
}

#[test]
fn zero_unlabelled_batch_is_empty_and_sampling_is_seeded() {
    let (_d, lab, unl, _) = loaded_corpus();
    let spec = BatchSpec {
        labelled: 2,
        unlabelled: 0,
    };
    let sampler = BatchSampler::new(lab, unl, spec, 16, false).unwrap();
    let a = sampler.next_batch(&mut ChaCha8Rng::seed_from_u64(5));
    let b = sampler.next_batch(&mut ChaCha8Rng::seed_from_u64(5));
    assert!(a.unlabelled.is_empty());
    for (x, y) in a.labelled.iter().zip(&b.labelled) {
        assert_eq!(x.spec, y.spec);
        assert_eq!(x.frames, y.frames);
    }
}

#[test]
fn test_clips_stay_out_of_training_pools() {
    let (_d, lab, unl, test) = loaded_corpus();
    let spec = BatchSpec {
        labelled: 1,
        unlabelled: 2,
    };
    assert!(BatchSampler::new(test.clone(), unl.clone(), spec, 16, false).is_err());
    assert!(BatchSampler::new(lab.clone(), test.clone(), spec, 16, false).is_err());
    assert!(BatchSampler::new(lab.clone(), lab.clone(), spec, 16, true).is_err());
    // Continual learning may add test audio as unlabelled data.
    let mut sampler = BatchSampler::new(lab.clone(), unl, spec, 16, true).unwrap();
    sampler.extend_unlabelled(test);
    assert!(sampler.unlabelled_pool().iter().any(|c| c.role == Role::Test));
    // Standard training never yields anything but labelled/unlabelled roles.
    let sampler = BatchSampler::new(lab, Vec::new(), BatchSpec { labelled: 1, unlabelled: 0 }, 16, false).unwrap();
    assert!(sampler.labelled_pool().iter().all(|c| c.role == Role::Labelled));
}

#[test]
fn empty_labelled_pool_is_rejected() {
    let (_d, _, unl, _) = loaded_corpus();
    let spec = BatchSpec {
        labelled: 1,
        unlabelled: 1,
    };
    assert!(BatchSampler::new(Vec::new(), unl, spec, 16, false).is_err());
}
