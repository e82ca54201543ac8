use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use amt_core::audio::{MelConfig, MelExtractor};
use amt_core::config;
use amt_core::datasets::{
    generate_synthetic_corpus, load_audio, load_clip, load_entries, read_exclusion_list, scan_corpus, BatchSampler,
    CorpusLayout, CorpusManifest, LoadedClip, ManifestEntry, Role, SyntheticSpec, Timbre, MANIFEST_FILE,
};
use amt_core::labels::{read_label_tsv, write_label_tsv};
use amt_core::metrics::{corpus_report, evaluate_notes};
use amt_core::plot::save_roll_png;
use amt_core::training::{
    continual_train, split_train_validation, Checkpoint, EpochRecord, TrainConfig, Trainer, LOG_HEADER,
};
use amt_core::transcribe::{transcribe_mel, DEFAULT_THRESHOLD};

/// Semi-supervised piano transcription toolkit.
#[derive(Parser)]
#[command(name = "amt", version)]
struct Cli {
    /// Base directory for relative corpus and output paths.
    #[arg(long, global = true, env = "AMT_DATA_ROOT")]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a corpus manifest, from a directory scan or a synthetic corpus.
    Prepare(PrepareArgs),
    /// Train a transcriber and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Transcribe an audio file to a note list.
    Transcribe(TranscribeArgs),
    /// Score predicted note lists against references.
    Evaluate(EvaluateArgs),
    /// Resume a checkpoint with extra unlabelled audio.
    Continual(ContinualArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Generate a synthetic corpus instead of scanning.
    #[arg(long, conflicts_with = "scan")]
    synthetic: bool,
    /// Corpus root to scan.
    #[arg(long)]
    scan: Option<PathBuf>,
    #[arg(long, default_value = "maps_like")]
    layout: CorpusLayout,
    /// File of names to leave out, one per line.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Output directory (synthetic) or manifest directory (scan; defaults to the root).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clips given the labelled role; defaults to all of them.
    #[arg(long)]
    labelled: Option<usize>,
    /// Clips given the unlabelled role, after the labelled ones.
    #[arg(long, default_value_t = 0)]
    unlabelled: usize,
    #[arg(long, default_value_t = 4.0)]
    duration: f64,
    /// Pure sines instead of three harmonics.
    #[arg(long)]
    sine: bool,
}

#[derive(Args, Clone)]
struct Toggles {
    /// Key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, overrides_with = "no_vat")]
    vat: bool,
    #[arg(long)]
    no_vat: bool,
    #[arg(long, overrides_with = "no_recon")]
    recon: bool,
    #[arg(long)]
    no_recon: bool,
    /// Train and regularize the onset channel too.
    #[arg(long)]
    onset: bool,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Toggles {
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                config::from_str_with(base, &text)?
            }
            None => base,
        };
        if self.vat {
            c.objective.use_vat = true;
        }
        if self.no_vat {
            c.objective.use_vat = false;
        }
        if self.recon {
            c.objective.use_reconstruction = true;
        }
        if self.no_recon {
            c.objective.use_reconstruction = false;
        }
        if self.onset {
            config::apply(&mut c, "onset", "true")?;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest file, or a directory holding `manifest.tsv`.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    toggles: Toggles,
}

#[derive(Args)]
struct TranscribeArgs {
    audio: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Note list output; defaults to the audio path with a `.notes.tsv` suffix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a piano-roll PNG.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Pixels per frame and per pitch in the plot.
    #[arg(long, default_value_t = 4)]
    scale: u32,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted note lists.
    #[arg(long, num_args = 1.., required = true)]
    pred: Vec<PathBuf>,
    /// Reference note lists, in the same order.
    #[arg(long = "ref", num_args = 1.., required = true)]
    reference: Vec<PathBuf>,
    /// Also write per-clip scores as TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct ContinualArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of the original run.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of new audio to add to the unlabelled pool.
    #[arg(long)]
    new_unlabelled: PathBuf,
    #[arg(long)]
    epochs: u64,
    #[arg(long)]
    out: PathBuf,
    /// Configuration overrides; must not change the model or objective.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root.clone();
    let at = |p: &Path| match &root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    };
    match cli.command {
        Command::Prepare(a) => prepare(a, at),
        Command::Train(a) => train(&at(&a.manifest), &at(&a.out), &a.toggles),
        Command::Transcribe(a) => transcribe(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Continual(a) => continual(a, at),
    }
}

fn prepare(a: PrepareArgs, at: impl Fn(&Path) -> PathBuf) -> Result<()> {
    if a.synthetic {
        let out = at(a.out.as_deref().context("--synthetic needs --out")?);
        let labelled = a.labelled.unwrap_or(a.clips.saturating_sub(a.unlabelled));
        ensure!(labelled + a.unlabelled <= a.clips, "more roles than clips");
        let spec = SyntheticSpec {
            n_clips: a.clips,
            seed: a.seed,
            duration_secs: a.duration,
            timbre: if a.sine { Timbre::Sine } else { Timbre::Harmonics },
            labelled,
            unlabelled: a.unlabelled,
            ..SyntheticSpec::default()
        };
        let m = generate_synthetic_corpus(&spec, &out)?;
        report_manifest(&m, &out.join(MANIFEST_FILE));
        return Ok(());
    }
    let root = at(a.scan.as_deref().context("give --synthetic or --scan")?);
    let exclude = match &a.exclude {
        Some(p) => read_exclusion_list(p)?,
        None => BTreeSet::new(),
    };
    let m = scan_corpus(&root, a.layout, &exclude)?;
    let dir = a.out.as_deref().map(&at).unwrap_or_else(|| root.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(MANIFEST_FILE);
    m.write(&path)?;
    report_manifest(&m, &path);
    Ok(())
}

fn report_manifest(m: &CorpusManifest, path: &Path) {
    println!(
        "{}: {} labelled, {} unlabelled, {} test",
        path.display(),
        m.count(Role::Labelled),
        m.count(Role::Unlabelled),
        m.count(Role::Test)
    );
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn extractor(config: &TrainConfig) -> Result<MelExtractor> {
    Ok(MelExtractor::new(MelConfig {
        n_mels: config.model.n_mels,
        ..MelConfig::default()
    })?)
}

/// Appends each epoch record to `metrics.tsv` and writes periodic
/// checkpoints.
struct RunLog {
    out: PathBuf,
    log: fs::File,
    checkpoint_every: u64,
}

impl RunLog {
    fn create(out: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("config.txt"), config::to_string(config))?;
        let mut log = fs::File::create(out.join("metrics.tsv"))?;
        writeln!(log, "{LOG_HEADER}")?;
        Ok(Self {
            out: out.to_path_buf(),
            log,
            checkpoint_every: config.checkpoint_every,
        })
    }

    fn record(&mut self, trainer: &Trainer, r: &EpochRecord) -> amt_core::Result<()> {
        writeln!(self.log, "{}", r.to_tsv_line()).map_err(|source| amt_core::Error::Io {
            path: self.out.join("metrics.tsv"),
            source,
        })?;
        if self.checkpoint_every > 0 && r.epoch % self.checkpoint_every == 0 {
            trainer
                .checkpoint()
                .save(&self.out.join(format!("checkpoint_epoch_{}.amt", r.epoch)))?;
        }
        Ok(())
    }

    fn finish(self, trainer: &Trainer) -> Result<PathBuf> {
        let path = self.out.join("checkpoint.amt");
        trainer.checkpoint().save(&path)?;
        Ok(path)
    }
}

/// Labelled clips split into training and validation sets, plus the
/// unlabelled pool.
fn load_pools(manifest: &CorpusManifest, config: &TrainConfig) -> Result<(Vec<LoadedClip>, Vec<LoadedClip>, Vec<LoadedClip>)> {
    let mel = extractor(config)?;
    let labelled = load_entries(manifest, &[Role::Labelled], &mel, config.onset_width)?;
    let unlabelled = load_entries(manifest, &[Role::Unlabelled], &mel, config.onset_width)?;
    let (train, validation) = split_train_validation(&labelled, config.train_fraction, config.seed)?;
    info!(
        "{} training, {} validation, {} unlabelled clips",
        train.len(),
        validation.len(),
        unlabelled.len()
    );
    Ok((train, validation, unlabelled))
}

fn dump_diagnostic(out: &Path, err: &amt_core::Error) {
    if let amt_core::Error::NonFiniteLoss { .. } = err {
        let path = out.join("diagnostic.txt");
        if let Err(e) = fs::write(&path, format!("{err}\n")) {
            warn!("could not write {}: {e}", path.display());
        }
    }
}

fn train(manifest: &Path, out: &Path, toggles: &Toggles) -> Result<()> {
    let config = toggles.resolve(TrainConfig::default())?;
    let manifest = CorpusManifest::read(&manifest_path(manifest))?;
    manifest.validate()?;
    let (train, validation, unlabelled) = load_pools(&manifest, &config)?;
    let sampler = BatchSampler::new(train, unlabelled, config.sampler_spec(), config.segment_frames, false)?;
    let mut log = RunLog::create(out, &config)?;
    let mut trainer = Trainer::new(config.clone())?;
    let result = trainer.run_epochs(&sampler, config.epochs, &validation, |t, r| log.record(t, r));
    if let Err(e) = result {
        dump_diagnostic(out, &e);
        return Err(e.into());
    }
    let path = log.finish(&trainer)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn transcribe(a: TranscribeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let mel = extractor(&trainer.config)?;
    let cfg = mel.config();
    let audio = load_audio(&a.audio, cfg.sample_rate, cfg.window_samples)?;
    let spec = mel.compute(&audio)?;
    let t = transcribe_mel(
        &trainer.model,
        &trainer.state.theta,
        &spec.values,
        trainer.config.segment_frames,
        a.threshold,
    )?;
    let out = a.out.unwrap_or_else(|| a.audio.with_extension("notes.tsv"));
    write_label_tsv(&out, &t.notes)?;
    println!("{} notes -> {}", t.notes.len(), out.display());
    if let Some(plot) = a.plot {
        let frame = t.posteriorgram.mapv(|p| u8::from(p > a.threshold));
        let onset = t.onset.as_ref().map(|o| o.mapv(|p| u8::from(p > a.threshold)));
        save_roll_png(&plot, &frame, onset.as_ref(), a.scale)?;
        println!("roll -> {}", plot.display());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.pred.len() != a.reference.len() {
        bail!("{} predictions but {} references", a.pred.len(), a.reference.len());
    }
    let mut clips = Vec::with_capacity(a.pred.len());
    for (p, r) in a.pred.iter().zip(&a.reference) {
        let scores = evaluate_notes(&read_label_tsv(p)?, &read_label_tsv(r)?, amt_core::frame_rate())?;
        clips.push((p.display().to_string(), scores));
    }
    let report = corpus_report(clips)?;
    print!("{}", report.to_text());
    if let Some(path) = a.tsv {
        fs::write(&path, report.to_tsv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Audio files directly inside `dir`, sorted.
fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

/// Entries for the new audio. Files the manifest tags as test keep that tag
/// so they stay identifiable; labelled training clips are refused.
fn new_entries(manifest: &CorpusManifest, files: Vec<PathBuf>) -> Result<Vec<ManifestEntry>> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let mut out = Vec::new();
    for audio in files {
        let known = manifest.entries.iter().find(|e| canon(&e.audio) == canon(&audio));
        let role = match known.map(|e| e.role) {
            Some(Role::Labelled) => bail!("{} is already a labelled training clip", audio.display()),
            Some(Role::Unlabelled) => continue,
            Some(Role::Test) => Role::Test,
            None => Role::Unlabelled,
        };
        out.push(ManifestEntry {
            role,
            audio,
            label: None,
        });
    }
    Ok(out)
}

fn continual(a: ContinualArgs, at: impl Fn(&Path) -> PathBuf) -> Result<()> {
    let ckpt = Checkpoint::load(&at(&a.checkpoint))?;
    let current = match &a.config {
        Some(p) => config::load(p)?,
        None => ckpt.config.clone(),
    };
    let manifest_file = manifest_path(&at(&a.manifest));
    let manifest = CorpusManifest::read(&manifest_file)?;
    let added = new_entries(&manifest, wav_files(&at(&a.new_unlabelled))?)?;
    ensure!(!added.is_empty(), "no new audio in {}", a.new_unlabelled.display());

    println!("unlabelled pool: {} -> {}", manifest.count(Role::Unlabelled), manifest.count(Role::Unlabelled) + added.len());
    for e in &added {
        println!("+ unlabelled\t{}", e.audio.display());
    }

    let config = ckpt.config.clone();
    let (train, validation, mut unlabelled) = load_pools(&manifest, &config)?;
    let mel = extractor(&config)?;
    for e in &added {
        unlabelled.push(load_clip(e, &mel, config.onset_width)?);
    }
    let spec = config.sampler_spec();
    ensure!(
        spec.unlabelled > 0,
        "the checkpoint's run draws no unlabelled batch, so new audio would be ignored"
    );
    let sampler = BatchSampler::new(train, unlabelled, spec, config.segment_frames, true)?;

    let out = at(&a.out);
    let mut log = RunLog::create(&out, &config)?;
    let mut updated = manifest.clone();
    updated.entries.extend(added.iter().filter(|e| e.role == Role::Unlabelled).cloned());
    fs::write(out.join(MANIFEST_FILE), updated.to_tsv(&out))?;

    let trainer = match continual_train(ckpt, &current, &sampler, a.epochs, &validation, |t, r| log.record(t, r)) {
        Ok(t) => t,
        Err(e) => {
            dump_diagnostic(&out, &e);
            return Err(e.into());
        }
    };
    let path = log.finish(&trainer)?;
    println!("wrote {}", path.display());
    Ok(())
}
