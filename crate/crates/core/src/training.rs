//! The three-term objective `L = L_l + α·L_ul + L_recon`, Adam with a step
//! decay, the epoch loop, validation splits, continual learning and
//! checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use log::{info, warn};
use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Batch, BatchSampler, BatchSpec, LoadedClip};
use crate::labels::DEFAULT_ONSET_WIDTH;
use crate::metrics::{evaluate_notes, ClipScores};
use crate::model::{
    stack, ModelOutput, OutputVars, Reconstructor, ReconstructorParams, Transcriber, TranscriberConfig,
    TranscriberParams,
};
use crate::nn::{bce_mean, mse_mean, Graph, ParamSet, Tensor, Var};
use crate::transcribe::{transcribe_mel, DEFAULT_THRESHOLD};
use crate::vat::{adversarial_batch, lds_var, reference_heads, VatConfig, BCE_DELTA};
use crate::{Error, Result};

/// Iterations per epoch.
pub const ITERATIONS_PER_EPOCH: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLossKind {
    Bce,
    Mse,
}

impl std::str::FromStr for ReconLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Self::Bce),
            "mse" => Ok(Self::Mse),
            other => Err(Error::Config(format!("unknown reconstruction loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub use_reconstruction: bool,
    pub use_vat: bool,
    pub use_onset: bool,
    pub recon_loss: ReconLossKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            use_reconstruction: true,
            use_vat: true,
            use_onset: false,
            recon_loss: ReconLossKind::Bce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_rate: 0.98,
            decay_every: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Step decay: the rate is multiplied by `decay_rate` at every
    /// `decay_every`-iteration boundary.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        let steps = (iteration / self.decay_every) as i32;
        self.learning_rate * self.decay_rate.powi(steps)
    }
}

/// `0.001 · 0.98^⌊iteration / 1000⌋`.
pub fn learning_rate(iteration: u64) -> f64 {
    OptimizerConfig::default().learning_rate_at(iteration)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: TranscriberConfig,
    pub vat: VatConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub batch: BatchSpec,
    pub segment_frames: usize,
    pub onset_width: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Share of labelled clips kept for training; the rest validate.
    pub train_fraction: f64,
    /// Validate every this many epochs; 0 disables validation.
    pub validate_every: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: TranscriberConfig::default(),
            vat: VatConfig::default(),
            objective: ObjectiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch: BatchSpec {
                labelled: 8,
                unlabelled: 8,
            },
            segment_frames: 640,
            onset_width: DEFAULT_ONSET_WIDTH,
            epochs: 100,
            seed: 0,
            train_fraction: 0.8,
            validate_every: 1,
            checkpoint_every: 0,
        }
    }
}

/// Fields that must agree between a checkpoint and a run resuming it.
const FROZEN_FIELDS: &[&str] = &["model", "objective", "vat", "batch", "segment_frames", "onset_width"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.vat.validate()?;
        self.batch.validate()?;
        if !(self.objective.alpha >= 0.0 && self.objective.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.objective.alpha)));
        }
        if (self.objective.use_onset || self.vat.include_onset) && !self.model.two_channel {
            return Err(Error::Config("onset terms need a two-channel transcriber".into()));
        }
        if self.segment_frames < self.model.attention_window {
            return Err(Error::Config(format!(
                "segment of {} frames is shorter than the {}-frame attention window",
                self.segment_frames, self.model.attention_window
            )));
        }
        if self.onset_width == 0 {
            return Err(Error::Config("onset width must be at least 1".into()));
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate > 0.0) || !(opt.decay_rate > 0.0) || opt.decay_every == 0 {
            return Err(Error::Config("learning rate, decay rate and decay interval must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train fraction must be in (0, 1], got {}", self.train_fraction)));
        }
        Ok(())
    }

    /// Human-readable differences in the fields a resumed run may not
    /// change, as `field: checkpoint -> current` lines.
    /// Batch sizes the sampler should draw: unlabelled crops feed only the
    /// VAT term, so none are drawn when it is disabled.
    pub fn sampler_spec(&self) -> BatchSpec {
        BatchSpec {
            labelled: self.batch.labelled,
            unlabelled: if self.objective.use_vat { self.batch.unlabelled } else { 0 },
        }
    }

    pub fn resume_diff(&self, current: &TrainConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(current).expect("config serializes");
        let mut out = Vec::new();
        for field in FROZEN_FIELDS {
            diff_values(field, &a[field], &b[field], &mut out);
        }
        out
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, va) in x {
                let vb = y.get(k).unwrap_or(&serde_json::Value::Null);
                diff_values(&format!("{path}.{k}"), va, vb, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}

/// Adam first and second moments for both parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_theta: ParamSet,
    pub v_theta: ParamSet,
    pub m_phi: ParamSet,
    pub v_phi: ParamSet,
}

impl AdamState {
    fn new(theta: &ParamSet, phi: &ParamSet) -> Self {
        Self {
            m_theta: theta.zeros_like(),
            v_theta: theta.zeros_like(),
            m_phi: phi.zeros_like(),
            v_phi: phi.zeros_like(),
        }
    }
}

fn adam_update(params: &mut ParamSet, grads: &ParamSet, m: &mut ParamSet, v: &mut ParamSet, cfg: &OptimizerConfig, lr: f64, t: u64) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(m.values_mut())
        .zip(v.values_mut())
    {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        });
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub iteration: u64,
    pub theta: TranscriberParams,
    pub phi: ReconstructorParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl TrainingState {
    pub fn epoch(&self) -> u64 {
        self.iteration / ITERATIONS_PER_EPOCH
    }
}

/// Losses and instrumentation for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Iteration index the update was applied at.
    pub iteration: u64,
    pub learning_rate: f64,
    pub loss: f64,
    pub l_l: f64,
    pub l_ul: f64,
    pub l_recon: f64,
    pub lds_l: Option<f64>,
    pub lds_ul: Option<f64>,
    /// Transcriber passes on distinct batches: labelled, LDS_l, LDS_ul.
    pub forward_passes: usize,
    pub theta_grad_norm: f64,
    pub phi_grad_norm: f64,
}

/// Mean BCE of matrices with `target` as the reference distribution.
fn bce_matrix(target: &Array2<f64>, pred: &Array2<f64>) -> f64 {
    let c = |x: f64| x.clamp(BCE_DELTA, 1.0 - BCE_DELTA);
    let sum: f64 = target
        .iter()
        .zip(pred)
        .map(|(&p, &q)| {
            let (p, q) = (c(p), c(q));
            -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
        })
        .sum();
    sum / target.len() as f64
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())))
    }
}

/// `L_l`: the label BCE of the first pass plus, when present, of the
/// second pass on the reconstruction.
pub fn supervised_loss(
    first: &ModelOutput,
    second: Option<&ModelOutput>,
    frame_labels: &Array2<f64>,
    onset_labels: Option<&Array2<f64>>,
    use_onset: bool,
) -> Result<f64> {
    if use_onset && onset_labels.is_none() {
        return Err(Error::Config("onset terms requested but no onset labels given".into()));
    }
    let mut total = 0.0;
    for out in std::iter::once(first).chain(second) {
        same_shape(frame_labels, &out.posteriorgram)?;
        total += bce_matrix(frame_labels, &out.posteriorgram);
        if use_onset {
            let onset = out
                .onset
                .as_ref()
                .ok_or_else(|| Error::Config("onset terms requested from a one-channel model".into()))?;
            let labels = onset_labels.expect("checked above");
            same_shape(labels, onset)?;
            total += bce_matrix(labels, onset);
        }
    }
    Ok(total)
}

/// `L_ul = (LDS_l + LDS_ul) / 2`.
pub fn unsupervised_loss(lds_l: f64, lds_ul: f64) -> f64 {
    (lds_l + lds_ul) / 2.0
}

/// `L_recon` between a reconstruction and the spectrogram it came from.
pub fn reconstruction_loss(recon: &Array2<f64>, spec: &Array2<f64>, kind: ReconLossKind) -> Result<f64> {
    same_shape(recon, spec)?;
    Ok(match kind {
        ReconLossKind::Bce => bce_matrix(spec, recon),
        ReconLossKind::Mse => recon.iter().zip(spec).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / spec.len() as f64,
    })
}

fn label_terms<'g>(out: &OutputVars<'g>, frames: &Tensor, onsets: &Tensor, use_onset: bool) -> Var<'g> {
    let post = bce_mean(frames, out.post, BCE_DELTA);
    match (use_onset, out.onset) {
        (true, Some(o)) => post.add(bce_mean(onsets, o, BCE_DELTA)),
        _ => post,
    }
}

fn finite_or_abort(report: &StepReport) -> Result<()> {
    let values = [report.loss, report.l_l, report.l_ul, report.l_recon, report.theta_grad_norm, report.phi_grad_norm];
    if values.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        iteration: report.iteration,
        snapshot: format!(
            "L={} L_l={} L_ul={} L_recon={} LDS_l={:?} LDS_ul={:?} |grad θ|={} |grad φ|={} lr={}",
            report.loss,
            report.l_l,
            report.l_ul,
            report.l_recon,
            report.lds_l,
            report.lds_ul,
            report.theta_grad_norm,
            report.phi_grad_norm,
            report.learning_rate
        ),
    })
}

/// A transcriber/reconstructor pair with its training configuration and
/// state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Transcriber,
    pub recon: Reconstructor,
    pub config: TrainConfig,
    pub state: TrainingState,
}

/// Per-epoch means of the logged losses plus validation F1 scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub iteration: u64,
    pub loss: f64,
    pub l_l: f64,
    pub l_ul: f64,
    pub l_recon: f64,
    /// Frame, note and note-with-offset F1 on the validation clips.
    pub validation: Option<[f64; 3]>,
}

pub const LOG_HEADER: &str = "epoch\titeration\tloss\tl_l\tl_ul\tl_recon\tframe_f1\tnote_f1\tnote_offset_f1";

impl EpochRecord {
    pub fn to_tsv_line(&self) -> String {
        let mut line = format!(
            "{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            self.epoch, self.iteration, self.loss, self.l_l, self.l_ul, self.l_recon
        );
        match self.validation {
            Some(v) => v.iter().for_each(|f| {
                let _ = write!(line, "\t{f:.6}");
            }),
            None => line.push_str("\t-\t-\t-"),
        }
        line
    }
}

impl Trainer {
    /// Fresh parameters and optimizer state drawn from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Transcriber::new(config.model.clone())?;
        let recon = Reconstructor::new(&config.model)?;
        let theta = model.init_params(config.seed);
        let phi = recon.init_params(config.seed.wrapping_add(1));
        let adam = AdamState::new(&theta.0, &phi.0);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        Ok(Self {
            model,
            recon,
            config,
            state: TrainingState {
                iteration: 0,
                theta,
                phi,
                adam,
                rng,
            },
        })
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepReport> {
        let cfg = &self.config;
        let obj = &cfg.objective;
        let state = &mut self.state;
        if batch.labelled.is_empty() {
            return Err(Error::InvalidInput("labelled batch is empty".into()));
        }
        let specs: Vec<&Array2<f64>> = batch.labelled.iter().map(|s| &s.spec).collect();
        let frames: Vec<&Array2<f64>> = batch.labelled.iter().map(|s| &s.frames).collect();
        let onsets: Vec<&Array2<f64>> = batch.labelled.iter().map(|s| &s.onsets).collect();
        let x_l = stack(&specs)?;
        let y_frames = stack(&frames)?;
        let y_onsets = stack(&onsets)?;

        let g = Graph::new();
        let p = state.theta.0.bind(&g, true);
        let q = state.phi.0.bind(&g, obj.use_reconstruction);
        let mut passes = 1;

        let first = self.model.forward(&p, g.constant(x_l.clone()));
        let mut l_l = label_terms(&first, &y_frames, &y_onsets, obj.use_onset);
        let mut l_recon = None;
        if obj.use_reconstruction {
            let recon = self.recon.forward(&q, first.post);
            let second = self.model.forward(&p, recon);
            l_l = l_l.add(label_terms(&second, &y_frames, &y_onsets, obj.use_onset));
            l_recon = Some(match obj.recon_loss {
                ReconLossKind::Bce => bce_mean(&x_l, recon, BCE_DELTA),
                ReconLossKind::Mse => mse_mean(&x_l, recon),
            });
        }

        let mut lds_l = None;
        let mut lds_ul = None;
        let mut l_ul = None;
        if obj.use_vat {
            let include = cfg.vat.include_onset;
            let reference = reference_heads(&first, include)?;
            let r = adversarial_batch(&self.model, &state.theta.0, &x_l, &reference, &cfg.vat, &mut state.rng);
            let term_l = lds_var(&self.model, &p, &x_l, &reference, &r.values, include);
            passes += 1;
            lds_l = Some(term_l);
            l_ul = Some(if batch.unlabelled.is_empty() {
                term_l
            } else {
                let ul: Vec<&Array2<f64>> = batch.unlabelled.iter().collect();
                let x_ul = stack(&ul)?;
                let frozen = Graph::new();
                let fp = state.theta.0.bind(&frozen, false);
                let reference = reference_heads(&self.model.forward(&fp, frozen.constant(x_ul.clone())), include)?;
                let r = adversarial_batch(&self.model, &state.theta.0, &x_ul, &reference, &cfg.vat, &mut state.rng);
                let term_ul = lds_var(&self.model, &p, &x_ul, &reference, &r.values, include);
                passes += 1;
                lds_ul = Some(term_ul);
                term_l.add(term_ul).scale(0.5)
            });
        }

        let mut total = l_l;
        if let Some(u) = l_ul {
            total = total.add(u.scale(obj.alpha));
        }
        if let Some(r) = l_recon {
            total = total.add(r);
        }

        let lr = cfg.optimizer.learning_rate_at(state.iteration);
        let mut report = StepReport {
            iteration: state.iteration,
            learning_rate: lr,
            loss: total.scalar(),
            l_l: l_l.scalar(),
            l_ul: l_ul.map_or(0.0, |v| v.scalar()),
            l_recon: l_recon.map_or(0.0, |v| v.scalar()),
            lds_l: lds_l.map(|v| v.scalar()),
            lds_ul: lds_ul.map(|v| v.scalar()),
            forward_passes: passes,
            theta_grad_norm: 0.0,
            phi_grad_norm: 0.0,
        };
        finite_or_abort(&report)?;

        let mut grads = g.backward(total);
        let g_theta = state.theta.0.collect_grads(&mut grads, &p);
        let g_phi = state.phi.0.collect_grads(&mut grads, &q);
        report.theta_grad_norm = g_theta.sq_norm().sqrt();
        report.phi_grad_norm = g_phi.sq_norm().sqrt();
        finite_or_abort(&report)?;

        let t = state.iteration + 1;
        let adam = &mut state.adam;
        adam_update(&mut state.theta.0, &g_theta, &mut adam.m_theta, &mut adam.v_theta, &cfg.optimizer, lr, t);
        if obj.use_reconstruction {
            adam_update(&mut state.phi.0, &g_phi, &mut adam.m_phi, &mut adam.v_phi, &cfg.optimizer, lr, t);
        }
        state.iteration = t;
        Ok(report)
    }

    /// Draws a batch with the state's generator and applies one step.
    pub fn train_step(&mut self, sampler: &BatchSampler) -> Result<StepReport> {
        let batch = sampler.next_batch(&mut self.state.rng);
        self.step(&batch)
    }

    /// Scores the current transcriber on full-length clips.
    pub fn evaluate(&self, clips: &[LoadedClip]) -> Result<Vec<ClipScores>> {
        evaluate_clips(&self.model, &self.state.theta, clips, self.config.segment_frames)
    }

    /// Runs `epochs` epochs, calling `on_epoch` after each. Validation
    /// happens every `validate_every` epochs when clips are given.
    pub fn run_epochs(
        &mut self,
        sampler: &BatchSampler,
        epochs: u64,
        validation: &[LoadedClip],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::with_capacity((epochs * ITERATIONS_PER_EPOCH) as usize);
        for _ in 0..epochs {
            let mut sums = [0.0; 4];
            for _ in 0..ITERATIONS_PER_EPOCH {
                let r = self.train_step(sampler)?;
                for (s, v) in sums.iter_mut().zip([r.loss, r.l_l, r.l_ul, r.l_recon]) {
                    *s += v;
                }
                reports.push(r);
            }
            let n = ITERATIONS_PER_EPOCH as f64;
            let epoch = self.state.epoch();
            let every = self.config.validate_every;
            let validation = if !validation.is_empty() && every > 0 && epoch % every == 0 {
                let scores = self.evaluate(validation)?;
                let mean = |f: fn(&ClipScores) -> f64| scores.iter().map(f).sum::<f64>() / scores.len() as f64;
                Some([mean(|s| s.frame.f1), mean(|s| s.note.f1), mean(|s| s.note_offset.f1)])
            } else {
                None
            };
            let record = EpochRecord {
                epoch,
                iteration: self.state.iteration,
                loss: sums[0] / n,
                l_l: sums[1] / n,
                l_ul: sums[2] / n,
                l_recon: sums[3] / n,
                validation,
            };
            info!("{}", record.to_tsv_line());
            on_epoch(self, &record)?;
        }
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    /// Rebuilds a trainer from a checkpoint, checking the parameter layout.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = Transcriber::new(ckpt.config.model.clone())?;
        let recon = Reconstructor::new(&ckpt.config.model)?;
        if !model.params_match(&ckpt.state.theta) || !recon.params_match(&ckpt.state.phi) {
            return Err(Error::Checkpoint("parameters do not match the stored model configuration".into()));
        }
        Ok(Self {
            model,
            recon,
            config: ckpt.config,
            state: ckpt.state,
        })
    }
}

/// Transcribes each clip in full and scores it against its labels.
pub fn evaluate_clips(
    model: &Transcriber,
    params: &TranscriberParams,
    clips: &[LoadedClip],
    window: usize,
) -> Result<Vec<ClipScores>> {
    clips
        .iter()
        .map(|clip| {
            let reference = clip
                .notes
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("{} has no labels", clip.audio.display())))?;
            let t = transcribe_mel(model, params, &clip.mel, window, DEFAULT_THRESHOLD)?;
            evaluate_notes(&t.notes, reference, crate::frame_rate())
        })
        .collect()
}

/// Seeded clip-level split keeping `⌈n·fraction⌉` items for training.
pub fn split_train_validation<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty corpus".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0, 1], got {fraction}")));
    }
    let n = items.len();
    let n_train = ((n as f64 * fraction - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut val_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    if val_idx.is_empty() && fraction < 1.0 {
        warn!("validation split of {n} clip(s) at fraction {fraction} is empty");
    }
    Ok((
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        val_idx.iter().map(|&i| items[i].clone()).collect(),
    ))
}

/// Resumes `checkpoint` for `extra_epochs` epochs with a sampler whose
/// unlabelled pool already holds the old and new clips. Refuses when the
/// architecture or objective differs from `current`.
pub fn continual_train(
    checkpoint: Checkpoint,
    current: &TrainConfig,
    sampler: &BatchSampler,
    extra_epochs: u64,
    validation: &[LoadedClip],
    on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
) -> Result<Trainer> {
    let diff = checkpoint.config.resume_diff(current);
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint configuration differs from this run:\n  {}",
            diff.join("\n  ")
        )));
    }
    if sampler.unlabelled_pool().is_empty() {
        return Err(Error::InvalidInput("continual learning needs unlabelled clips".into()));
    }
    let mut trainer = Trainer::from_checkpoint(checkpoint)?;
    trainer.run_epochs(sampler, extra_epochs, validation, on_epoch)?;
    Ok(trainer)
}

/// A saved run: configuration plus the full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainingState,
}

const MAGIC: &[u8; 8] = b"AMTCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: TrainConfig,
    iteration: u64,
    rng: RngRecord,
    tensors: Vec<TensorRecord>,
}

const GROUPS: [&str; 6] = ["theta", "phi", "adam.m_theta", "adam.v_theta", "adam.m_phi", "adam.v_phi"];

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    fn groups(&self) -> [&ParamSet; 6] {
        let s = &self.state;
        [&s.theta.0, &s.phi.0, &s.adam.m_theta, &s.adam.v_theta, &s.adam.m_phi, &s.adam.v_phi]
    }

    /// Binary encoding: magic, format version, JSON header length and
    /// header, little-endian f64 payload, FNV-1a checksum of the payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let rng = &self.state.rng;
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, set) in GROUPS.iter().zip(self.groups()) {
            for (name, value) in set.names().iter().zip(set.values()) {
                tensors.push(TensorRecord {
                    group: group.to_string(),
                    name: name.clone(),
                    shape: value.shape().to_vec(),
                });
                for &v in value.iter() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            format: "amt-checkpoint".into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            iteration: self.state.iteration,
            rng: RngRecord {
                seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos().to_string(),
            },
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = LittleEndian::read_u32(&bytes[8..12]);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = usize::try_from(LittleEndian::read_u64(&bytes[12..20])).map_err(|_| bad("header too large"))?;
        let body = &bytes[20..];
        if body.len() < header_len + 8 {
            return Err(bad("truncated checkpoint"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("bad header: {e}")))?;
        let payload = &body[header_len..body.len() - 8];
        let checksum = LittleEndian::read_u64(&body[body.len() - 8..]);
        if fnv1a(payload) != checksum {
            return Err(bad("checksum mismatch"));
        }
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 8 {
            return Err(bad(format!("payload holds {} bytes, header describes {}", payload.len(), expected * 8)));
        }

        let mut sets: Vec<ParamSet> = GROUPS.iter().map(|_| ParamSet::new()).collect();
        let mut offset = 0;
        for t in &header.tensors {
            let g = GROUPS
                .iter()
                .position(|g| *g == t.group)
                .ok_or_else(|| bad(format!("unknown tensor group {:?}", t.group)))?;
            let n: usize = t.shape.iter().product();
            let mut data = vec![0.0; n];
            LittleEndian::read_f64_into(&payload[offset..offset + n * 8], &mut data);
            offset += n * 8;
            let value = Tensor::from_shape_vec(t.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
            sets[g].push(t.name.clone(), value);
        }
        if sets.iter().any(|s| !s.is_finite()) {
            return Err(bad("checkpoint holds non-finite values"));
        }

        let seed_hex = &header.rng.seed;
        if seed_hex.len() != 64 {
            return Err(bad("bad generator seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("bad generator seed"))?;
        }
        let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| bad("bad generator position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(word_pos);

        let mut it = sets.into_iter();
        let mut next = || it.next().expect("six groups");
        let theta = TranscriberParams(next());
        let phi = ReconstructorParams(next());
        let adam = AdamState {
            m_theta: next(),
            v_theta: next(),
            m_phi: next(),
            v_phi: next(),
        };
        let ckpt = Checkpoint {
            config: header.config,
            state: TrainingState {
                iteration: header.iteration,
                theta,
                phi,
                adam,
                rng,
            },
        };
        // Validates the layout against the stored configuration.
        Trainer::from_checkpoint(ckpt.clone())?;
        Ok(ckpt)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
