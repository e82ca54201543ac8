//! The U-net transcriber `p(Y_post | X_spec, θ)` and the reconstructor
//! `q(X_recon | Y_post, φ)`.
//!
//! The transcriber's decoder ends in one or two channels. With two, channel 0
//! feeds a sigmoid fully connected layer predicting onsets and channel 1 a
//! linear fully connected layer producing frame features; their
//! concatenation goes through a relative local self-attention layer whose
//! sigmoid output is the posteriorgram. With one channel only the frame
//! features enter the attention layer. There is no dropout anywhere.

mod layers;
mod unet;

use ndarray::{Array2, Array3, Axis, Ix2, Ix3, IxDyn};
use serde::{Deserialize, Serialize};

use crate::nn::{concat, local_relative_attention, Graph, ParamSet, Tensor, Var};
use crate::{Error, Result};
use layers::{Dense, Layout};
use unet::UNet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriberConfig {
    /// Encoder/decoder levels.
    pub depth: usize,
    /// Channels at the first level; level k has `base_channels * (k + 1)`.
    pub base_channels: usize,
    /// Frames each attention query sees (odd).
    pub attention_window: usize,
    /// Predict onsets as a second decoder channel.
    pub two_channel: bool,
    pub n_mels: usize,
    pub n_pitches: usize,
}

impl Default for TranscriberConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            attention_window: 31,
            two_channel: true,
            n_mels: crate::N_MELS,
            n_pitches: crate::N_PITCHES,
        }
    }
}

impl TranscriberConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_channels == 0 || self.n_mels == 0 || self.n_pitches == 0 {
            return Err(Error::Config("channel, mel and pitch counts must be positive".into()));
        }
        if self.attention_window % 2 == 0 {
            return Err(Error::Config(format!(
                "attention window must be odd, got {}",
                self.attention_window
            )));
        }
        Ok(())
    }

    pub fn half_window(&self) -> usize {
        self.attention_window / 2
    }
}

/// Transcriber weights θ.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriberParams(pub ParamSet);

/// Reconstructor weights φ.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructorParams(pub ParamSet);

/// Transcriber outputs for one spectrogram, each T×88.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub onset: Option<Array2<f64>>,
    pub frame_features: Array2<f64>,
    pub posteriorgram: Array2<f64>,
}

/// Batched transcriber outputs on a graph, each (N, T, 88).
#[derive(Debug, Clone, Copy)]
pub struct OutputVars<'g> {
    pub onset: Option<Var<'g>>,
    pub frame: Var<'g>,
    pub post: Var<'g>,
}

impl<'g> OutputVars<'g> {
    /// The probability heads a divergence is summed over: onset (when
    /// present and requested) then posteriorgram.
    pub fn heads(&self, include_onset: bool) -> Vec<Var<'g>> {
        let mut v = Vec::with_capacity(2);
        if include_onset {
            if let Some(o) = self.onset {
                v.push(o);
            }
        }
        v.push(self.post);
        v
    }
}

/// Stacks equally shaped matrices into an (N, rows, cols) tensor.
pub fn stack(items: &[&Array2<f64>]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views)
        .map_err(|_| Error::InvalidInput(format!("batch items differ in shape from {:?}", first.dim())))?;
    Ok(stacked.into_dyn())
}

fn check_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite values")))
    }
}

fn rows_of(t: &Tensor, i: usize) -> Array2<f64> {
    t.view()
        .into_dimensionality::<Ix3>()
        .expect("3-d output")
        .index_axis(Axis(0), i)
        .to_owned()
}

#[derive(Debug, Clone)]
pub struct Transcriber {
    config: TranscriberConfig,
    layout: Layout,
    unet: UNet,
    onset_fc: Option<Dense>,
    frame_fc: Dense,
    query: Dense,
    key: Dense,
    value: Dense,
    relative: usize,
}

impl Transcriber {
    pub fn new(config: TranscriberConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::default();
        let channels = if config.two_channel { 2 } else { 1 };
        let unet = UNet::new(&mut layout, "unet", config.depth, config.base_channels, 1, channels);
        let onset_fc = config
            .two_channel
            .then(|| Dense::new(&mut layout, "onset_fc", config.n_mels, config.n_pitches));
        let frame_fc = Dense::new(&mut layout, "frame_fc", config.n_mels, config.n_pitches);
        let att_in = channels * config.n_pitches;
        let query = Dense::new(&mut layout, "attention.query", att_in, config.n_pitches);
        let key = Dense::new(&mut layout, "attention.key", att_in, config.n_pitches);
        let value = Dense::new(&mut layout, "attention.value", att_in, config.n_pitches);
        let relative = layout.add(
            "attention.relative".into(),
            &[config.attention_window, config.n_pitches],
            layers::Init::Normal(0.1),
        );
        Ok(Self {
            config,
            layout,
            unet,
            onset_fc,
            frame_fc,
            query,
            key,
            value,
            relative,
        })
    }

    pub fn config(&self) -> &TranscriberConfig {
        &self.config
    }

    pub fn init_params(&self, seed: u64) -> TranscriberParams {
        TranscriberParams(self.layout.init(seed))
    }

    pub fn params_match(&self, params: &TranscriberParams) -> bool {
        self.layout.matches(&params.0)
    }

    /// Frames on each side of an output frame that can influence it.
    pub fn receptive_radius(&self) -> usize {
        self.unet.time_radius() + self.config.half_window()
    }

    /// Checks one T×F input against the configuration.
    pub fn validate_input(&self, x: &Array2<f64>) -> Result<()> {
        let (t, f) = x.dim();
        if f != self.config.n_mels {
            return Err(Error::InvalidInput(format!(
                "spectrogram has {f} bins, model expects {}",
                self.config.n_mels
            )));
        }
        if t < self.config.attention_window {
            return Err(Error::InvalidInput(format!(
                "spectrogram has {t} frames, fewer than the {}-frame attention window",
                self.config.attention_window
            )));
        }
        check_finite(x, "spectrogram")
    }

    /// Forward pass over a batch `x` of shape (N, T, F).
    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> OutputVars<'g> {
        let shape = x.shape();
        let (n, t, f) = (shape[0], shape[1], shape[2]);
        let maps = self.unet.forward(p, x.reshape(&[n, 1, t, f]));
        let channel = |c: usize| maps.narrow(1, c, 1).reshape(&[n, t, f]);
        let (onset, frame) = match &self.onset_fc {
            Some(fc) => (Some(fc.forward(p, channel(0)).sigmoid()), self.frame_fc.forward(p, channel(1))),
            None => (None, self.frame_fc.forward(p, channel(0))),
        };
        let att_in = match onset {
            Some(o) => concat(&[o, frame], 2),
            None => frame,
        };
        let q = self.query.forward(p, att_in);
        let k = self.key.forward(p, att_in);
        let v = self.value.forward(p, att_in);
        let post = local_relative_attention(q, k, v, p[self.relative], self.config.half_window()).sigmoid();
        OutputVars { onset, frame, post }
    }

    /// Runs a batch without recording gradients.
    pub fn infer_batch(&self, params: &TranscriberParams, batch: &[&Array2<f64>]) -> Result<Vec<ModelOutput>> {
        if !self.params_match(params) {
            return Err(Error::InvalidInput("parameters do not match the transcriber layout".into()));
        }
        for x in batch {
            self.validate_input(x)?;
        }
        let g = Graph::new();
        let p = params.0.bind(&g, false);
        let out = self.forward(&p, g.constant(stack(batch)?));
        let (post, frame) = (out.post.value(), out.frame.value());
        let onset = out.onset.map(|o| o.value());
        Ok((0..batch.len())
            .map(|i| ModelOutput {
                onset: onset.as_ref().map(|o| rows_of(o, i)),
                frame_features: rows_of(&frame, i),
                posteriorgram: rows_of(&post, i),
            })
            .collect())
    }

    /// `Y_onset`, `Y_frame`, `Y_post` for one T×F spectrogram.
    pub fn transcribe(&self, params: &TranscriberParams, spec: &Array2<f64>) -> Result<ModelOutput> {
        Ok(self.infer_batch(params, &[spec])?.remove(0))
    }

    /// The same transcriber applied to a reconstructed spectrogram.
    pub fn second_pass(&self, params: &TranscriberParams, recon: &Array2<f64>) -> Result<ModelOutput> {
        self.transcribe(params, recon)
    }
}

#[derive(Debug, Clone)]
pub struct Reconstructor {
    n_mels: usize,
    n_pitches: usize,
    layout: Layout,
    input_fc: Dense,
    unet: UNet,
}

impl Reconstructor {
    /// Mirrors the transcriber's U-net depth and width.
    pub fn new(config: &TranscriberConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::default();
        let input_fc = Dense::new(&mut layout, "recon.input_fc", config.n_pitches, config.n_mels);
        let unet = UNet::new(&mut layout, "recon.unet", config.depth, config.base_channels, 1, 1);
        Ok(Self {
            n_mels: config.n_mels,
            n_pitches: config.n_pitches,
            layout,
            input_fc,
            unet,
        })
    }

    pub fn init_params(&self, seed: u64) -> ReconstructorParams {
        ReconstructorParams(self.layout.init(seed))
    }

    pub fn params_match(&self, params: &ReconstructorParams) -> bool {
        self.layout.matches(&params.0)
    }

    /// (N, T, 88) posteriorgram to (N, T, F) spectrogram in (0, 1).
    pub fn forward<'g>(&self, p: &[Var<'g>], post: Var<'g>) -> Var<'g> {
        let shape = post.shape();
        let (n, t) = (shape[0], shape[1]);
        let h = self.input_fc.forward(p, post).reshape(&[n, 1, t, self.n_mels]);
        self.unet.forward(p, h).reshape(&[n, t, self.n_mels]).sigmoid()
    }

    /// `X_recon` for one T×88 posteriorgram.
    pub fn reconstruct(&self, params: &ReconstructorParams, post: &Array2<f64>) -> Result<Array2<f64>> {
        if !self.params_match(params) {
            return Err(Error::InvalidInput("parameters do not match the reconstructor layout".into()));
        }
        if post.ncols() != self.n_pitches || post.nrows() == 0 {
            return Err(Error::InvalidInput(format!(
                "posteriorgram is {:?}, expected T×{}",
                post.dim(),
                self.n_pitches
            )));
        }
        check_finite(post, "posteriorgram")?;
        let g = Graph::new();
        let p = params.0.bind(&g, false);
        let x = g.constant(post.clone().into_dyn().into_shape_with_order(IxDyn(&[1, post.nrows(), post.ncols()])).expect("shape"));
        let out = self.forward(&p, x).value();
        Ok(rows_of(&out, 0))
    }
}

/// Converts a (T, F) graph value back into a matrix.
pub fn to_matrix(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-d").to_owned()
}

/// Splits an (N, T, F) value into its N matrices.
pub fn unstack(t: &Tensor) -> Vec<Array2<f64>> {
    let a: Array3<f64> = t.view().into_dimensionality::<Ix3>().expect("3-d").to_owned();
    a.outer_iter().map(|m| m.to_owned()).collect()
}
