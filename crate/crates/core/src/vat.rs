//! Virtual adversarial training with a BCE divergence.
//!
//! The adversarial direction is found by power iteration on the divergence
//! between the model's prediction at `X` and at `X + r`, holding the weights
//! fixed. Unlike the original image-domain method the direction is
//! normalized separately at every timestep, so each spectrogram frame is
//! pushed by exactly `ε` in L2.

use log::warn;
use ndarray::{Array2, Axis, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{stack, ModelOutput, OutputVars, Transcriber, TranscriberParams};
use crate::nn::{bce_mean, Graph, ParamSet, Tensor, Var};
use crate::{Error, Result};

/// Probability clamp used by every BCE term.
pub const BCE_DELTA: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VatConfig {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iterations: usize,
    pub include_onset: bool,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            xi: 1e-2,
            power_iterations: 1,
            include_onset: false,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon must be finite and non-negative, got {}", self.epsilon)));
        }
        if !self.xi.is_finite() || self.xi <= 0.0 {
            return Err(Error::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if self.power_iterations == 0 {
            return Err(Error::Config("power_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// An input-space perturbation for one spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub values: Array2<f64>,
    /// Timesteps whose gradient vanished and were left at zero.
    pub degenerate_rows: usize,
}

/// Batched perturbation, (N, T, F).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPerturbation {
    pub values: Tensor,
    pub degenerate_rows: usize,
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())))
    }
}

fn mean_bce(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let clamp = |x: f64| x.clamp(BCE_DELTA, 1.0 - BCE_DELTA);
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&p, &q)| {
            let (p, q) = (clamp(p), clamp(q));
            -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
        })
        .sum();
    total / p.len() as f64
}

/// `Σ_i BCE[p_i, q_i]` with `p` as the reference distribution.
pub fn bce_divergence(p: &ModelOutput, q: &ModelOutput, include_onset: bool) -> Result<f64> {
    check_same(&p.posteriorgram, &q.posteriorgram)?;
    let mut d = mean_bce(&p.posteriorgram, &q.posteriorgram);
    if include_onset {
        match (&p.onset, &q.onset) {
            (Some(a), Some(b)) => {
                check_same(a, b)?;
                d += mean_bce(a, b);
            }
            _ => return Err(Error::InvalidInput("include_onset requires onset outputs on both sides".into())),
        }
    }
    Ok(d)
}

/// Reference targets for a divergence: the onset head (when used) followed
/// by the posteriorgram, detached from any graph.
pub fn reference_heads(out: &OutputVars<'_>, include_onset: bool) -> Result<Vec<Tensor>> {
    if include_onset && out.onset.is_none() {
        return Err(Error::Config("include_onset requires a two-channel transcriber".into()));
    }
    Ok(out.heads(include_onset).iter().map(|v| (*v.value()).clone()).collect())
}

/// Divergence between fixed reference heads and a live forward pass.
pub fn divergence_var<'g>(reference: &[Tensor], out: &OutputVars<'g>, include_onset: bool) -> Var<'g> {
    let heads = out.heads(include_onset);
    assert_eq!(heads.len(), reference.len(), "reference/head count mismatch");
    heads
        .into_iter()
        .zip(reference)
        .map(|(q, p)| bce_mean(p, q, BCE_DELTA))
        .reduce(|a, b| a.add(b))
        .expect("at least one head")
}

/// Scales every (example, timestep) row of `g` to L2 norm `scale`. Rows with
/// a zero gradient stay zero; returns how many there were.
pub fn normalize_rows(g: &mut Tensor, scale: f64) -> usize {
    let mut g3 = g.view_mut().into_dimensionality::<Ix3>().expect("(N, T, F) perturbation");
    let mut degenerate = 0;
    for mut example in g3.outer_iter_mut() {
        for mut row in example.axis_iter_mut(Axis(0)) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                row.mapv_inplace(|x| x * (scale / norm));
            } else {
                row.fill(0.0);
                degenerate += 1;
            }
        }
    }
    degenerate
}

/// `∇_r D(reference, p(X + r, θ̂))` with θ held constant.
pub fn vat_gradient(
    model: &Transcriber,
    params: &ParamSet,
    x: &Tensor,
    reference: &[Tensor],
    r: &Tensor,
    include_onset: bool,
) -> Tensor {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let rv = g.leaf(r.clone());
    let out = model.forward(&p, g.constant(x.clone()).add(rv));
    let d = divergence_var(reference, &out, include_onset);
    g.backward(d).take_or_zeros(rv)
}

/// Power iteration for the per-timestep adversarial direction of a batch.
///
/// The initial random direction is drawn once per call as a T×F matrix and
/// shared by every example, so identical examples receive identical
/// perturbations.
pub fn adversarial_batch(
    model: &Transcriber,
    params: &ParamSet,
    x: &Tensor,
    reference: &[Tensor],
    config: &VatConfig,
    rng: &mut ChaCha8Rng,
) -> BatchPerturbation {
    let shape = x.shape().to_vec();
    let (n, t, f) = (shape[0], shape[1], shape[2]);
    if config.epsilon == 0.0 {
        return BatchPerturbation {
            values: Tensor::zeros(x.raw_dim()),
            degenerate_rows: 0,
        };
    }
    let draw = Array2::<f64>::from_shape_simple_fn((t, f), || StandardNormal.sample(rng));
    let mut r = draw
        .broadcast((n, t, f))
        .expect("broadcast initial direction")
        .to_owned()
        .into_dyn();
    normalize_rows(&mut r, config.xi);
    let mut g = r.clone();
    for k in 0..config.power_iterations {
        g = vat_gradient(model, params, x, reference, &r, config.include_onset);
        if k + 1 < config.power_iterations {
            r = g.clone();
            normalize_rows(&mut r, config.xi);
        }
    }
    let degenerate_rows = normalize_rows(&mut g, config.epsilon);
    if degenerate_rows == n * t {
        warn!("adversarial gradient vanished at every timestep; using a zero perturbation");
    }
    BatchPerturbation {
        values: g,
        degenerate_rows,
    }
}

fn frozen_reference(model: &Transcriber, params: &ParamSet, x: &Tensor, include_onset: bool) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let out = model.forward(&p, g.constant(x.clone()));
    reference_heads(&out, include_onset)
}

/// `r_adv` for one spectrogram. `seed` drives the random start.
pub fn compute_adversarial_perturbation(
    model: &Transcriber,
    params: &TranscriberParams,
    spec: &Array2<f64>,
    config: &VatConfig,
    seed: u64,
) -> Result<Perturbation> {
    config.validate()?;
    model.validate_input(spec)?;
    if !params.0.is_finite() {
        return Err(Error::InvalidInput("transcriber parameters are not finite".into()));
    }
    let x = stack(&[spec])?;
    let reference = frozen_reference(model, &params.0, &x, config.include_onset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = adversarial_batch(model, &params.0, &x, &reference, config, &mut rng);
    let values = batch
        .values
        .into_dimensionality::<Ix3>()
        .expect("3-d")
        .index_axis_move(Axis(0), 0);
    Ok(Perturbation {
        values,
        degenerate_rows: batch.degenerate_rows,
    })
}

/// The LDS term for a batch as a live node: the reference is detached, the
/// perturbed branch runs on `p` so gradients reach θ.
pub fn lds_var<'g>(
    model: &Transcriber,
    p: &[Var<'g>],
    x: &Tensor,
    reference: &[Tensor],
    r_adv: &Tensor,
    include_onset: bool,
) -> Var<'g> {
    let g = p[0].graph();
    let out = model.forward(p, g.constant(x + r_adv));
    divergence_var(reference, &out, include_onset)
}

/// LDS of a batch, normalized by that batch's own size.
pub fn lds(
    model: &Transcriber,
    params: &TranscriberParams,
    batch: &[&Array2<f64>],
    config: &VatConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("LDS needs at least one spectrogram".into()));
    }
    for spec in batch {
        model.validate_input(spec)?;
    }
    let x = stack(batch)?;
    let reference = frozen_reference(model, &params.0, &x, config.include_onset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = adversarial_batch(model, &params.0, &x, &reference, config, &mut rng);
    let g = Graph::new();
    let p = params.0.bind(&g, false);
    Ok(lds_var(model, &p, &x, &reference, &r.values, config.include_onset).scalar())
}
