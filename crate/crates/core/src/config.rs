//! Flat `key = value` configuration files for training runs.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors, so a
//! misspelled option never silently falls back to its default.

use std::path::Path;

use crate::training::TrainConfig;
use crate::{Error, Result};

/// Every key a configuration file may set.
pub const KEYS: &[&str] = &[
    "depth",
    "base_channels",
    "attention_window",
    "two_channel",
    "n_mels",
    "epsilon",
    "xi",
    "power_iterations",
    "alpha",
    "vat",
    "recon",
    "onset",
    "recon_loss",
    "labelled_batch",
    "unlabelled_batch",
    "learning_rate",
    "decay_rate",
    "decay_every",
    "segment_frames",
    "onset_width",
    "epochs",
    "seed",
    "train_fraction",
    "validate_every",
    "checkpoint_every",
];

/// Parses `text` into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Sets one key on `config`.
pub fn apply(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let c = config;
    match key {
        "depth" => c.model.depth = parse(key, value)?,
        "base_channels" => c.model.base_channels = parse(key, value)?,
        "attention_window" => c.model.attention_window = parse(key, value)?,
        "two_channel" => c.model.two_channel = parse_bool(key, value)?,
        "n_mels" => c.model.n_mels = parse(key, value)?,
        "epsilon" => c.vat.epsilon = parse(key, value)?,
        "xi" => c.vat.xi = parse(key, value)?,
        "power_iterations" => c.vat.power_iterations = parse(key, value)?,
        "alpha" => c.objective.alpha = parse(key, value)?,
        "vat" => c.objective.use_vat = parse_bool(key, value)?,
        "recon" => c.objective.use_reconstruction = parse_bool(key, value)?,
        "onset" => {
            let on = parse_bool(key, value)?;
            c.objective.use_onset = on;
            c.vat.include_onset = on;
            if on {
                c.model.two_channel = true;
            }
        }
        "recon_loss" => c.objective.recon_loss = value.parse()?,
        "labelled_batch" => c.batch.labelled = parse(key, value)?,
        "unlabelled_batch" => c.batch.unlabelled = parse(key, value)?,
        "learning_rate" => c.optimizer.learning_rate = parse(key, value)?,
        "decay_rate" => c.optimizer.decay_rate = parse(key, value)?,
        "decay_every" => c.optimizer.decay_every = parse(key, value)?,
        "segment_frames" => c.segment_frames = parse(key, value)?,
        "onset_width" => c.onset_width = parse(key, value)?,
        "epochs" => c.epochs = parse(key, value)?,
        "seed" => c.seed = parse(key, value)?,
        "train_fraction" => c.train_fraction = parse(key, value)?,
        "validate_every" => c.validate_every = parse(key, value)?,
        "checkpoint_every" => c.checkpoint_every = parse(key, value)?,
        other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
    }
    Ok(())
}

/// Applies a configuration text on top of `base` and validates the result.
pub fn from_str_with(base: TrainConfig, text: &str) -> Result<TrainConfig> {
    let mut config = base;
    for (k, v) in parse_pairs(text)? {
        apply(&mut config, &k, &v)?;
    }
    config.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str_with(TrainConfig::default(), &text)
}

/// Renders every key with its current value, one per line.
pub fn to_string(c: &TrainConfig) -> String {
    let values: Vec<String> = vec![
        c.model.depth.to_string(),
        c.model.base_channels.to_string(),
        c.model.attention_window.to_string(),
        c.model.two_channel.to_string(),
        c.model.n_mels.to_string(),
        c.vat.epsilon.to_string(),
        c.vat.xi.to_string(),
        c.vat.power_iterations.to_string(),
        c.objective.alpha.to_string(),
        c.objective.use_vat.to_string(),
        c.objective.use_reconstruction.to_string(),
        c.objective.use_onset.to_string(),
        match c.objective.recon_loss {
            crate::training::ReconLossKind::Bce => "bce".into(),
            crate::training::ReconLossKind::Mse => "mse".into(),
        },
        c.batch.labelled.to_string(),
        c.batch.unlabelled.to_string(),
        c.optimizer.learning_rate.to_string(),
        c.optimizer.decay_rate.to_string(),
        c.optimizer.decay_every.to_string(),
        c.segment_frames.to_string(),
        c.onset_width.to_string(),
        c.epochs.to_string(),
        c.seed.to_string(),
        c.train_fraction.to_string(),
        c.validate_every.to_string(),
        c.checkpoint_every.to_string(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
