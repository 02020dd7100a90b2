//! Flag/config-file/default merging.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dmphn::blocks::CodecConfig;
use dmphn::hierarchy::SplitAxis;
use dmphn::{DType, Error, ModelKind, ModelSpec, TrainConfig};
use serde::Deserialize;

use crate::{ModelArgs, TrainArgs};

/// Bad flags or settings; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Keys accepted in a `--config` JSON file; each mirrors the flag of the same name.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub model: Option<String>,
    pub pattern: Option<String>,
    pub stack: Option<usize>,
    pub scales: Option<usize>,
    pub weight_sharing: Option<bool>,
    pub width: Option<String>,
    pub split_axis: Option<String>,
    pub profile: Option<String>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub crop: Option<usize>,
    pub lr: Option<f64>,
    pub decay: Option<f64>,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub dtype: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }
}

/// Pattern and settings errors from the library are usage errors at the CLI.
pub fn as_usage(e: Error) -> anyhow::Error {
    match e {
        Error::Pattern { .. } | Error::Config(_) => usage(e.to_string()),
        other => other.into(),
    }
}

pub fn model_spec(a: &ModelArgs, f: &FileConfig, default_width: &str) -> Result<ModelSpec> {
    let kind: ModelKind = a
        .model
        .clone()
        .or_else(|| f.model.clone())
        .unwrap_or_else(|| "dmphn".into())
        .parse()
        .map_err(as_usage)?;
    let pattern = a.pattern.clone().or_else(|| f.pattern.clone());
    let stack = a.stack.or(f.stack);
    let scales = a.scales.or(f.scales);
    let weight_sharing = a.weight_sharing || f.weight_sharing.unwrap_or(false);

    if stack.is_some() && !kind.is_stack() {
        return Err(usage(format!("--stack requires stack-dmphn or stack-vmphn, not {kind}")));
    }
    if scales.is_some() && kind != ModelKind::Dmsn {
        return Err(usage(format!("--scales applies to dmsn only, not {kind}")));
    }
    let mut spec = match kind {
        ModelKind::Dmsn => {
            if pattern.is_some() {
                return Err(usage("dmsn takes --scales, not --pattern"));
            }
            ModelSpec::dmsn(scales.unwrap_or(3))
        }
        _ => {
            let mut s = ModelSpec::new(kind, pattern.as_deref().unwrap_or("1-2-4"));
            if kind.is_stack() {
                s.stack = stack.unwrap_or(2);
            }
            s
        }
    };
    spec.weight_sharing = weight_sharing;
    spec.codec = match a.width.as_deref().or(f.width.as_deref()).unwrap_or(default_width) {
        "full" => CodecConfig::default(),
        "desk" => CodecConfig::desk(),
        other => return Err(usage(format!("unknown width {other:?} (full or desk)"))),
    };
    spec.split_axis = match a.split_axis.as_deref().or(f.split_axis.as_deref()).unwrap_or("height") {
        "height" => SplitAxis::Height,
        "width" => SplitAxis::Width,
        other => return Err(usage(format!("unknown split axis {other:?} (height or width)"))),
    };
    spec.validate().map_err(as_usage)?;
    Ok(spec)
}

pub fn profile_name(a: &TrainArgs, f: &FileConfig) -> Result<String> {
    let p = a.profile.clone().or_else(|| f.profile.clone()).unwrap_or_else(|| "desk".into());
    match p.as_str() {
        "desk" | "paper" => Ok(p),
        other => Err(usage(format!("unknown profile {other:?} (desk or paper)"))),
    }
}

pub fn base_config(profile: &str) -> TrainConfig {
    if profile == "paper" {
        TrainConfig::paper()
    } else {
        TrainConfig::desk()
    }
}

/// Applies flag and file values on top of `base`.
pub fn train_config(a: &TrainArgs, f: &FileConfig, base: TrainConfig) -> Result<TrainConfig> {
    let dtype = match a.dtype.as_deref().or(f.dtype.as_deref()) {
        None => base.dtype,
        Some("f32") => DType::F32,
        Some("f64") => DType::F64,
        Some(other) => return Err(usage(format!("unknown dtype {other:?} (f32 or f64)"))),
    };
    Ok(TrainConfig {
        batch_size: a.batch.or(f.batch).unwrap_or(base.batch_size),
        crop: a.crop.or(f.crop).unwrap_or(base.crop),
        lr0: a.lr.or(f.lr).unwrap_or(base.lr0),
        decay_rate: a.decay.or(f.decay).unwrap_or(base.decay_rate),
        epochs: a.epochs.or(f.epochs).unwrap_or(base.epochs),
        seed: a.seed.or(f.seed).unwrap_or(base.seed),
        dtype,
        max_steps: a.max_steps.or(f.max_steps).or(base.max_steps),
        checkpoint_every: a.checkpoint_every.or(f.checkpoint_every).or(base.checkpoint_every),
    })
}

/// `HxW`, both positive.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("{v:?} is not a positive integer")),
    };
    Ok((dim(h)?, dim(w)?))
}
