//! Flat `key=value` run configuration covering the model and training
//! settings. Keys mirror the struct field names; `preset=toy|paper` (if
//! present) must come first and seeds every model field.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{CoordHead, ModelConfig};
use crate::training::{LossScale, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            train: TrainConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Parses on top of the toy preset.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(Self::toy(), text)
    }

    pub fn parse_onto(mut base: Self, text: &str) -> Result<Self> {
        let mut first = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if !first {
                    return Err(Error::Config("`preset` must be the first key".into()));
                }
                base = Self::preset(v)?;
            } else {
                base.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            }
            first = false;
        }
        base.validate()?;
        Ok(base)
    }

    /// Applies one key. Errors on unknown keys or unparsable values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let hg = &mut self.model.hourglass;
        let cn = &mut self.model.coordnet;
        let t = &mut self.train;
        match key {
            "scheme" => self.model.scheme = value.to_string(),
            "num_modules" => hg.num_modules = num(key, value)?,
            "input_height" => hg.input_size.0 = num(key, value)?,
            "input_width" => hg.input_size.1 = num(key, value)?,
            "base_channels" => hg.base_channels = num(key, value)?,
            "z_resolutions" => hg.z_resolutions = list(key, value)?,
            "downsample_depth" => hg.downsample_depth = num(key, value)?,
            "num_conv_layers" => cn.num_conv_layers = num(key, value)?,
            "channel_plan" => cn.channel_plan = list(key, value)?,
            "strides" => cn.strides = list(key, value)?,
            "leaky_slope" => cn.leaky_slope = num(key, value)?,
            "coord_head" => {
                cn.head = match value {
                    "global_avg" => CoordHead::GlobalAvg,
                    "flatten" => CoordHead::Flatten,
                    _ => return Err(bad(key, value)),
                }
            }
            "n_landmarks" => cn.n_landmarks = num(key, value)?,
            "lambda_coord" => t.lambda_coord = num(key, value)?,
            "lr_initial" => t.lr_initial = num(key, value)?,
            "lr_decay_factor" => t.lr_decay_factor = num(key, value)?,
            "lr_decay_every" => t.lr_decay_every = num(key, value)?,
            "epochs_pretrain" => t.epochs_pretrain = num(key, value)?,
            "epochs_finetune" => t.epochs_finetune = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "sigma" => t.sigma = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "loss_scale" => {
                t.loss_scale = match value {
                    "sum" => LossScale::Sum,
                    "mean" => LossScale::Mean,
                    _ => return Err(bad(key, value)),
                }
            }
            "rms_alpha" => t.rms_alpha = num(key, value)?,
            "rms_eps" => t.rms_eps = num(key, value)?,
            "grad_clip" => t.grad_clip = if value == "none" { None } else { Some(num(key, value)?) },
            "abort_on_nan" => t.abort_on_nan = num(key, value)?,
            "global_lr_decay" => t.global_lr_decay = num(key, value)?,
            "augment" => t.augment = num(key, value)?,
            "max_rotation_deg" => t.augment_ranges.max_rotation_deg = num(key, value)?,
            "scale_min" => t.augment_ranges.scale_min = num(key, value)?,
            "scale_max" => t.augment_ranges.scale_max = num(key, value)?,
            "flip_probability" => t.augment_ranges.flip_probability = num(key, value)?,
            "truncate" => t.truncate = num(key, value)?,
            "norm_momentum" => t.norm_momentum = num(key, value)?,
            "depth_scale_factor" => t.depth_scale_factor = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "allow_unpretrained" => t.allow_unpretrained = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key, one per line. Parsing the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let hg = &self.model.hourglass;
        let cn = &self.model.coordnet;
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("scheme", self.model.scheme.clone());
        kv("num_modules", hg.num_modules.to_string());
        kv("input_height", hg.input_size.0.to_string());
        kv("input_width", hg.input_size.1.to_string());
        kv("base_channels", hg.base_channels.to_string());
        kv("z_resolutions", join(&hg.z_resolutions));
        kv("downsample_depth", hg.downsample_depth.to_string());
        kv("num_conv_layers", cn.num_conv_layers.to_string());
        kv("channel_plan", join(&cn.channel_plan));
        kv("strides", join(&cn.strides));
        kv("leaky_slope", cn.leaky_slope.to_string());
        kv(
            "coord_head",
            match cn.head {
                CoordHead::GlobalAvg => "global_avg",
                CoordHead::Flatten => "flatten",
            }
            .into(),
        );
        kv("n_landmarks", cn.n_landmarks.to_string());
        kv("lambda_coord", t.lambda_coord.to_string());
        kv("lr_initial", t.lr_initial.to_string());
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("epochs_pretrain", t.epochs_pretrain.to_string());
        kv("epochs_finetune", t.epochs_finetune.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("sigma", t.sigma.to_string());
        kv("seed", t.seed.to_string());
        kv(
            "loss_scale",
            match t.loss_scale {
                LossScale::Sum => "sum",
                LossScale::Mean => "mean",
            }
            .into(),
        );
        kv("rms_alpha", t.rms_alpha.to_string());
        kv("rms_eps", t.rms_eps.to_string());
        kv("grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
        kv("abort_on_nan", t.abort_on_nan.to_string());
        kv("global_lr_decay", t.global_lr_decay.to_string());
        kv("augment", t.augment.to_string());
        kv("max_rotation_deg", t.augment_ranges.max_rotation_deg.to_string());
        kv("scale_min", t.augment_ranges.scale_min.to_string());
        kv("scale_max", t.augment_ranges.scale_max.to_string());
        kv("flip_probability", t.augment_ranges.flip_probability.to_string());
        kv("truncate", t.truncate.to_string());
        kv("norm_momentum", t.norm_momentum.to_string());
        kv("depth_scale_factor", t.depth_scale_factor.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("allow_unpretrained", t.allow_unpretrained.to_string());
        s
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for `{key}`"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}
