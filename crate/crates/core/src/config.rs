//! Plain-text run configuration: one `key = value` per line, `#` comments.

use crate::error::{Error, Result};
use crate::gdd::GrlPosition;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    warmup_explicit: bool,
    taps_explicit: (bool, bool),
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            warmup_explicit: false,
            taps_explicit: (false, false),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_toggle(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Usage(format!(
            "invalid value {other:?} for {key} (expected on|off)"
        ))),
    }
}

impl RunConfig {
    /// Set the step budget, keeping the default 5% warmup unless warmup was
    /// given explicitly.
    pub fn set_total_steps(&mut self, total: usize) {
        self.train.total_steps = total;
        if !self.warmup_explicit {
            self.train.warmup_steps = total / 20;
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.model.backbone.image_size = parse_num(key, value)?,
            "patch_size" => self.model.backbone.patch_size = parse_num(key, value)?,
            "embed_dim" => self.model.backbone.embed_dim = parse_num(key, value)?,
            "depth" => {
                self.model.backbone.depth = parse_num(key, value)?;
                if !self.taps_explicit.0 {
                    self.model.local_tap = 2.min(self.model.backbone.depth);
                }
                if !self.taps_explicit.1 {
                    self.model.global_tap = self.model.backbone.depth;
                }
            }
            "heads" => self.model.backbone.heads = parse_num(key, value)?,
            "window" => self.model.backbone.window = parse_num(key, value)?,
            "shift" => self.model.backbone.shift = parse_num(key, value)?,
            "num_classes" => self.model.backbone.num_classes = parse_num(key, value)?,
            "grl_lambda" => self.model.gdd.grl_lambda = parse_num(key, value)?,
            "grl_position" => {
                self.model.gdd.grl_position = match value {
                    "input" => GrlPosition::Input,
                    "after_convs" => GrlPosition::AfterConvs,
                    other => {
                        return Err(Error::Usage(format!(
                            "invalid value {other:?} for grl_position (expected input|after_convs)"
                        )))
                    }
                }
            }
            "local_tap" => {
                self.model.local_tap = parse_num(key, value)?;
                self.taps_explicit.0 = true;
            }
            "global_tap" => {
                self.model.global_tap = parse_num(key, value)?;
                self.taps_explicit.1 = true;
            }
            "total_steps" => {
                let total = parse_num(key, value)?;
                self.set_total_steps(total);
            }
            "warmup_steps" => {
                self.train.warmup_steps = parse_num(key, value)?;
                self.warmup_explicit = true;
            }
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "base_lr" => self.train.base_lr = parse_num(key, value)?,
            "momentum" => self.train.momentum = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "seed" => self.train.seed = parse_num(key, value)?,
            "lambda_local" => self.train.lambda_local = parse_num(key, value)?,
            "lambda_global" => self.train.lambda_global = parse_num(key, value)?,
            "focal_gamma" => self.train.focal_gamma = parse_num(key, value)?,
            "toggle_gdd" => self.train.toggle_gdd = parse_toggle(key, value)?,
            "toggle_ada" | "toggle_ada_entropy" => {
                self.train.toggle_ada_entropy = parse_toggle(key, value)?
            }
            "toggle_cft" => self.train.toggle_cft = parse_toggle(key, value)?,
            "toggle_pixmix" => self.train.toggle_pixmix = parse_toggle(key, value)?,
            "p_mix" => self.train.p_mix = parse_num(key, value)?,
            "mix_alpha" => self.train.mix_alpha = parse_num(key, value)?,
            "pseudo_pretrain_steps" => self.train.pseudo_pretrain_steps = parse_num(key, value)?,
            "stop_after" => self.train.stop_after = Some(parse_num(key, value)?),
            other => return Err(Error::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("config line {}: expected key = value, got {line:?}", i + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
