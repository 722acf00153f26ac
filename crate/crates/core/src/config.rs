//! Flat `key = value` run configuration shared by the CLI and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use crate::datagen::SpriteSequenceSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::modecell::FusionMode;
use crate::network::ModeRnnConfig;
use crate::trainer::TrainConfig;

/// Slot-binding ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    On,
    /// A single slot regardless of `num_slots`.
    N1,
}

impl Binding {
    pub fn as_str(self) -> &'static str {
        match self {
            Binding::On => "on",
            Binding::N1 => "n1",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Data generation; its `seed` is replaced by [`RunConfig::seed`].
    pub data: SpriteSequenceSpec,
    pub count: usize,
    pub layers: usize,
    pub hidden: usize,
    pub patch: usize,
    pub input_len: usize,
    pub pred_len: usize,
    pub num_slots: usize,
    pub ffn_hidden: usize,
    pub fusion: FusionMode,
    pub binding: Binding,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub seed: u64,
    /// Worker threads; `None` lets the pool decide.
    pub threads: Option<usize>,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModeRnnConfig::default();
        Self {
            data: SpriteSequenceSpec::default(),
            count: 1000,
            layers: m.layers,
            hidden: m.hidden,
            patch: m.patch,
            input_len: m.input_len,
            pred_len: m.pred_len,
            num_slots: m.num_slots,
            ffn_hidden: m.ffn_hidden,
            fusion: m.fusion,
            binding: Binding::On,
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            seed: 0,
            threads: None,
            deterministic: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "modes",
    "mode_weights",
    "frame_size",
    "seq_len",
    "sprite_size",
    "speed_min",
    "speed_max",
    "count",
    "layers",
    "hidden",
    "patch",
    "input_len",
    "pred_len",
    "num_slots",
    "ffn_hidden",
    "fusion_mode",
    "binding",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch",
    "max_iters",
    "eval_every",
    "grad_clip",
    "seed",
    "csi_threshold",
    "ssim_window",
    "threads",
    "deterministic",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse {v:?}: {e}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "modes" => {
                self.data.modes = list(key, v)?;
                let n = self.data.modes.len().max(1);
                self.data.mode_weights = vec![1.0 / n as f64; n];
            }
            "mode_weights" => {
                let w: Vec<f64> = list(key, v)?;
                let total: f64 = w.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::config(key, "weights must have a positive sum"));
                }
                self.data.mode_weights = w.into_iter().map(|x| x / total).collect();
            }
            "frame_size" => self.data.frame_size = num(key, v)?,
            "seq_len" => self.data.seq_len = num(key, v)?,
            "sprite_size" => self.data.sprite_size = num(key, v)?,
            "speed_min" => self.data.speed_range.0 = num(key, v)?,
            "speed_max" => self.data.speed_range.1 = num(key, v)?,
            "count" => self.count = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "patch" => self.patch = num(key, v)?,
            "input_len" => self.input_len = num(key, v)?,
            "pred_len" => self.pred_len = num(key, v)?,
            "num_slots" => self.num_slots = num(key, v)?,
            "ffn_hidden" => self.ffn_hidden = num(key, v)?,
            "fusion_mode" => {
                self.fusion = FusionMode::parse(v).ok_or_else(|| {
                    Error::config(key, format!("expected adaptive or equal, got {v:?}"))
                })?
            }
            "binding" => {
                self.binding = match v {
                    "on" => Binding::On,
                    "n1" => Binding::N1,
                    _ => return Err(Error::config(key, format!("expected on or n1, got {v:?}"))),
                }
            }
            "lr" => self.train.lr = num(key, v)?,
            "beta1" => self.train.beta1 = num(key, v)?,
            "beta2" => self.train.beta2 = num(key, v)?,
            "eps" => self.train.eps = num(key, v)?,
            "batch" => self.train.batch = num(key, v)?,
            "max_iters" => self.train.max_iters = num(key, v)?,
            "eval_every" => self.train.eval_every = num(key, v)?,
            "grad_clip" => {
                self.train.grad_clip = match v {
                    "off" | "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "seed" => self.seed = num(key, v)?,
            "csi_threshold" => self.metrics.csi_threshold = num(key, v)?,
            "ssim_window" => self.metrics.ssim_window = num(key, v)?,
            "threads" => {
                let n: usize = num(key, v)?;
                self.threads = (n > 0).then_some(n);
            }
            "deterministic" => {
                self.deterministic = match v {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected true or false, got {v:?}"),
                        ))
                    }
                }
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected key = value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("modes", join(&self.data.modes));
        put("mode_weights", join(&self.data.mode_weights));
        put("frame_size", self.data.frame_size.to_string());
        put("seq_len", self.data.seq_len.to_string());
        put("sprite_size", self.data.sprite_size.to_string());
        put("speed_min", self.data.speed_range.0.to_string());
        put("speed_max", self.data.speed_range.1.to_string());
        put("count", self.count.to_string());
        put("layers", self.layers.to_string());
        put("hidden", self.hidden.to_string());
        put("patch", self.patch.to_string());
        put("input_len", self.input_len.to_string());
        put("pred_len", self.pred_len.to_string());
        put("num_slots", self.num_slots.to_string());
        put("ffn_hidden", self.ffn_hidden.to_string());
        put("fusion_mode", self.fusion.as_str().to_string());
        put("binding", self.binding.as_str().to_string());
        put("lr", self.train.lr.to_string());
        put("beta1", self.train.beta1.to_string());
        put("beta2", self.train.beta2.to_string());
        put("eps", self.train.eps.to_string());
        put("batch", self.train.batch.to_string());
        put("max_iters", self.train.max_iters.to_string());
        put("eval_every", self.train.eval_every.to_string());
        put(
            "grad_clip",
            self.train.grad_clip.map_or("off".into(), |c| c.to_string()),
        );
        put("seed", self.seed.to_string());
        put("csi_threshold", self.metrics.csi_threshold.to_string());
        put("ssim_window", self.metrics.ssim_window.to_string());
        put("threads", self.threads.unwrap_or(0).to_string());
        put("deterministic", self.deterministic.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.data_spec().validate()?;
        if self.data.seq_len != self.input_len + self.pred_len {
            return Err(Error::config(
                "seq_len",
                format!(
                    "{} does not equal input_len + pred_len = {}",
                    self.data.seq_len,
                    self.input_len + self.pred_len
                ),
            ));
        }
        if self.num_slots == 0 {
            return Err(Error::config("num_slots", "must be positive"));
        }
        if self.metrics.ssim_window == 0 || self.metrics.ssim_window % 2 == 0 {
            return Err(Error::config("ssim_window", "must be odd and positive"));
        }
        self.train.validate()?;
        for cell in self.model_config()?.cell_configs()? {
            cell.validate()?;
        }
        Ok(())
    }

    pub fn data_spec(&self) -> SpriteSequenceSpec {
        SpriteSequenceSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn model_config(&self) -> Result<ModeRnnConfig> {
        let c = ModeRnnConfig {
            layers: self.layers,
            hidden: self.hidden,
            patch: self.patch,
            input_len: self.input_len,
            pred_len: self.pred_len,
            image_channels: 1,
            image_height: self.data.frame_size,
            image_width: self.data.frame_size,
            num_slots: match self.binding {
                Binding::On => self.num_slots,
                Binding::N1 => 1,
            },
            ffn_hidden: self.ffn_hidden,
            fusion: self.fusion,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Run config describing an existing model and training setup.
    pub fn from_parts(model: &ModeRnnConfig, train: &TrainConfig) -> Result<Self> {
        if model.image_channels != 1 || model.image_height != model.image_width {
            return Err(Error::config(
                "frame_size",
                "run configs describe square single-channel frames only",
            ));
        }
        let mut c = Self {
            layers: model.layers,
            hidden: model.hidden,
            patch: model.patch,
            input_len: model.input_len,
            pred_len: model.pred_len,
            num_slots: model.num_slots,
            ffn_hidden: model.ffn_hidden,
            fusion: model.fusion,
            train: train.clone(),
            seed: train.seed,
            ..Self::default()
        };
        c.data.frame_size = model.image_height;
        c.data.seq_len = model.seq_len();
        if c.data.sprite_size >= c.data.frame_size {
            c.data.sprite_size = (c.data.frame_size / 2).max(1);
        }
        Ok(c)
    }
}
