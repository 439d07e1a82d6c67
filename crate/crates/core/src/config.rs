//! Run configuration: flat `key = value` text, `#` comments, unknown keys
//! rejected.

use std::fs;
use std::path::Path;

use crate::curriculum::{CurriculumConfig, Strategy};
use crate::dfgn::{ModelConfig, TemporalLayer};
use crate::diffusion::{DiffusionSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::spritegen::{config_hash, SpriteConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            sample_steps: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub text_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 2000,
            batch_size: 1,
            checkpoint_every: 500,
            text_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Seed of every evaluation-side random draw; independent of training.
    pub seed: u64,
    pub samples: usize,
    pub features: usize,
    pub loss_clips: usize,
    pub loss_timesteps: usize,
    pub smoothness_window: usize,
    pub frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 12345,
            samples: 32,
            features: 8,
            loss_clips: 16,
            loss_timesteps: 4,
            smoothness_window: 50,
            frames: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SpriteConfig,
    pub data_count: usize,
    pub heldout_count: usize,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub curriculum: CurriculumConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: SpriteConfig::default(),
            data_count: 512,
            heldout_count: 48,
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            curriculum: CurriculumConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        reason: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            reason: format!("`{value}` is not a boolean"),
        }),
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.sync();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = parse(k, v)?,
            "data.height" => self.data.height = parse(k, v)?,
            "data.width" => self.data.width = parse(k, v)?,
            "data.channels" => self.data.channels = parse(k, v)?,
            "data.min_frames" => self.data.min_frames = parse(k, v)?,
            "data.max_frames" => self.data.max_frames = parse(k, v)?,
            "data.tail_exponent" => self.data.tail_exponent = parse(k, v)?,
            "data.sprite_size" => self.data.sprite_size = parse(k, v)?,
            "data.count" => self.data_count = parse(k, v)?,
            "data.heldout_count" => self.heldout_count = parse(k, v)?,
            "model.width" => self.model.sti.width = parse(k, v)?,
            "model.gamma" => self.model.sti.gamma = parse(k, v)?,
            "model.kernel" => self.model.sti.kernel = parse(k, v)?,
            "model.heads" => self.model.sti.heads = parse(k, v)?,
            "model.blocks" => self.model.blocks = parse(k, v)?,
            "model.temporal" => self.model.temporal = parse::<TemporalLayer>(k, v)?,
            "model.max_frames" => self.model.max_frames = parse(k, v)?,
            "model.frame_positions" => self.model.frame_positions = parse_bool(k, v)?,
            "model.ln_eps" => self.model.ln_eps = parse(k, v)?,
            "diffusion.steps" => self.diffusion.steps = parse(k, v)?,
            "diffusion.beta_start" => self.diffusion.beta_start = parse(k, v)?,
            "diffusion.beta_end" => self.diffusion.beta_end = parse(k, v)?,
            "diffusion.sample_steps" => self.diffusion.sample_steps = parse(k, v)?,
            "curriculum.strategy" => self.curriculum.strategy = parse::<Strategy>(k, v)?,
            "curriculum.lambda" => self.curriculum.lambda = parse(k, v)?,
            "curriculum.kp" => self.curriculum.kp = parse(k, v)?,
            "curriculum.ki" => self.curriculum.ki = parse(k, v)?,
            "curriculum.kd" => self.curriculum.kd = parse(k, v)?,
            "curriculum.delta" => {
                self.curriculum.delta = if v == "auto" { None } else { Some(parse(k, v)?) }
            }
            "curriculum.h_ipt" => self.curriculum.task_entropy[0] = parse(k, v)?,
            "curriculum.h_pdt" => self.curriculum.task_entropy[1] = parse(k, v)?,
            "curriculum.h_grt" => self.curriculum.task_entropy[2] = parse(k, v)?,
            "train.lr" => self.train.lr = parse(k, v)?,
            "train.steps" => self.train.steps = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,
            "train.text_dropout" => self.train.text_dropout = parse(k, v)?,
            "eval.seed" => self.eval.seed = parse(k, v)?,
            "eval.samples" => self.eval.samples = parse(k, v)?,
            "eval.features" => self.eval.features = parse(k, v)?,
            "eval.loss_clips" => self.eval.loss_clips = parse(k, v)?,
            "eval.loss_timesteps" => self.eval.loss_timesteps = parse(k, v)?,
            "eval.smoothness_window" => self.eval.smoothness_window = parse(k, v)?,
            "eval.frames" => self.eval.frames = parse(k, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "unknown key".into(),
                })
            }
        }
        self.sync();
        Ok(())
    }

    /// Copies shared values into the sub-configs that need them.
    fn sync(&mut self) {
        self.model.channels = self.data.channels;
        self.curriculum.min_frames = self.data.min_frames;
        self.curriculum.max_frames = self.data.max_frames;
        self.curriculum.total_steps = self.train.steps;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.into(),
                reason,
            })
        };
        self.data.validate()?;
        self.model.validate()?;
        self.curriculum.validate()?;
        self.schedule()?;
        if self.train.batch_size != 1 {
            return bad("train.batch_size", "only 1 is supported".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad("train.lr", format!("{} must be positive", self.train.lr));
        }
        if !(0.0..=1.0).contains(&self.train.text_dropout) {
            return bad("train.text_dropout", format!("{} outside [0, 1]", self.train.text_dropout));
        }
        if self.diffusion.sample_steps == 0 || self.diffusion.sample_steps > self.diffusion.steps {
            return bad(
                "diffusion.sample_steps",
                format!("{} outside [1, {}]", self.diffusion.sample_steps, self.diffusion.steps),
            );
        }
        if self.model.frame_positions
            && self.model.temporal == TemporalLayer::Sti
            && self.model.max_frames < self.data.max_frames.max(self.eval.frames)
        {
            return bad(
                "model.max_frames",
                format!("{} is shorter than the longest clip", self.model.max_frames),
            );
        }
        if self.eval.frames < 3 {
            return bad("eval.frames", "must be at least 3".into());
        }
        if self.eval.loss_timesteps == 0 || self.eval.loss_clips == 0 {
            return bad("eval.loss_clips", "loss clips and timesteps must be positive".into());
        }
        if self.eval.smoothness_window < 2 {
            return bad("eval.smoothness_window", "must be at least 2".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(
            self.diffusion.steps,
            self.diffusion.beta_start,
            self.diffusion.beta_end,
        )
    }

    /// Every key with its current value, in documentation order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:?}");
        let c = &self.curriculum;
        vec![
            ("seed", self.seed.to_string()),
            ("data.height", self.data.height.to_string()),
            ("data.width", self.data.width.to_string()),
            ("data.channels", self.data.channels.to_string()),
            ("data.min_frames", self.data.min_frames.to_string()),
            ("data.max_frames", self.data.max_frames.to_string()),
            ("data.tail_exponent", f(self.data.tail_exponent)),
            ("data.sprite_size", self.data.sprite_size.to_string()),
            ("data.count", self.data_count.to_string()),
            ("data.heldout_count", self.heldout_count.to_string()),
            ("model.width", self.model.sti.width.to_string()),
            ("model.gamma", self.model.sti.gamma.to_string()),
            ("model.kernel", self.model.sti.kernel.to_string()),
            ("model.heads", self.model.sti.heads.to_string()),
            ("model.blocks", self.model.blocks.to_string()),
            ("model.temporal", self.model.temporal.to_string()),
            ("model.max_frames", self.model.max_frames.to_string()),
            ("model.frame_positions", self.model.frame_positions.to_string()),
            ("model.ln_eps", f(self.model.ln_eps)),
            ("diffusion.steps", self.diffusion.steps.to_string()),
            ("diffusion.beta_start", f(self.diffusion.beta_start)),
            ("diffusion.beta_end", f(self.diffusion.beta_end)),
            ("diffusion.sample_steps", self.diffusion.sample_steps.to_string()),
            ("curriculum.strategy", c.strategy.to_string()),
            ("curriculum.lambda", f(c.lambda)),
            ("curriculum.kp", f(c.kp)),
            ("curriculum.ki", f(c.ki)),
            ("curriculum.kd", f(c.kd)),
            ("curriculum.delta", c.delta.map_or("auto".into(), f)),
            ("curriculum.h_ipt", f(c.task_entropy[0])),
            ("curriculum.h_pdt", f(c.task_entropy[1])),
            ("curriculum.h_grt", f(c.task_entropy[2])),
            ("train.lr", f(self.train.lr)),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.text_dropout", f(self.train.text_dropout)),
            ("eval.seed", self.eval.seed.to_string()),
            ("eval.samples", self.eval.samples.to_string()),
            ("eval.features", self.eval.features.to_string()),
            ("eval.loss_clips", self.eval.loss_clips.to_string()),
            ("eval.loss_timesteps", self.eval.loss_timesteps.to_string()),
            ("eval.smoothness_window", self.eval.smoothness_window.to_string()),
            ("eval.frames", self.eval.frames.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Digest of every value; independent of key order in the source file.
    pub fn hash(&self) -> String {
        let pairs = self.pairs();
        config_hash(pairs.iter().map(|(k, v)| (*k, v.as_str())))
    }

    /// Clips drawn for the held-out split have this many frames.
    pub fn heldout_sprites(&self) -> SpriteConfig {
        SpriteConfig {
            min_frames: self.eval.frames,
            max_frames: self.eval.frames,
            ..self.data.clone()
        }
    }
}
