//! Training, sampling, evaluation and ablation sweeps.
//!
//! Every random draw comes from a ChaCha8 substream keyed by
//! `(seed, purpose, index)`, so a run can resume from any checkpoint without
//! saving generator state, and runs that differ only in strategy or temporal
//! layer share their initial weights, timesteps and noise draws.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::curriculum::{CurriculumState, Feedback, Plan, Strategy, TraceRow};
use crate::dfgn::{
    augment_text, loss_and_gradients, pack_guidance, predict_noise, read_checkpoint, write_checkpoint,
    DenoiserParams, TemporalLayer,
};
use crate::diffusion::{ddim_sample, forward_noise, masked_loss_value, DiffusionSchedule, Pinning};
use crate::error::{Error, Result};
use crate::masks::{bits_to_string, condense_to, make_condition_mask, ConditionMask, LossMask, Task};
use crate::metrics::{psnr, smoothness, toy_fvd, FeatureSpec};
use crate::numcore::Tensor;
use crate::spritegen::{generate_dataset, Dataset, SpriteClip};

mod purpose {
    pub const INIT: u64 = 0;
    pub const CURRICULUM: u64 = 1;
    pub const CLIP: u64 = 2;
    pub const CLUSTER: u64 = 3;
    pub const MASK: u64 = 4;
    pub const TEXT: u64 = 5;
    pub const TIME: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const SYNTHETIC_LOSS: u64 = 9;
}

/// Independent generator for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | index);
    rng
}

const HELDOUT_SALT: u64 = 0x5eed_0f4e_1d00;

/// Training split and fixed-length held-out split for `cfg.seed`.
pub fn make_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = generate_dataset(&cfg.data, cfg.seed, cfg.data_count, "train")?;
    let heldout = generate_dataset(
        &cfg.heldout_sprites(),
        cfg.seed ^ HELDOUT_SALT,
        cfg.heldout_count,
        "heldout",
    )?;
    Ok((train, heldout))
}

/// One training step as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub deviation: f64,
    pub score: f64,
    pub static_entropy: f64,
    pub adaptive_entropy: f64,
    pub raw_target: f64,
    pub realized_target: f64,
    pub task: Task,
    /// Frame count the curriculum asked for.
    pub sampled_frames: usize,
    /// Frame count actually trained on; lower when no clip was long enough.
    pub frames: usize,
    pub clip: usize,
    pub t: usize,
    pub condition_mask: String,
    pub loss_mask: String,
}

impl TrainRecord {
    pub const HEADER: &'static str = "step,L_c,L_s,P_star,H_static,H_adaptive,H_raw,H_realized,task,frames,sampled_frames,clip,t,condition_mask,loss_mask";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.deviation,
            self.score,
            self.static_entropy,
            self.adaptive_entropy,
            self.raw_target,
            self.realized_target,
            self.task,
            self.frames,
            self.sampled_frames,
            self.clip,
            self.t,
            self.condition_mask,
            self.loss_mask
        )
    }
}

/// Scheduler and progress saved beside each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub config_hash: String,
    pub curriculum: CurriculumState,
    pub last_condition_mask: String,
    pub last_loss_mask: String,
}

pub struct Trainer {
    pub config: RunConfig,
    pub params: DenoiserParams,
    pub curriculum: CurriculumState,
    pub schedule: DiffusionSchedule,
    pub step: usize,
    pub log: Vec<TrainRecord>,
    last_masks: (String, String),
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let params = DenoiserParams::init(&config.model, &mut substream(config.seed, purpose::INIT, 0))?;
        Ok(Trainer {
            config: config.clone(),
            params,
            curriculum: CurriculumState::new(config.curriculum.clone())?,
            schedule: config.schedule()?,
            step: 0,
            log: Vec::new(),
            last_masks: (String::new(), String::new()),
        })
    }

    /// Restores weights and scheduler state from `checkpoint` and its sidecar.
    pub fn resume(config: &RunConfig, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let ck = read_checkpoint(checkpoint)?;
        let hash = config.hash();
        if ck.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written under config {}, current config is {hash}",
                ck.config_hash
            )));
        }
        let params = ck.into_params(&config.model)?;
        let sidecar = state_path(checkpoint);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let state: TrainerState = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", sidecar.display())))?;
        if state.config_hash != hash {
            return Err(Error::Checkpoint("trainer state belongs to another config".into()));
        }
        Ok(Trainer {
            config: config.clone(),
            params,
            curriculum: state.curriculum,
            schedule: config.schedule()?,
            step: state.step,
            log: Vec::new(),
            last_masks: (state.last_condition_mask, state.last_loss_mask),
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            config_hash: self.config.hash(),
            curriculum: self.curriculum.clone(),
            last_condition_mask: self.last_masks.0.clone(),
            last_loss_mask: self.last_masks.1.clone(),
        }
    }

    /// Writes weights to `path` and trainer state beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.params, &self.config.hash())?;
        let json = serde_json::to_string(&self.state())
            .map_err(|e| Error::Checkpoint(format!("serializing trainer state: {e}")))?;
        let sidecar = state_path(path);
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    /// Runs one SGD step on a single curriculum-chosen sample.
    pub fn step_once(&mut self, clips: &[SpriteClip]) -> Result<TrainRecord> {
        let seed = self.config.seed;
        let step = self.step;
        let idx = step as u64;
        let plan: Plan = self
            .curriculum
            .plan(step, &mut substream(seed, purpose::CURRICULUM, idx))?;

        let mut frames = plan.frames;
        let candidates = loop {
            let c: Vec<usize> = (0..clips.len())
                .filter(|&i| clips[i].frame_count() >= frames)
                .collect();
            if !c.is_empty() {
                break c;
            }
            if frames <= 3 {
                return Err(Error::invalid("no training clip has at least 3 frames"));
            }
            frames -= 1;
        };
        let clip_index = candidates[substream(seed, purpose::CLIP, idx).random_range(0..candidates.len())];
        let (clip, loss_mask) = condense_to(
            &clips[clip_index],
            frames,
            &mut substream(seed, purpose::CLUSTER, idx),
        )?;
        let frames = clip.frame_count();
        let cmask = make_condition_mask(plan.task, frames, &mut substream(seed, purpose::MASK, idx))?;
        let tokens = augment_text(
            &clip.caption,
            self.config.train.text_dropout,
            &mut substream(seed, purpose::TEXT, idx),
        )?;
        let t = substream(seed, purpose::TIME, idx).random_range(1..=self.schedule.steps());
        let eps = Tensor::randn(clip.frames.shape(), 1.0, &mut substream(seed, purpose::NOISE, idx));
        let noisy = forward_noise(&clip.frames, t, &eps, &self.schedule)?;
        let pack = pack_guidance(&noisy.x_t, &clip, &cmask, t, Some(&tokens))?;
        let (loss, grads) = loss_and_gradients(&self.params, &pack, &eps, &loss_mask)?;
        self.params.sgd_step(&grads, self.config.train.lr)?;
        let fb: Feedback = self.curriculum.observe(loss)?;

        self.last_masks = (cmask.to_bit_string(), bits_to_string(&loss_mask.active));
        let row = TraceRow::new(&plan, &fb);
        let record = TrainRecord {
            step,
            loss,
            deviation: fb.deviation,
            score: row.score,
            static_entropy: row.static_entropy,
            adaptive_entropy: row.adaptive_entropy,
            raw_target: row.raw_target,
            realized_target: row.realized_target,
            task: plan.task,
            sampled_frames: plan.frames,
            frames,
            clip: clip_index,
            t,
            condition_mask: self.last_masks.0.clone(),
            loss_mask: self.last_masks.1.clone(),
        };
        self.step += 1;
        self.log.push(record.clone());
        Ok(record)
    }

    /// Trains up to `until` steps (capped at the configured total). With a
    /// checkpoint directory, saves every `train.checkpoint_every` steps.
    pub fn run(&mut self, clips: &[SpriteClip], until: usize, checkpoints: Option<&Path>) -> Result<()> {
        let until = until.min(self.config.train.steps);
        let every = self.config.train.checkpoint_every;
        while self.step < until {
            self.step_once(clips)?;
            if let Some(dir) = checkpoints {
                if every > 0 && self.step % every == 0 {
                    self.save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("state.json")
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

pub fn write_train_log(path: &Path, records: &[TrainRecord], append: bool) -> Result<()> {
    let mut text = String::new();
    if !append || !path.exists() {
        text.push_str(TrainRecord::HEADER);
        text.push('\n');
    }
    for r in records {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    let result = if append {
        use std::io::Write;
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| f.write_all(text.as_bytes()))
    } else {
        fs::write(path, text)
    };
    result.map_err(|e| Error::io(path, e))
}

/// DDIM generation guided by `clip` under `cmask`; known frames are pinned.
pub fn generate_clip<R: Rng + ?Sized>(
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    sample_steps: usize,
    clip: &SpriteClip,
    cmask: &ConditionMask,
    rng: &mut R,
) -> Result<Tensor> {
    let shape = clip.frames.shape().to_vec();
    let base = pack_guidance(
        &Tensor::zeros(&shape),
        clip,
        cmask,
        schedule.steps(),
        Some(&clip.caption),
    )?;
    let predictor = |x: &Tensor, t: usize| -> Result<Tensor> {
        let pack = base.with_noisy(x, t)?;
        predict_noise(params, &pack)
    };
    let pin = Pinning {
        keep: &cmask.keep,
        known: &clip.frames,
    };
    ddim_sample(&predictor, &shape, schedule, sample_steps, Some(&pin), rng)
}

/// Condition mask used for held-out clip `index` under `task`.
pub fn eval_mask(cfg: &RunConfig, task: Task, frames: usize, index: usize) -> Result<ConditionMask> {
    make_condition_mask(
        task,
        frames,
        &mut substream(cfg.eval.seed, purpose::MASK, (task.index() as u64) << 32 | index as u64),
    )
}

/// Mean noise-prediction loss on held-out clips at fixed timestep quantiles
/// and fixed noise.
pub fn eval_loss(params: &DenoiserParams, cfg: &RunConfig, heldout: &[SpriteClip], task: Task) -> Result<f64> {
    let schedule = cfg.schedule()?;
    let count = cfg.eval.loss_clips.min(heldout.len());
    if count == 0 {
        return Err(Error::invalid("held-out split is empty"));
    }
    let k = cfg.eval.loss_timesteps;
    let per_clip: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let clip = &heldout[i];
            let cmask = eval_mask(cfg, task, clip.frame_count(), i)?;
            let mask = LossMask::all_ones(clip.frame_count());
            let mut total = 0.0;
            for q in 0..k {
                let t = (((q as f64 + 0.5) / k as f64) * schedule.steps() as f64).round().max(1.0) as usize;
                let eps = Tensor::randn(
                    clip.frames.shape(),
                    1.0,
                    &mut substream(cfg.eval.seed, purpose::NOISE, (i * k + q) as u64),
                );
                let noisy = forward_noise(&clip.frames, t, &eps, &schedule)?;
                let pack = pack_guidance(&noisy.x_t, clip, &cmask, t, Some(&clip.caption))?;
                let pred = predict_noise(params, &pack)?;
                total += masked_loss_value(&pred, &eps, &mask)?;
            }
            Ok(total / k as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per_clip.iter().sum::<f64>() / count as f64)
}

/// Generated clips for the first `eval.samples` held-out clips.
pub fn generate_eval_set(
    params: &DenoiserParams,
    cfg: &RunConfig,
    heldout: &[SpriteClip],
    task: Task,
) -> Result<Vec<Tensor>> {
    let schedule = cfg.schedule()?;
    let count = cfg.eval.samples.min(heldout.len());
    (0..count)
        .into_par_iter()
        .map(|i| {
            let clip = &heldout[i];
            let cmask = eval_mask(cfg, task, clip.frame_count(), i)?;
            let mut rng = substream(cfg.eval.seed, purpose::SAMPLE, (task.index() as u64) << 32 | i as u64);
            generate_clip(params, &schedule, cfg.diffusion.sample_steps, clip, &cmask, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub metric: &'static str,
    pub task: Task,
    pub value: f64,
    pub set_a: usize,
    pub set_b: usize,
    pub seed: u64,
}

pub const EVAL_HEADER: &str = "metric,task,value,set_a,set_b,seed";

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:?},{},{},{}",
            self.metric, self.task, self.value, self.set_a, self.set_b, self.seed
        )
    }
}

/// Toy FVD, PSNR and eval loss for each task: `3 × 3` rows.
pub fn evaluate(params: &DenoiserParams, cfg: &RunConfig, heldout: &[SpriteClip]) -> Result<Vec<EvalRow>> {
    let need = cfg.eval.features + 1;
    if heldout.len() < need || cfg.eval.samples < need {
        return Err(Error::invalid(format!(
            "toy FVD with {} features needs at least {need} held-out clips and samples; have {} clips, {} samples",
            cfg.eval.features,
            heldout.len(),
            cfg.eval.samples
        )));
    }
    let shape = heldout[0].frames.shape();
    let spec = FeatureSpec::new(heldout[0].frames.len(), cfg.eval.features, cfg.eval.seed)?;
    let real: Vec<Tensor> = heldout.iter().map(|c| c.frames.clone()).collect();
    if real.iter().any(|c| c.shape() != shape) {
        return Err(Error::invalid("held-out clips must share one shape"));
    }
    let mut rows = Vec::with_capacity(9);
    for task in Task::ALL {
        let generated = generate_eval_set(params, cfg, heldout, task)?;
        let fvd = toy_fvd(&generated, &real, &spec)?;
        let mean_psnr = generated
            .iter()
            .zip(&real)
            .map(|(g, r)| psnr(g, r))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum::<f64>()
            / generated.len() as f64;
        let loss = eval_loss(params, cfg, heldout, task)?;
        let n = generated.len();
        let loss_n = cfg.eval.loss_clips.min(heldout.len());
        let seed = cfg.eval.seed;
        rows.push(EvalRow { metric: "toy_fvd", task, value: fvd, set_a: n, set_b: real.len(), seed });
        rows.push(EvalRow { metric: "psnr", task, value: mean_psnr, set_a: n, set_b: n, seed });
        rows.push(EvalRow { metric: "eval_loss", task, value: loss, set_a: loss_n, set_b: loss_n, seed });
    }
    Ok(rows)
}

pub fn lookup(rows: &[EvalRow], metric: &str, task: Task) -> Option<f64> {
    rows.iter()
        .find(|r| r.metric == metric && r.task == task)
        .map(|r| r.value)
}

/// Result of one training run inside an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub temporal: TemporalLayer,
    pub strategy: Strategy,
    pub seed: u64,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub toy_fvd: f64,
    pub smoothness: f64,
    pub seconds: f64,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub temporal: TemporalLayer,
    pub strategy: Strategy,
    pub runs: Vec<AblationRun>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationCell {
    fn median_of(&self, f: impl Fn(&AblationRun) -> f64) -> f64 {
        median(&self.runs.iter().map(f).collect::<Vec<_>>())
    }

    pub fn median_eval_loss(&self) -> f64 {
        self.median_of(|r| r.final_eval_loss)
    }

    pub fn median_fvd(&self) -> f64 {
        self.median_of(|r| r.toy_fvd)
    }

    pub fn median_smoothness(&self) -> f64 {
        self.median_of(|r| r.smoothness)
    }
}

pub const ABLATION_HEADER: &str = "temporal,strategy,seeds,final_eval_loss,toy_fvd,smoothness";

impl AblationCell {
    pub fn to_csv(&self) -> String {
        let seeds: Vec<String> = self.runs.iter().map(|r| r.seed.to_string()).collect();
        format!(
            "{},{},{},{:?},{:?},{:?}",
            self.temporal,
            self.strategy,
            seeds.join(" "),
            self.median_eval_loss(),
            self.median_fvd(),
            self.median_smoothness()
        )
    }
}

/// Trains and scores one `(temporal, strategy, seed)` configuration. The
/// reported eval loss and toy FVD are on the text-and-image generation task.
pub fn run_one(base: &RunConfig, temporal: TemporalLayer, strategy: Strategy, seed: u64) -> Result<AblationRun> {
    let start = Instant::now();
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.temporal = temporal;
    cfg.curriculum.strategy = strategy;
    cfg.validate()?;
    let (train, heldout) = make_splits(&cfg)?;
    let mut trainer = Trainer::new(&cfg)?;
    let initial_eval_loss = eval_loss(&trainer.params, &cfg, &heldout.clips, Task::Grt)?;
    trainer.run(&train.clips, cfg.train.steps, None)?;
    let final_eval_loss = eval_loss(&trainer.params, &cfg, &heldout.clips, Task::Grt)?;
    let spec = FeatureSpec::new(heldout.clips[0].frames.len(), cfg.eval.features, cfg.eval.seed)?;
    let generated = generate_eval_set(&trainer.params, &cfg, &heldout.clips, Task::Grt)?;
    let real: Vec<Tensor> = heldout.clips.iter().map(|c| c.frames.clone()).collect();
    let fvd = toy_fvd(&generated, &real, &spec)?;
    let losses = trainer.losses();
    let smooth = smoothness(&losses, cfg.eval.smoothness_window)?;
    Ok(AblationRun {
        temporal,
        strategy,
        seed,
        initial_eval_loss,
        final_eval_loss,
        toy_fvd: fvd,
        smoothness: smooth,
        seconds: start.elapsed().as_secs_f64(),
        losses,
    })
}

/// `{STI, conv3d} × {none, LCL, DCL}` over `seeds`, runs in parallel.
pub fn ablate(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationCell>> {
    let mut jobs = Vec::new();
    for temporal in [TemporalLayer::Sti, TemporalLayer::Conv3d] {
        for strategy in [Strategy::None, Strategy::Lcl, Strategy::Dcl] {
            for &seed in seeds {
                jobs.push((temporal, strategy, seed));
            }
        }
    }
    let runs: Vec<AblationRun> = jobs
        .par_iter()
        .map(|&(temporal, strategy, seed)| run_one(cfg, temporal, strategy, seed))
        .collect::<Result<_>>()?;
    let mut cells: Vec<AblationCell> = Vec::new();
    for run in runs {
        match cells
            .iter_mut()
            .find(|c| c.temporal == run.temporal && c.strategy == run.strategy)
        {
            Some(cell) => cell.runs.push(run),
            None => cells.push(AblationCell {
                temporal: run.temporal,
                strategy: run.strategy,
                runs: vec![run],
            }),
        }
    }
    Ok(cells)
}

/// Scheduler trace against a supplied loss sequence, or a synthetic decaying
/// noisy loss when `losses` is `None`.
pub fn curriculum_trace(cfg: &RunConfig, losses: Option<&[f64]>) -> Result<Vec<TraceRow>> {
    let mut state = CurriculumState::new(cfg.curriculum.clone())?;
    let steps = losses.map_or(cfg.train.steps, |l| l.len().min(cfg.train.steps));
    let mut noise = substream(cfg.seed, purpose::SYNTHETIC_LOSS, 0);
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let plan = state.plan(step, &mut substream(cfg.seed, purpose::CURRICULUM, step as u64))?;
        let loss = match losses {
            Some(l) => l[step],
            None => {
                let jitter: f64 = noise.sample(rand_distr::StandardNormal);
                0.2 + 0.8 * (-(step as f64) / 500.0).exp() + 0.05 * jitter
            }
        };
        let fb = state.observe(loss)?;
        rows.push(TraceRow::new(&plan, &fb));
    }
    Ok(rows)
}
