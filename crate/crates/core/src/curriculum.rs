//! Difficulty-scheduled sampling of `(task, frame count)` pairs.
//!
//! The sample-difficulty target is the blend
//! `H_t = λ·H̄_t + (1-λ)·H̃_t` of a static schedule `H̄_t` (the expected
//! intrinsic entropy under a time-indexed grid over `(T, N)`) and an adaptive
//! term `H̃_t = H̄_t + Δ·tanh(P̃*)` driven by a PID controller on the loss
//! deviation. The realized target never decreases; samples are drawn from an
//! exponential tilt of the static grid whose mean entropy matches it.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::Task;

/// Intrinsic entropies `H^T` per task and `H^N` per frame count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicEntropy {
    pub task: [f64; 3],
    pub min_frames: usize,
    /// `H^N` for `N = min_frames, min_frames + 1, ...`.
    pub frames: Vec<f64>,
}

impl IntrinsicEntropy {
    /// `H^T = task`, `H^N = ln N`.
    pub fn with_log_frames(task: [f64; 3], min_frames: usize, max_frames: usize) -> Self {
        IntrinsicEntropy {
            task,
            min_frames,
            frames: (min_frames..=max_frames).map(|n| (n as f64).ln()).collect(),
        }
    }

    pub fn max_frames(&self) -> usize {
        self.min_frames + self.frames.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.task) || self.task.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config {
                key: "curriculum.h_task".into(),
                reason: format!("need H_IPT < H_PDT < H_GRT, got {:?}", self.task),
            });
        }
        if self.frames.is_empty() || !increasing(&self.frames) {
            return Err(Error::Config {
                key: "curriculum.h_frames".into(),
                reason: "frame entropies must be strictly increasing".into(),
            });
        }
        Ok(())
    }

    /// `H^T + H^N`.
    pub fn cell(&self, task: Task, frames: usize) -> f64 {
        self.task[task.index()] + self.frames[frames - self.min_frames]
    }

    pub fn range(&self) -> (f64, f64) {
        (
            self.task[0] + self.frames[0],
            self.task[2] + self.frames[self.frames.len() - 1],
        )
    }
}

/// Probability over `(T, N)` cells; row-major by task.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticGrid {
    pub min_frames: usize,
    pub max_frames: usize,
    pub cells: Vec<f64>,
}

impl StaticGrid {
    pub fn width(&self) -> usize {
        self.max_frames - self.min_frames + 1
    }

    pub fn index(&self, task: Task, frames: usize) -> usize {
        task.index() * self.width() + frames - self.min_frames
    }

    pub fn cell_of(&self, index: usize) -> (Task, usize) {
        (
            Task::ALL[index / self.width()],
            self.min_frames + index % self.width(),
        )
    }

    pub fn prob(&self, task: Task, frames: usize) -> f64 {
        self.cells[self.index(task, frames)]
    }

    pub fn task_marginal(&self) -> [f64; 3] {
        let w = self.width();
        let mut out = [0.0; 3];
        for (t, o) in out.iter_mut().enumerate() {
            *o = self.cells[t * w..(t + 1) * w].iter().sum();
        }
        out
    }

    pub fn frame_marginal(&self) -> Vec<f64> {
        let w = self.width();
        (0..w)
            .map(|n| (0..3).map(|t| self.cells[t * w + n]).sum())
            .collect()
    }

    /// `E[N | T]`.
    pub fn mean_frames_given(&self, task: Task) -> f64 {
        let w = self.width();
        let row = &self.cells[task.index() * w..(task.index() + 1) * w];
        let mass: f64 = row.iter().sum();
        row.iter()
            .enumerate()
            .map(|(i, p)| (self.min_frames + i) as f64 * p)
            .sum::<f64>()
            / mass
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != 3 * self.width() {
            return Err(Error::invalid("grid cell count does not match its frame range"));
        }
        if self.cells.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("grid has a negative or non-finite cell"));
        }
        let total: f64 = self.cells.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("grid sums to {total}, not 1")));
        }
        Ok(())
    }

    pub fn uniform(min_frames: usize, max_frames: usize) -> Self {
        let n = 3 * (max_frames - min_frames + 1);
        StaticGrid {
            min_frames,
            max_frames,
            cells: vec![1.0 / n as f64; n],
        }
    }

    fn product(min_frames: usize, task: [f64; 3], frames_given_task: &[f64]) -> Self {
        let cells = task
            .iter()
            .flat_map(|&pt| frames_given_task.iter().map(move |&pn| pt * pn))
            .collect();
        StaticGrid {
            min_frames,
            max_frames: min_frames + frames_given_task.len() - 1,
            cells,
        }
    }
}

/// Shape of the static schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleShape {
    pub task_start: [f64; 3],
    pub task_end: [f64; 3],
    /// Geometric ratio of `P(N+1|T) / P(N|T)` at the start and end.
    pub ratio_start: f64,
    pub ratio_end: f64,
}

impl Default for ScheduleShape {
    fn default() -> Self {
        ScheduleShape {
            task_start: [0.7, 0.2, 0.1],
            task_end: [0.1, 0.3, 0.6],
            ratio_start: 0.5,
            ratio_end: 2.0,
        }
    }
}

fn check_step(t: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 || t > total_steps {
        return Err(Error::invalid(format!(
            "step {t} outside schedule of {total_steps} steps"
        )));
    }
    Ok(t as f64 / total_steps as f64)
}

fn lerp3(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [
        (1.0 - s) * a[0] + s * b[0],
        (1.0 - s) * a[1] + s * b[1],
        (1.0 - s) * a[2] + s * b[2],
    ]
}

fn truncated_geometric(len: usize, ratio: f64) -> Vec<f64> {
    let weights: Vec<f64> = (0..len).map(|i| ratio.powi(i as i32)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Static grid at step `t`: task marginal interpolated linearly, frame
/// conditional a truncated geometric whose ratio moves log-linearly.
pub fn static_grid(
    t: usize,
    total_steps: usize,
    min_frames: usize,
    max_frames: usize,
    shape: &ScheduleShape,
) -> Result<StaticGrid> {
    let s = check_step(t, total_steps)?;
    let task = lerp3(shape.task_start, shape.task_end, s);
    let ratio = (shape.ratio_start.ln() * (1.0 - s) + shape.ratio_end.ln() * s).exp();
    let frames = truncated_geometric(max_frames - min_frames + 1, ratio);
    Ok(StaticGrid::product(min_frames, task, &frames))
}

/// Linear task schedule with a uniform frame marginal.
pub fn lcl_grid(
    t: usize,
    total_steps: usize,
    min_frames: usize,
    max_frames: usize,
    shape: &ScheduleShape,
) -> Result<StaticGrid> {
    let s = check_step(t, total_steps)?;
    let task = lerp3(shape.task_start, shape.task_end, s);
    let w = max_frames - min_frames + 1;
    Ok(StaticGrid::product(min_frames, task, &vec![1.0 / w as f64; w]))
}

/// `Σ P̄(T,N)·(H^T + H^N)`.
pub fn static_entropy(grid: &StaticGrid, intrinsic: &IntrinsicEntropy) -> f64 {
    grid.cells
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (task, n) = grid.cell_of(i);
            p * intrinsic.cell(task, n)
        })
        .sum()
}

/// Running mean of past losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub count: u64,
    pub mean: f64,
}

impl LossHistory {
    /// `L_s(t) = L_c(t) - mean(L_c(1..t-1))`, zero on the first step; then
    /// records `L_c(t)`.
    pub fn deviation(&mut self, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "loss deviation input".into(),
                index: self.count as usize,
            });
        }
        let dev = if self.count == 0 {
            0.0
        } else {
            loss - self.mean
        };
        self.count += 1;
        // incremental form keeps a constant stream's mean exact
        self.mean += (loss - self.mean) / self.count as f64;
        Ok(dev)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral: f64,
    /// `None` until the first update, whose derivative term is zero.
    pub prev_error: Option<f64>,
    pub bound: f64,
}

impl PidState {
    pub fn new(kp: f64, ki: f64, kd: f64, bound: f64) -> Result<Self> {
        if [kp, ki, kd].iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::Config {
                key: "curriculum.kp/ki/kd".into(),
                reason: format!("gains must be finite and non-negative, got ({kp}, {ki}, {kd})"),
            });
        }
        if !(bound >= 0.0) {
            return Err(Error::invalid(format!("anti-windup bound {bound} is negative")));
        }
        Ok(PidState {
            kp,
            ki,
            kd,
            integral: 0.0,
            prev_error: None,
            bound,
        })
    }

    /// One discrete PID step on error `e = -L_s`: a harder-than-average batch
    /// pushes the score down.
    pub fn update(&mut self, loss_deviation: f64) -> Result<f64> {
        if !loss_deviation.is_finite() {
            return Err(Error::NonFinite {
                context: "pid input".into(),
                index: 0,
            });
        }
        let error = -loss_deviation;
        self.integral = (self.integral + error).clamp(-self.bound, self.bound);
        let derivative = error - self.prev_error.unwrap_or(error);
        self.prev_error = Some(error);
        Ok(self.kp * error + self.ki * self.integral + self.kd * derivative)
    }
}

/// `H̃ = H̄ + Δ·tanh(P̃*)`.
pub fn adaptive_entropy(static_entropy: f64, delta: f64, score: f64) -> f64 {
    static_entropy + delta * score.tanh()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Uniform over `(T, N)` for the whole run.
    None,
    /// Linear task schedule, uniform frames.
    Lcl,
    /// Static grid plus PID-adapted entropy target.
    Dcl,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Lcl => "lcl",
            Strategy::Dcl => "dcl",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Strategy::None),
            "lcl" => Ok(Strategy::Lcl),
            "dcl" => Ok(Strategy::Dcl),
            other => Err(Error::invalid(format!("unknown curriculum strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub strategy: Strategy,
    pub min_frames: usize,
    pub max_frames: usize,
    pub total_steps: usize,
    pub lambda: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Half-width of the adaptive term; `None` means `0.2·(H_max - H_min)`.
    pub delta: Option<f64>,
    pub task_entropy: [f64; 3],
    pub shape: ScheduleShape,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            strategy: Strategy::Dcl,
            min_frames: 3,
            max_frames: 12,
            total_steps: 2000,
            lambda: 0.7,
            kp: 2.0,
            ki: 0.05,
            kd: 0.5,
            delta: None,
            task_entropy: [1.0, 2.0, 3.0],
            shape: ScheduleShape::default(),
        }
    }
}

impl CurriculumConfig {
    pub fn intrinsic(&self) -> IntrinsicEntropy {
        IntrinsicEntropy::with_log_frames(self.task_entropy, self.min_frames, self.max_frames)
    }

    pub fn resolved_delta(&self) -> f64 {
        self.delta.unwrap_or_else(|| {
            let (lo, hi) = self.intrinsic().range();
            0.2 * (hi - lo)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        if !(self.lambda > 0.0 && self.lambda < 1.0) && self.lambda != 1.0 {
            return Err(bad("curriculum.lambda", format!("{} not in (0, 1)", self.lambda)));
        }
        if self.min_frames < 3 || self.min_frames > self.max_frames {
            return Err(bad(
                "curriculum frame range",
                format!("[{}, {}] invalid", self.min_frames, self.max_frames),
            ));
        }
        if self.total_steps == 0 {
            return Err(bad("train.steps", "must be positive".into()));
        }
        if let Some(d) = self.delta {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(bad("curriculum.delta", format!("{d} must be finite and >= 0")));
            }
        }
        self.intrinsic().validate()?;
        PidState::new(self.kp, self.ki, self.kd, 0.0)?;
        Ok(())
    }
}

/// Mutable scheduler state; owned by a single training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub config: CurriculumConfig,
    pub intrinsic: IntrinsicEntropy,
    pub delta: f64,
    pub pid: PidState,
    pub losses: LossHistory,
    /// Most recent PID output, used for the next step's target.
    pub score: f64,
    /// Realized (monotone) target per planned step.
    pub realized: Vec<f64>,
}

/// What the scheduler chose for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub step: usize,
    pub grid: StaticGrid,
    pub sampling: Vec<f64>,
    pub static_entropy: f64,
    pub score: f64,
    pub adaptive_entropy: f64,
    pub raw_target: f64,
    pub realized_target: f64,
    pub task: Task,
    pub frames: usize,
}

/// Result of feeding one batch loss back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feedback {
    pub loss: f64,
    pub deviation: f64,
    pub score: f64,
}

impl CurriculumState {
    pub fn new(config: CurriculumConfig) -> Result<Self> {
        config.validate()?;
        let intrinsic = config.intrinsic();
        let delta = config.resolved_delta();
        let bound = 10.0 * delta / config.ki.max(1.0);
        let pid = PidState::new(config.kp, config.ki, config.kd, bound)?;
        Ok(CurriculumState {
            config,
            intrinsic,
            delta,
            pid,
            losses: LossHistory::default(),
            score: 0.0,
            realized: Vec::new(),
        })
    }

    pub fn grid_at(&self, step: usize) -> Result<StaticGrid> {
        let c = &self.config;
        let t = step.min(c.total_steps);
        match c.strategy {
            Strategy::None => Ok(StaticGrid::uniform(c.min_frames, c.max_frames)),
            Strategy::Lcl => lcl_grid(t, c.total_steps, c.min_frames, c.max_frames, &c.shape),
            Strategy::Dcl => static_grid(t, c.total_steps, c.min_frames, c.max_frames, &c.shape),
        }
    }

    /// Entropy bookkeeping for `step` without drawing a sample.
    pub fn targets(&mut self, step: usize) -> Result<(StaticGrid, [f64; 4])> {
        let grid = self.grid_at(step)?;
        let hbar = static_entropy(&grid, &self.intrinsic);
        let htilde = adaptive_entropy(hbar, self.delta, self.score);
        let lambda = self.config.lambda;
        let raw = hbar + (1.0 - lambda) * (htilde - hbar);
        let realized = match self.realized.last() {
            Some(&prev) if prev > raw => prev,
            _ => raw,
        };
        self.realized.push(realized);
        Ok((grid, [hbar, htilde, raw, realized]))
    }

    /// Chooses `(T, N)` for `step`.
    pub fn plan<R: Rng + ?Sized>(&mut self, step: usize, rng: &mut R) -> Result<Plan> {
        let score = self.score;
        let (grid, [hbar, htilde, raw, realized]) = self.targets(step)?;
        let sampling = match self.config.strategy {
            Strategy::Dcl => tilted_distribution(&grid, &self.intrinsic, realized)?.probs,
            Strategy::None | Strategy::Lcl => grid.cells.clone(),
        };
        let (task, frames) = draw_cell(&grid, &sampling, rng)?;
        Ok(Plan {
            step,
            grid,
            sampling,
            static_entropy: hbar,
            score,
            adaptive_entropy: htilde,
            raw_target: raw,
            realized_target: realized,
            task,
            frames,
        })
    }

    /// Records the batch loss; updates the PID score for the next plan.
    pub fn observe(&mut self, loss: f64) -> Result<Feedback> {
        let deviation = self.losses.deviation(loss)?;
        let score = self.pid.update(deviation)?;
        self.score = score;
        Ok(Feedback {
            loss,
            deviation,
            score,
        })
    }
}

/// Exponential tilt `Q ∝ P̄·exp(β·h)` of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Tilt {
    pub beta: f64,
    pub probs: Vec<f64>,
    /// Target after clamping to the achievable range.
    pub target: f64,
    pub expected: f64,
    /// `[E_Q(β=-50), E_Q(β=50)]`.
    pub achievable: (f64, f64),
}

pub const TILT_BRACKET: f64 = 50.0;
pub const TILT_TOLERANCE: f64 = 1e-3;

fn tilt_at(grid: &StaticGrid, h: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let logits: Vec<f64> = grid
        .cells
        .iter()
        .zip(h)
        .map(|(&p, &hv)| if p > 0.0 { p.ln() + beta * hv } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.into_iter().map(|w| w / total).collect();
    let mean = probs.iter().zip(h).map(|(p, hv)| p * hv).sum();
    (probs, mean)
}

/// Solves for the tilt whose expected intrinsic entropy matches `target`
/// (clamped to what the bracket can reach) within [`TILT_TOLERANCE`].
pub fn tilted_distribution(grid: &StaticGrid, intrinsic: &IntrinsicEntropy, target: f64) -> Result<Tilt> {
    grid.validate()?;
    if !target.is_finite() {
        return Err(Error::NonFinite {
            context: "entropy target".into(),
            index: 0,
        });
    }
    let h: Vec<f64> = (0..grid.cells.len())
        .map(|i| {
            let (t, n) = grid.cell_of(i);
            intrinsic.cell(t, n)
        })
        .collect();
    let base_mean: f64 = grid.cells.iter().zip(&h).map(|(p, hv)| p * hv).sum();
    let (_, lo_mean) = tilt_at(grid, &h, -TILT_BRACKET);
    let (_, hi_mean) = tilt_at(grid, &h, TILT_BRACKET);
    let clamped = target.clamp(lo_mean, hi_mean);
    if (base_mean - clamped).abs() <= TILT_TOLERANCE {
        return Ok(Tilt {
            beta: 0.0,
            probs: grid.cells.clone(),
            target: clamped,
            expected: base_mean,
            achievable: (lo_mean, hi_mean),
        });
    }
    if !(lo_mean - TILT_TOLERANCE <= clamped && clamped <= hi_mean + TILT_TOLERANCE) {
        return Err(Error::invalid(format!(
            "tilt bracket [{lo_mean}, {hi_mean}] does not contain {clamped}"
        )));
    }
    let (mut lo, mut hi) = (-TILT_BRACKET, TILT_BRACKET);
    let mut best = tilt_at(grid, &h, hi);
    let mut beta = hi;
    for _ in 0..200 {
        beta = 0.5 * (lo + hi);
        best = tilt_at(grid, &h, beta);
        let gap = best.1 - clamped;
        if gap.abs() <= TILT_TOLERANCE {
            break;
        }
        if gap < 0.0 {
            lo = beta;
        } else {
            hi = beta;
        }
    }
    // endpoints: the bracket edge itself may be the only point within tolerance
    for edge in [-TILT_BRACKET, TILT_BRACKET] {
        if (best.1 - clamped).abs() > TILT_TOLERANCE {
            let cand = tilt_at(grid, &h, edge);
            if (cand.1 - clamped).abs() < (best.1 - clamped).abs() {
                best = cand;
                beta = edge;
            }
        }
    }
    Ok(Tilt {
        beta,
        probs: best.0,
        target: clamped,
        expected: best.1,
        achievable: (lo_mean, hi_mean),
    })
}

/// Draws a cell index from `probs` and maps it to `(T, N)`.
pub fn draw_cell<R: Rng + ?Sized>(grid: &StaticGrid, probs: &[f64], rng: &mut R) -> Result<(Task, usize)> {
    let dist = WeightedIndex::new(probs)
        .map_err(|e| Error::invalid(format!("sampling distribution: {e}")))?;
    Ok(grid.cell_of(rng.sample(dist)))
}

/// Samples `(T, N)` from the grid tilted toward entropy `target`.
pub fn sample_task<R: Rng + ?Sized>(
    grid: &StaticGrid,
    intrinsic: &IntrinsicEntropy,
    target: f64,
    rng: &mut R,
) -> Result<(Task, usize)> {
    let tilt = tilted_distribution(grid, intrinsic, target)?;
    draw_cell(grid, &tilt.probs, rng)
}

/// One row of the curriculum trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub deviation: f64,
    pub score: f64,
    pub static_entropy: f64,
    pub adaptive_entropy: f64,
    pub raw_target: f64,
    pub realized_target: f64,
    pub task: Task,
    pub frames: usize,
}

impl TraceRow {
    pub const HEADER: &'static str =
        "step,L_c,L_s,P_star,H_static,H_adaptive,H_raw,H_realized,task,frames";

    pub fn new(plan: &Plan, feedback: &Feedback) -> Self {
        TraceRow {
            step: plan.step,
            loss: feedback.loss,
            deviation: feedback.deviation,
            score: plan.score,
            static_entropy: plan.static_entropy,
            adaptive_entropy: plan.adaptive_entropy,
            raw_target: plan.raw_target,
            realized_target: plan.realized_target,
            task: plan.task,
            frames: plan.frames,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
            self.step,
            self.loss,
            self.deviation,
            self.score,
            self.static_entropy,
            self.adaptive_entropy,
            self.raw_target,
            self.realized_target,
            self.task,
            self.frames
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(t: usize) -> StaticGrid {
        static_grid(t, 2000, 3, 12, &ScheduleShape::default()).unwrap()
    }

    #[test]
    fn grid_endpoints() {
        let g0 = grid(0);
        let m = g0.task_marginal();
        assert!((m[0] - 0.7).abs() < 1e-12 && (m[2] - 0.1).abs() < 1e-12);
        for t in Task::ALL {
            let best = (3..=12)
                .max_by(|&a, &b| g0.prob(t, a).partial_cmp(&g0.prob(t, b)).unwrap())
                .unwrap();
            assert_eq!(best, 3);
        }
        let g1 = grid(2000);
        assert!((g1.task_marginal()[2] - 0.6).abs() < 1e-12);
        for t in Task::ALL {
            let best = (3..=12)
                .max_by(|&a, &b| g1.prob(t, a).partial_cmp(&g1.prob(t, b)).unwrap())
                .unwrap();
            assert_eq!(best, 12);
        }
    }

    #[test]
    fn grids_sum_to_one() {
        for t in (0..=2000).step_by(37) {
            grid(t).validate().unwrap();
            lcl_grid(t, 2000, 3, 12, &ScheduleShape::default())
                .unwrap()
                .validate()
                .unwrap();
        }
        assert!(static_grid(2001, 2000, 3, 12, &ScheduleShape::default()).is_err());
    }

    #[test]
    fn static_entropy_degenerate_cases() {
        let intrinsic = IntrinsicEntropy::with_log_frames([1.0, 2.0, 3.0], 3, 12);
        let mut point = StaticGrid::uniform(3, 12);
        point.cells.iter_mut().for_each(|c| *c = 0.0);
        point.cells[0] = 1.0;
        assert_eq!(static_entropy(&point, &intrinsic), 1.0 + 3f64.ln());

        let uniform = StaticGrid::uniform(3, 12);
        let mut total = 0.0;
        for t in Task::ALL {
            for n in 3..=12 {
                total += intrinsic.cell(t, n);
            }
        }
        let mean = total / 30.0;
        assert!((static_entropy(&uniform, &intrinsic) - mean).abs() < 1e-12);
    }

    #[test]
    fn lcl_shares_task_endpoints_and_has_uniform_frames() {
        let shape = ScheduleShape::default();
        let l0 = lcl_grid(0, 100, 3, 12, &shape).unwrap();
        for (a, b) in l0.task_marginal().iter().zip(grid(0).task_marginal()) {
            assert!((a - b).abs() < 1e-12);
        }
        for t in (0..=100).step_by(10) {
            let g = lcl_grid(t, 100, 3, 12, &shape).unwrap();
            for p in g.frame_marginal() {
                assert!((p - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_deviation_examples() {
        let mut h = LossHistory::default();
        assert_eq!(h.deviation(0.7).unwrap(), 0.0);
        for _ in 0..5 {
            assert_eq!(h.deviation(0.7).unwrap(), 0.0);
        }
        let mut h = LossHistory { count: 4, mean: 1.0 };
        assert_eq!(h.deviation(1.5).unwrap(), 0.5);
        assert!(h.deviation(f64::NAN).is_err());
    }

    #[test]
    fn pid_zero_gains_is_zero() {
        let mut pid = PidState::new(0.0, 0.0, 0.0, 10.0).unwrap();
        for x in [0.3, -1.0, 5.0, 0.0] {
            assert_eq!(pid.update(x).unwrap(), 0.0);
        }
    }

    #[test]
    fn pid_derivative_impulse() {
        let kd = 0.8;
        let c = 0.25;
        let mut pid = PidState::new(0.0, 0.0, kd, 10.0).unwrap();
        assert_eq!(pid.update(0.0).unwrap(), 0.0);
        assert_eq!(pid.update(c).unwrap(), -kd * c);
        assert_eq!(pid.update(0.0).unwrap(), kd * c);
        assert_eq!(pid.update(0.0).unwrap(), 0.0);
    }

    #[test]
    fn pid_rejects_negative_gains() {
        assert!(PidState::new(-1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn adaptive_entropy_is_bounded_and_increasing() {
        assert_eq!(adaptive_entropy(2.0, 0.3, 0.0), 2.0);
        assert!((adaptive_entropy(2.0, 0.3, 1e3) - 2.3).abs() < 1e-12);
        assert!(adaptive_entropy(2.0, 0.3, -0.1) < adaptive_entropy(2.0, 0.3, 0.1));
    }

    #[test]
    fn zero_tilt_returns_grid_itself() {
        let g = grid(500);
        let intrinsic = IntrinsicEntropy::with_log_frames([1.0, 2.0, 3.0], 3, 12);
        let target = static_entropy(&g, &intrinsic);
        let tilt = tilted_distribution(&g, &intrinsic, target).unwrap();
        assert_eq!(tilt.beta, 0.0);
        assert_eq!(tilt.probs, g.cells);
    }

    #[test]
    fn tilt_hits_interior_targets() {
        let g = grid(700);
        let intrinsic = IntrinsicEntropy::with_log_frames([1.0, 2.0, 3.0], 3, 12);
        let base = static_entropy(&g, &intrinsic);
        for delta in [-0.8, -0.2, 0.05, 0.4, 1.1] {
            let tilt = tilted_distribution(&g, &intrinsic, base + delta).unwrap();
            assert!((tilt.expected - (base + delta)).abs() <= TILT_TOLERANCE);
            assert!((tilt.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("DCL".parse::<Strategy>().unwrap(), Strategy::Dcl);
        assert!("fancy".parse::<Strategy>().is_err());
    }

    #[test]
    fn plan_and_observe_run() {
        let mut state = CurriculumState::new(CurriculumConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for step in 0..50 {
            let plan = state.plan(step, &mut rng).unwrap();
            assert!((3..=12).contains(&plan.frames));
            let fb = state.observe(1.0 / (1.0 + step as f64)).unwrap();
            let row = TraceRow::new(&plan, &fb);
            assert_eq!(row.to_csv().split(',').count(), 10);
        }
        assert_eq!(state.realized.len(), 50);
    }
}
