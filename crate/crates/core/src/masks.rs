//! Condition masks (which frames the model may see) and loss masks (which
//! frames are trained on), including k-means condensation of long clips.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::spritegen::SpriteClip;

/// Training task selected by the condition mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Interpolation: interior frames hidden.
    Ipt,
    /// Pre/post prediction: a prefix or suffix hidden.
    Pdt,
    /// Text-and-image generation: everything but frame 0 hidden.
    Grt,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Ipt, Task::Pdt, Task::Grt];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ipt => "IPT",
            Task::Pdt => "PDT",
            Task::Grt => "GRT",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IPT" => Ok(Task::Ipt),
            "PDT" => Ok(Task::Pdt),
            "GRT" => Ok(Task::Grt),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionMask {
    pub task: Task,
    pub keep: Vec<bool>,
    pub text_active: bool,
}

impl ConditionMask {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn all_keep(task: Task, frames: usize) -> Self {
        ConditionMask {
            task,
            keep: vec![true; frames],
            text_active: true,
        }
    }

    /// Builds a mask from an explicit keep pattern, checking it against the
    /// task's shape.
    pub fn from_keep(task: Task, keep: Vec<bool>) -> Result<Self> {
        let n = keep.len();
        if n < 3 {
            return Err(Error::invalid(format!("condition mask needs N >= 3, got {n}")));
        }
        let kept: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        let ok = match task {
            Task::Ipt => {
                let hidden: Vec<usize> = (0..n).filter(|&i| !keep[i]).collect();
                keep[0]
                    && keep[n - 1]
                    && !hidden.is_empty()
                    && hidden.windows(2).all(|w| w[1] == w[0] + 1)
            }
            Task::Pdt => {
                let prefix_hidden = !keep[0] && keep[n - 1];
                let suffix_hidden = keep[0] && !keep[n - 1];
                let contiguous = kept.windows(2).all(|w| w[1] == w[0] + 1);
                (prefix_hidden || suffix_hidden) && contiguous && !kept.is_empty()
            }
            Task::Grt => kept == [0],
        };
        if !ok {
            return Err(Error::invalid(format!(
                "keep pattern {} does not match task {task}",
                bits_to_string(&keep)
            )));
        }
        Ok(ConditionMask {
            task,
            keep,
            text_active: task == Task::Grt,
        })
    }

    pub fn to_bit_string(&self) -> String {
        bits_to_string(&self.keep)
    }
}

pub fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn bits_from_string(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::invalid(format!("bad bit `{c}` in `{s}`"))),
        })
        .collect()
}

/// Number of distinct masks the task admits for `frames` frames.
pub fn mask_choices(task: Task, frames: usize) -> usize {
    match task {
        // contiguous interior blocks [s, e] with 1 <= s <= e <= N-2
        Task::Ipt => (frames - 2) * (frames - 1) / 2,
        // prefixes and suffixes of length 1..N-1
        Task::Pdt => 2 * (frames - 1),
        Task::Grt => 1,
    }
}

/// The `choice`-th mask of the task, `choice < mask_choices(task, frames)`.
pub fn mask_from_choice(task: Task, frames: usize, choice: usize) -> Result<ConditionMask> {
    if frames < 3 {
        return Err(Error::invalid(format!("condition mask needs N >= 3, got {frames}")));
    }
    let count = mask_choices(task, frames);
    if choice >= count {
        return Err(Error::invalid(format!(
            "choice {choice} out of range for {task} with {frames} frames"
        )));
    }
    let mut keep = vec![true; frames];
    match task {
        Task::Ipt => {
            let mut c = choice;
            let mut start = 1;
            // blocks starting at `start` have lengths 1..=N-1-start
            while c >= frames - 1 - start {
                c -= frames - 1 - start;
                start += 1;
            }
            for k in keep.iter_mut().skip(start).take(c + 1) {
                *k = false;
            }
        }
        Task::Pdt => {
            let len = choice % (frames - 1) + 1;
            if choice < frames - 1 {
                keep[..len].iter_mut().for_each(|k| *k = false);
            } else {
                keep[frames - len..].iter_mut().for_each(|k| *k = false);
            }
        }
        Task::Grt => keep[1..].iter_mut().for_each(|k| *k = false),
    }
    Ok(ConditionMask {
        task,
        keep,
        text_active: task == Task::Grt,
    })
}

/// Draws a mask uniformly among the task's admissible patterns.
pub fn make_condition_mask<R: Rng + ?Sized>(task: Task, frames: usize, rng: &mut R) -> Result<ConditionMask> {
    if frames < 3 {
        return Err(Error::invalid(format!("condition mask needs N >= 3, got {frames}")));
    }
    let choice = rng.random_range(0..mask_choices(task, frames));
    mask_from_choice(task, frames, choice)
}

/// Per-frame loss weights in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask {
    pub active: Vec<bool>,
}

impl LossMask {
    pub fn all_ones(frames: usize) -> Self {
        LossMask {
            active: vec![true; frames],
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameClustering {
    pub k: usize,
    /// Cluster id of each frame.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// One frame per cluster, sorted by temporal index.
    pub representatives: Vec<usize>,
    pub wcss: f64,
    /// WCSS after every Lloyd iteration of the winning restart.
    pub wcss_trace: Vec<f64>,
    /// Whether the final assignment was a fixed point of the Lloyd map.
    pub converged: bool,
}

const LLOYD_MAX_ITERS: usize = 50;
const KMEANS_RESTARTS: usize = 32;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a candidate")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

fn means(points: &[&[f64]], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

fn wcss_of(points: &[&[f64]], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Moves frames into empty clusters: the frame farthest from its centroid,
/// taken from a cluster with more than one member (ties to lowest index).
fn fill_empty(points: &[&[f64]], assignment: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, &c) in assignment.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = sq_dist(points[i], &centroids[c]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= n leaves a multi-member cluster");
        assignment[i] = empty;
    }
}

struct LloydRun {
    assignment: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    wcss: f64,
    trace: Vec<f64>,
    converged: bool,
}

fn lloyd<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> Result<LloydRun> {
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..LLOYD_MAX_ITERS {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        fill_empty(points, &mut next, &centroids, k);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        centroids = means(points, &assignment, k);
        let w = wcss_of(points, &assignment, &centroids);
        if let Some(&prev) = trace.last() {
            if w > prev + 1e-12 * prev.max(1.0) {
                return Err(Error::invalid(format!(
                    "k-means WCSS increased from {prev} to {w}"
                )));
            }
        }
        trace.push(w);
    }
    let wcss = *trace.last().expect("at least one iteration");
    Ok(LloydRun {
        assignment,
        centroids,
        wcss,
        trace,
        converged,
    })
}

/// k-means over flattened frame pixels: k-means++ seeding, Lloyd iterations
/// to a fixed point (at most 50), best of several restarts.
pub fn cluster_frames<R: Rng + ?Sized>(clip: &SpriteClip, k: usize, rng: &mut R) -> Result<FrameClustering> {
    let n = clip.frame_count();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot form {k} clusters from {n} frames"
        )));
    }
    let points: Vec<&[f64]> = (0..n).map(|i| clip.frame(i)).collect();
    let mut best: Option<LloydRun> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(&points, k, rng)?;
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");
    let mut representatives = Vec::with_capacity(k);
    for c in 0..k {
        let mut pick: Option<(usize, f64)> = None;
        for (i, &a) in run.assignment.iter().enumerate() {
            if a != c {
                continue;
            }
            let d = sq_dist(points[i], &run.centroids[c]);
            if pick.is_none_or(|(_, pd)| d < pd) {
                pick = Some((i, d));
            }
        }
        representatives.push(pick.expect("clusters are non-empty").0);
    }
    representatives.sort_unstable();
    Ok(FrameClustering {
        k,
        assignment: run.assignment,
        centroids: run.centroids,
        representatives,
        wcss: run.wcss,
        wcss_trace: run.trace,
        converged: run.converged,
    })
}

/// Keeps one representative frame per cluster, in temporal order.
pub fn condense_clip(clip: &SpriteClip, clustering: &FrameClustering) -> Result<(SpriteClip, LossMask)> {
    let n = clip.frame_count();
    let consistent = clustering.assignment.len() == n
        && clustering.representatives.len() == clustering.k
        && clustering.representatives.iter().all(|&r| r < n)
        && clustering
            .centroids
            .iter()
            .all(|c| c.len() == clip.frame_len());
    if !consistent {
        return Err(Error::invalid(format!(
            "clustering of {} frames does not match a clip of {n} frames",
            clustering.assignment.len()
        )));
    }
    let condensed = clip.select_frames(&clustering.representatives);
    Ok((condensed, LossMask::all_ones(clustering.k)))
}

/// Condenses `clip` to `k` frames when it is longer; shorter clips pass through
/// with an all-ones loss mask.
pub fn condense_to<R: Rng + ?Sized>(clip: &SpriteClip, k: usize, rng: &mut R) -> Result<(SpriteClip, LossMask)> {
    if clip.frame_count() <= k {
        return Ok((clip.clone(), LossMask::all_ones(clip.frame_count())));
    }
    let clustering = cluster_frames(clip, k, rng)?;
    condense_clip(clip, &clustering)
}

/// A clip split into what the model sees and what it must produce.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedClip {
    /// Copy of the frames with hidden frames zeroed, `[F, H, W, C]`.
    pub guidance: Tensor,
    /// 1 at kept frames, 0 at hidden ones, `[F, H, W, 1]`.
    pub keep_plane: Tensor,
    pub target: Tensor,
}

pub fn apply_masks(clip: &SpriteClip, mask: &ConditionMask) -> Result<MaskedClip> {
    let n = clip.frame_count();
    if mask.len() != n {
        return Err(Error::shape(
            "apply_masks",
            format!("mask of {} frames for a clip of {n}", mask.len()),
        ));
    }
    let per_frame = clip.frame_len();
    let shape = clip.frames.shape();
    let pixels = shape[1] * shape[2];
    let mut guidance = clip.frames.clone();
    let mut plane = Vec::with_capacity(n * pixels);
    for (f, &keep) in mask.keep.iter().enumerate() {
        if !keep {
            guidance.data_mut()[f * per_frame..(f + 1) * per_frame].fill(0.0);
        }
        plane.extend(std::iter::repeat_n(if keep { 1.0 } else { 0.0 }, pixels));
    }
    Ok(MaskedClip {
        guidance,
        keep_plane: Tensor::from_parts(vec![n, shape[1], shape[2], 1], plane),
        target: clip.frames.clone(),
    })
}
