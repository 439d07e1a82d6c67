//! Procedural animated-sprite clips with captions and a long-tailed
//! frame-count distribution, plus the on-disk dataset format.
//!
//! Frames are stored as 8-bit binary anymaps (`P6` for three channels, `P5`
//! for one), one file per frame. Pixel values are always multiples of
//! `1/255`, so the write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Motion {
    Translate,
    Bounce,
    Blink,
    Grow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Bar];
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    /// 8-bit RGB levels.
    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 240],
            Color::Yellow => [240, 220, 30],
        }
    }

    /// 8-bit grey level; distinct per color.
    fn grey(self) -> u8 {
        match self {
            Color::Red => 255,
            Color::Green => 200,
            Color::Blue => 145,
            Color::Yellow => 90,
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Translate, Motion::Bounce, Motion::Blink, Motion::Grow];
}

/// Generative factors of one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Factors {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
}

impl Factors {
    pub fn ids(&self) -> (usize, usize, usize) {
        (
            Shape::ALL.iter().position(|&s| s == self.shape).unwrap(),
            Color::ALL.iter().position(|&c| c == self.color).unwrap(),
            Motion::ALL.iter().position(|&m| m == self.motion).unwrap(),
        )
    }

    pub fn from_ids(shape: usize, color: usize, motion: usize) -> Result<Self> {
        Ok(Factors {
            shape: *Shape::ALL
                .get(shape)
                .ok_or_else(|| Error::invalid(format!("unknown shape id {shape}")))?,
            color: *Color::ALL
                .get(color)
                .ok_or_else(|| Error::invalid(format!("unknown color id {color}")))?,
            motion: *Motion::ALL
                .get(motion)
                .ok_or_else(|| Error::invalid(format!("unknown motion id {motion}")))?,
        })
    }
}

impl fmt::Display for Factors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (s, c, m) = self.ids();
        write!(f, "{s},{c},{m}")
    }
}

/// Caption vocabulary. Ids are stable; the table has [`VOCAB_SIZE`] rows.
pub mod vocab {
    pub const VOCAB_SIZE: usize = 64;
    pub const PAD: usize = 0;
    /// Replacement symbol used by text augmentation.
    pub const HASH: usize = 1;
    pub const COLOR_BASE: usize = 2;
    pub const SHAPE_BASE: usize = 6;
    pub const MOTION_BASE: usize = 9;

    pub const RED: usize = COLOR_BASE;
    pub const GREEN: usize = COLOR_BASE + 1;
    pub const BLUE: usize = COLOR_BASE + 2;
    pub const YELLOW: usize = COLOR_BASE + 3;
    pub const CIRCLE: usize = SHAPE_BASE;
    pub const SQUARE: usize = SHAPE_BASE + 1;
    pub const BAR: usize = SHAPE_BASE + 2;
    pub const TRANSLATE: usize = MOTION_BASE;
    pub const BOUNCE: usize = MOTION_BASE + 1;
    pub const BLINK: usize = MOTION_BASE + 2;
    pub const GROW: usize = MOTION_BASE + 3;

    const WORDS: [&str; 13] = [
        "<pad>", "#", "RED", "GREEN", "BLUE", "YELLOW", "CIRCLE", "SQUARE", "BAR", "TRANSLATE",
        "BOUNCE", "BLINK", "GROW",
    ];

    pub fn word(id: usize) -> Option<&'static str> {
        WORDS.get(id).copied()
    }

    pub fn id(word: &str) -> Option<usize> {
        let upper = word.trim().to_ascii_uppercase();
        WORDS.iter().position(|w| *w == upper)
    }
}

/// Caption token ids in fixed order: color, shape, motion.
pub fn caption_of(factors: &Factors) -> Vec<usize> {
    let (s, c, m) = factors.ids();
    vec![vocab::COLOR_BASE + c, vocab::SHAPE_BASE + s, vocab::MOTION_BASE + m]
}

/// Inverse of [`caption_of`].
pub fn factors_of_caption(tokens: &[usize]) -> Result<Factors> {
    match *tokens {
        [c, s, m]
            if (vocab::COLOR_BASE..vocab::SHAPE_BASE).contains(&c)
                && (vocab::SHAPE_BASE..vocab::MOTION_BASE).contains(&s)
                && (vocab::MOTION_BASE..vocab::MOTION_BASE + Motion::ALL.len()).contains(&m) =>
        {
            Factors::from_ids(
                s - vocab::SHAPE_BASE,
                c - vocab::COLOR_BASE,
                m - vocab::MOTION_BASE,
            )
        }
        _ => Err(Error::invalid(format!(
            "caption {tokens:?} is not a [color, shape, motion] triple"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Exponent `s` of the truncated power law `P(N) ∝ N^-s`.
    pub tail_exponent: f64,
    pub sprite_size: usize,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        SpriteConfig {
            height: 8,
            width: 8,
            channels: 1,
            min_frames: 3,
            max_frames: 12,
            tail_exponent: 2.0,
            sprite_size: 3,
        }
    }
}

impl SpriteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        if ![8, 16].contains(&self.height) {
            return Err(bad("data.height", format!("{} not in {{8, 16}}", self.height)));
        }
        if ![8, 16].contains(&self.width) {
            return Err(bad("data.width", format!("{} not in {{8, 16}}", self.width)));
        }
        if ![1, 3].contains(&self.channels) {
            return Err(bad("data.channels", format!("{} not in {{1, 3}}", self.channels)));
        }
        if self.min_frames < 3 || self.max_frames > 24 || self.min_frames > self.max_frames {
            return Err(bad(
                "data.min_frames",
                format!(
                    "frame range [{}, {}] must be non-empty within [3, 24]",
                    self.min_frames, self.max_frames
                ),
            ));
        }
        if !self.tail_exponent.is_finite() || self.tail_exponent < 0.0 {
            return Err(bad(
                "data.tail_exponent",
                format!("{} must be finite and non-negative", self.tail_exponent),
            ));
        }
        if self.sprite_size == 0 || self.sprite_size > self.height.min(self.width) {
            return Err(bad(
                "data.sprite_size",
                format!("{} does not fit a {}x{} frame", self.sprite_size, self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Normalized truncated power-law probabilities for `min_frames..=max_frames`.
    pub fn frame_law(&self) -> Vec<f64> {
        let weights: Vec<f64> = (self.min_frames..=self.max_frames)
            .map(|n| (n as f64).powf(-self.tail_exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }

    pub fn draw_frame_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.min_frames == self.max_frames {
            return self.min_frames;
        }
        let weights = self.frame_law();
        let idx = rng.sample(WeightedIndex::new(&weights).expect("positive weights"));
        self.min_frames + idx
    }

    /// Stable digest of the configuration.
    pub fn hash(&self) -> String {
        let fields = self.fields();
        config_hash(fields.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    fn fields(&self) -> Vec<(String, String)> {
        vec![
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("channels".into(), self.channels.to_string()),
            ("min_frames".into(), self.min_frames.to_string()),
            ("max_frames".into(), self.max_frames.to_string()),
            ("tail_exponent".into(), format!("{:?}", self.tail_exponent)),
            ("sprite_size".into(), self.sprite_size.to_string()),
        ]
    }
}

/// SHA-256 over `key=value` lines sorted by key, hex encoded.
pub fn config_hash<'a>(fields: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let sorted: BTreeMap<&str, &str> = fields.into_iter().collect();
    let mut hasher = Sha256::new();
    for (k, v) in sorted {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One captioned clip; `frames` is `[N, H, W, C]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteClip {
    pub frames: Tensor,
    pub caption: Vec<usize>,
    pub factors: Factors,
}

impl SpriteClip {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame_len(&self) -> usize {
        self.frames.len() / self.frame_count()
    }

    pub fn frame(&self, index: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[index * n..(index + 1) * n]
    }

    /// New clip made of the listed frames, in order.
    pub fn select_frames(&self, indices: &[usize]) -> SpriteClip {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        let mut shape = self.frames.shape().to_vec();
        shape[0] = indices.len();
        SpriteClip {
            frames: Tensor::from_parts(shape, data),
            caption: self.caption.clone(),
            factors: self.factors,
        }
    }
}

fn sprite_mask(shape: Shape, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let c = (size as f64 - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            mask[y * size + x] = match shape {
                Shape::Square => true,
                Shape::Circle => {
                    let (dx, dy) = (x as f64 - c, y as f64 - c);
                    dx * dx + dy * dy <= (c + 0.5) * (c + 0.5) - 0.25 || size == 1
                }
                Shape::Bar => {
                    let mid = size / 2;
                    y == mid || (size >= 4 && y + 1 == mid)
                }
            };
        }
    }
    mask
}

/// Position of a ping-pong walk over `0..=span` after `step` moves.
fn ping_pong(start: usize, step: usize, span: usize) -> usize {
    if span == 0 {
        return 0;
    }
    let period = 2 * span;
    let p = (start + step) % period;
    if p <= span {
        p
    } else {
        period - p
    }
}

/// Renders a clip of `n` frames in 8-bit levels.
fn render(cfg: &SpriteConfig, factors: &Factors, n: usize, x0: usize, y0: usize) -> Vec<u8> {
    let (h, w, ch, s) = (cfg.height, cfg.width, cfg.channels, cfg.sprite_size);
    let level: Vec<u8> = if ch == 3 {
        factors.color.rgb().to_vec()
    } else {
        vec![factors.color.grey()]
    };
    let mut out = vec![0u8; n * h * w * ch];
    for f in 0..n {
        let (size, ox, oy, visible) = match factors.motion {
            Motion::Translate => ((s), (x0 + f) % (w - s + 1), y0, true),
            Motion::Bounce => (s, x0, ping_pong(y0, f, h - s), true),
            Motion::Blink => (s, x0, y0, f % 2 == 0),
            Motion::Grow => {
                let size = 1 + f % s;
                // keep the grown sprite centred inside the full-size box
                let pad = (s - size) / 2;
                (size, x0 + pad, y0 + pad, true)
            }
        };
        if !visible {
            continue;
        }
        let mask = sprite_mask(factors.shape, size);
        let frame = &mut out[f * h * w * ch..(f + 1) * h * w * ch];
        for y in 0..size {
            for x in 0..size {
                if mask[y * size + x] {
                    let px = ((oy + y) * w + ox + x) * ch;
                    frame[px..px + ch].copy_from_slice(&level);
                }
            }
        }
    }
    out
}

fn bytes_to_tensor(shape: Vec<usize>, bytes: &[u8]) -> Tensor {
    Tensor::from_parts(shape, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Draws one clip: factors uniformly, frame count from the power law, and a
/// start position that keeps the sprite inside the frame for every step.
pub fn sample_clip<R: Rng + ?Sized>(rng: &mut R, cfg: &SpriteConfig) -> Result<SpriteClip> {
    cfg.validate()?;
    let n = cfg.draw_frame_count(rng);
    let factors = Factors {
        shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
        color: Color::ALL[rng.random_range(0..Color::ALL.len())],
        motion: Motion::ALL[rng.random_range(0..Motion::ALL.len())],
    };
    Ok(render_clip(rng, cfg, factors, n))
}

/// Renders a clip with the given factors and frame count at a random position.
pub fn render_clip<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SpriteConfig,
    factors: Factors,
    frames: usize,
) -> SpriteClip {
    let x0 = rng.random_range(0..=cfg.width - cfg.sprite_size);
    let y0 = rng.random_range(0..=cfg.height - cfg.sprite_size);
    let bytes = render(cfg, &factors, frames, x0, y0);
    SpriteClip {
        frames: bytes_to_tensor(vec![frames, cfg.height, cfg.width, cfg.channels], &bytes),
        caption: caption_of(&factors),
        factors,
    }
}

/// Per-clip generator stream derived from the dataset seed.
pub fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub frame_count: usize,
    pub factors: Factors,
    pub caption: Vec<usize>,
    pub path_prefix: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Histogram of frame counts, keyed by N.
    pub fn frame_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for r in &self.records {
            *hist.entry(r.frame_count).or_insert(0) += 1;
        }
        hist
    }
}

/// An in-memory dataset: manifest plus decoded clips, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<SpriteClip>,
}

/// Generates `count` clips deterministically from `seed`.
pub fn generate_dataset(cfg: &SpriteConfig, seed: u64, count: usize, id_prefix: &str) -> Result<Dataset> {
    cfg.validate()?;
    let mut clips = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = clip_rng(seed, i as u64);
        let clip = sample_clip(&mut rng, cfg)?;
        let clip_id = format!("{id_prefix}{i:06}");
        records.push(ManifestRecord {
            path_prefix: clip_id.clone(),
            clip_id,
            frame_count: clip.frame_count(),
            factors: clip.factors,
            caption: clip.caption.clone(),
        });
        clips.push(clip);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            config_hash: cfg.hash(),
            records,
        },
        clips,
    })
}

fn frame_path(dir: &Path, prefix: &str, index: usize) -> PathBuf {
    dir.join(format!("{prefix}_{index:03}.ppm"))
}

/// Writes a single `[H, W, C]` frame (values multiples of 1/255) as P5/P6.
pub fn write_frame(path: &Path, frame: &[f64], height: usize, width: usize, channels: usize) -> Result<()> {
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut buf = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    buf.extend(frame.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a P5/P6 frame, returning `(height, width, channels, values)`.
pub fn read_frame(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_anymap(&bytes).ok_or_else(|| Error::invalid(format!("{}: malformed pixmap", path.display())))
}

fn parse_anymap(bytes: &[u8]) -> Option<(usize, usize, usize, Vec<f64>)> {
    // header: magic, width, height, maxval, each separated by one whitespace run
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return None,
    };
    let width: usize = fields[1].parse().ok()?;
    let height: usize = fields[2].parse().ok()?;
    if fields[3] != "255" {
        return None;
    }
    let body = bytes.get(pos..)?;
    if body.len() != width * height * channels {
        return None;
    }
    Some((
        height,
        width,
        channels,
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes frames and `manifest.tsv` into `dir` (created if missing).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = &dataset.manifest;
    for (record, clip) in manifest.records.iter().zip(&dataset.clips) {
        let [_, h, w, c] = clip.frames.shape()[..] else {
            return Err(Error::Record {
                clip_id: record.clip_id.clone(),
                reason: format!("frames have shape {:?}", clip.frames.shape()),
            });
        };
        for f in 0..clip.frame_count() {
            write_frame(&frame_path(dir, &record.path_prefix, f), clip.frame(f), h, w, c)?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(&path, e);
    writeln!(out, "# seed={} config_hash={}", manifest.seed, manifest.config_hash).map_err(io)?;
    for r in &manifest.records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.clip_id,
            r.frame_count,
            r.factors,
            join_ids(&r.caption),
            r.path_prefix
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

fn parse_ids(field: &str) -> Option<Vec<usize>> {
    if field.is_empty() {
        return Some(Vec::new());
    }
    field.split(',').map(|t| t.trim().parse().ok()).collect()
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(&path, e))?
        .ok_or_else(|| Error::invalid(format!("{}: empty manifest", path.display())))?;
    let (seed, config_hash) = parse_header(&header)
        .ok_or_else(|| Error::invalid(format!("{}: bad header `{header}`", path.display())))?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line)?);
    }
    Ok(DatasetManifest {
        seed,
        config_hash,
        records,
    })
}

fn parse_header(line: &str) -> Option<(u64, String)> {
    let rest = line.strip_prefix('#')?;
    let mut seed = None;
    let mut hash = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("seed=") {
            seed = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("config_hash=") {
            hash = Some(v.to_string());
        }
    }
    Some((seed?, hash?))
}

fn parse_record(line: &str) -> Result<ManifestRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    let clip_id = cols.first().copied().unwrap_or_default().to_string();
    let bad = |reason: &str| Error::Record {
        clip_id: clip_id.clone(),
        reason: reason.to_string(),
    };
    if cols.len() != 5 {
        return Err(bad("expected 5 tab-separated columns"));
    }
    let frame_count: usize = cols[1].parse().map_err(|_| bad("bad frame count"))?;
    let fids = parse_ids(cols[2]).ok_or_else(|| bad("bad factor ids"))?;
    let factors = match fids[..] {
        [s, c, m] => Factors::from_ids(s, c, m).map_err(|e| bad(&e.to_string()))?,
        _ => return Err(bad("factors must be shape,color,motion")),
    };
    let caption = parse_ids(cols[3]).ok_or_else(|| bad("bad caption ids"))?;
    Ok(ManifestRecord {
        clip_id: clip_id.clone(),
        frame_count,
        factors,
        caption,
        path_prefix: cols[4].to_string(),
    })
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut clips = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let bad = |reason: String| Error::Record {
            clip_id: r.clip_id.clone(),
            reason,
        };
        if r.frame_count == 0 {
            return Err(bad("zero frames".into()));
        }
        let mut data = Vec::new();
        let mut dims = None;
        for f in 0..r.frame_count {
            let (h, w, c, values) = read_frame(&frame_path(dir, &r.path_prefix, f))
                .map_err(|e| bad(format!("frame {f}: {e}")))?;
            if *dims.get_or_insert((h, w, c)) != (h, w, c) {
                return Err(bad(format!("frame {f} has inconsistent size")));
            }
            data.extend(values);
        }
        let (h, w, c) = dims.unwrap();
        if caption_of(&r.factors) != r.caption {
            return Err(bad("caption does not match factors".into()));
        }
        clips.push(SpriteClip {
            frames: Tensor::from_parts(vec![r.frame_count, h, w, c], data),
            caption: r.caption.clone(),
            factors: r.factors,
        });
    }
    Ok(Dataset { manifest, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SpriteConfig {
        SpriteConfig::default()
    }

    #[test]
    fn degenerate_frame_range_gives_fixed_length() {
        let c = SpriteConfig {
            min_frames: 3,
            max_frames: 3,
            ..cfg()
        };
        let mut rng = clip_rng(1, 0);
        for _ in 0..50 {
            assert_eq!(sample_clip(&mut rng, &c).unwrap().frame_count(), 3);
        }
    }

    #[test]
    fn blink_has_period_two() {
        let factors = Factors {
            shape: Shape::Square,
            color: Color::Red,
            motion: Motion::Blink,
        };
        let clip = render_clip(&mut clip_rng(3, 0), &cfg(), factors, 5);
        assert_eq!(clip.frame(0), clip.frame(2));
        assert_ne!(clip.frame(0), clip.frame(1));
        assert!(clip.frame(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn caption_examples() {
        let f = Factors {
            shape: Shape::Circle,
            color: Color::Red,
            motion: Motion::Bounce,
        };
        assert_eq!(caption_of(&f), vec![vocab::RED, vocab::CIRCLE, vocab::BOUNCE]);
        assert_eq!(factors_of_caption(&caption_of(&f)).unwrap(), f);
    }

    #[test]
    fn captions_are_injective() {
        let mut seen = std::collections::HashSet::new();
        for &shape in &Shape::ALL {
            for &color in &Color::ALL {
                for &motion in &Motion::ALL {
                    let f = Factors { shape, color, motion };
                    let cap = caption_of(&f);
                    assert!(cap.iter().all(|&t| t < vocab::VOCAB_SIZE));
                    assert!(seen.insert(cap.clone()));
                    assert_eq!(factors_of_caption(&cap).unwrap(), f);
                }
            }
        }
    }

    #[test]
    fn unknown_factor_ids_are_rejected() {
        assert!(Factors::from_ids(3, 0, 0).is_err());
        assert!(Factors::from_ids(0, 4, 0).is_err());
        assert!(Factors::from_ids(0, 0, 4).is_err());
        assert!(factors_of_caption(&[vocab::CIRCLE, vocab::RED, vocab::BOUNCE]).is_err());
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let empty = SpriteConfig {
            min_frames: 6,
            max_frames: 5,
            ..cfg()
        };
        assert!(empty.validate().is_err());
        let big = SpriteConfig {
            sprite_size: 9,
            ..cfg()
        };
        assert!(big.validate().is_err());
    }

    #[test]
    fn every_motion_stays_in_bounds() {
        // Sprite pixels are drawn only inside the frame; a clip whose sprite
        // left the frame would lose pixels relative to frame 0.
        for (i, &motion) in Motion::ALL.iter().enumerate() {
            for &shape in &Shape::ALL {
                for seed in 0..20 {
                    let c = SpriteConfig {
                        channels: 3,
                        ..cfg()
                    };
                    let factors = Factors {
                        shape,
                        color: Color::Green,
                        motion,
                    };
                    let clip = render_clip(&mut clip_rng(seed, i as u64), &c, factors, 24);
                    assert!(clip.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                    let lit = |f: usize| clip.frame(f).iter().filter(|&&v| v > 0.0).count();
                    if motion == Motion::Translate || motion == Motion::Bounce {
                        for f in 1..24 {
                            assert_eq!(lit(f), lit(0), "{motion:?} {shape:?} frame {f}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn anymap_parse_rejects_truncated_body() {
        assert!(parse_anymap(b"P5\n2 2\n255\n\x00\x01\x02").is_none());
        let (h, w, c, v) = parse_anymap(b"P5\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!((h, w, c), (1, 2, 1));
        assert_eq!(v, vec![0.0, 1.0]);
    }
}
