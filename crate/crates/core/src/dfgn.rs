//! Noise-prediction network with spatial-temporal interaction blocks, guidance
//! packing, caption augmentation and checkpoint IO.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::masks::{apply_masks, ConditionMask, LossMask};
use crate::numcore::{self, AttentionWeights, Tape, Tensor, Var};
use crate::spritegen::{vocab, SpriteClip};

/// Hyper-parameters of one spatial-temporal interaction block.
#[derive(Clone, Debug, PartialEq)]
pub struct StiConfig {
    /// Spatial pooling factor of the semantic branch.
    pub gamma: usize,
    /// Channel-convolution window of the detail branch.
    pub kernel: usize,
    pub width: usize,
    pub heads: usize,
}

impl Default for StiConfig {
    fn default() -> Self {
        StiConfig {
            gamma: 2,
            kernel: 3,
            width: 32,
            heads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalLayer {
    Sti,
    Conv3d,
}

impl std::fmt::Display for TemporalLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TemporalLayer::Sti => "sti",
            TemporalLayer::Conv3d => "conv3d",
        })
    }
}

impl std::str::FromStr for TemporalLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sti" => Ok(TemporalLayer::Sti),
            "conv3d" => Ok(TemporalLayer::Conv3d),
            other => Err(Error::invalid(format!("unknown temporal layer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub sti: StiConfig,
    pub blocks: usize,
    pub temporal: TemporalLayer,
    /// Rows of the frame positional table.
    pub max_frames: usize,
    pub frame_positions: bool,
    pub vocab: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 1,
            sti: StiConfig::default(),
            blocks: 2,
            temporal: TemporalLayer::Sti,
            max_frames: 24,
            frame_positions: true,
            vocab: vocab::VOCAB_SIZE,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: format!("model.{key}"),
                reason,
            })
        };
        let s = &self.sti;
        if ![1, 2, 4].contains(&s.gamma) {
            return bad("gamma", format!("{} not in {{1, 2, 4}}", s.gamma));
        }
        if s.kernel % 2 == 0 {
            return bad("kernel", format!("{} must be odd", s.kernel));
        }
        if s.width == 0 || s.heads == 0 || s.width % s.heads != 0 {
            return bad("heads", format!("width {} not divisible by {} heads", s.width, s.heads));
        }
        if self.channels == 0 || self.blocks == 0 || self.max_frames == 0 {
            return bad("channels/blocks/max_frames", "must be positive".into());
        }
        if self.vocab <= vocab::HASH {
            return bad("vocab", format!("{} leaves no room for the mask token", self.vocab));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps", format!("{} must be positive", self.ln_eps));
        }
        Ok(())
    }

    /// Input channels: noisy frames, reference, visible frames, keep plane.
    pub fn input_channels(&self) -> usize {
        3 * self.channels + 1
    }

    /// Ordered parameter manifest.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.sti.width;
        let mut m = vec![
            ("in.w".to_string(), vec![self.input_channels(), d]),
            ("in.b".to_string(), vec![d]),
            ("time.w".to_string(), vec![d, d]),
            ("time.b".to_string(), vec![d]),
            ("text.table".to_string(), vec![self.vocab, d]),
            ("text.w".to_string(), vec![d, d]),
            ("text.b".to_string(), vec![d]),
        ];
        for i in 0..self.blocks {
            let p = |n: &str| format!("b{i}.{n}");
            match self.temporal {
                TemporalLayer::Sti => {
                    if self.frame_positions {
                        m.push((p("pos"), vec![self.max_frames, d]));
                    }
                    for n in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                        m.push((p(n), vec![d, d]));
                    }
                    m.push((p("conv.k"), vec![self.sti.kernel]));
                    m.push((p("conv.b"), vec![d]));
                    for n in ["norm_a.g", "norm_a.b", "norm_b.g", "norm_b.b"] {
                        m.push((p(n), vec![d]));
                    }
                    m.push((p("fuse.w"), vec![2 * d, d]));
                }
                TemporalLayer::Conv3d => {
                    m.push((p("conv3d.k"), vec![3, 3, 3, d]));
                    m.push((p("conv3d.b"), vec![d]));
                    m.push((p("norm.g"), vec![d]));
                    m.push((p("norm.b"), vec![d]));
                    m.push((p("fuse.w"), vec![d, d]));
                }
            }
            m.push((p("fuse.b"), vec![d]));
        }
        m.push(("out.w".to_string(), vec![d, self.channels]));
        m.push(("out.b".to_string(), vec![self.channels]));
        m
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// All network weights, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl DenoiserParams {
    /// Random init: weights `N(0, 1/fan_in)`, zero biases, unit norm gains,
    /// zero fusion weights so every block starts as the identity.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                let leaf = name.rsplit('.').next().unwrap_or("");
                match leaf {
                    _ if name.ends_with("fuse.w") => Tensor::zeros(&shape),
                    "g" => Tensor::full(&shape, 1.0),
                    "b" if name.contains("norm") || shape.len() == 1 => Tensor::zeros(&shape),
                    "table" => Tensor::randn(&shape, 1.0, rng),
                    "pos" => Tensor::randn(&shape, 0.1, rng),
                    "k" if name.ends_with("conv.k") => {
                        Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng)
                    }
                    "k" => Tensor::randn(&shape, 1.0 / 27f64.sqrt(), rng),
                    _ => Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng),
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config.manifest().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Self::from_tensors(config, tensors)
    }

    /// Checks tensors against the config's manifest.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let manifest = config.manifest();
        if manifest.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in manifest.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            t.ensure_finite(name)?;
        }
        let names: Vec<String> = manifest.into_iter().map(|(n, _)| n).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(DenoiserParams {
            config: config.clone(),
            names,
            tensors,
            index,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Bound { params: self, vars }
    }

    /// `p -= lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::invalid("gradient list does not match parameters"));
        }
        for ((p, g), name) in self.tensors.iter_mut().zip(grads).zip(&self.names) {
            g.ensure_finite(&format!("gradient of {name}"))?;
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'a> {
    pub params: &'a DenoiserParams,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))
    }

    fn block(&self, i: usize, name: &str) -> Result<Var> {
        self.var(&format!("b{i}.{name}"))
    }
}

/// Replaces each token by the mask token with probability `p`. One uniform
/// draw is consumed per token whatever `p` is.
pub fn augment_text<R: Rng + ?Sized>(tokens: &[usize], p: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("replacement probability {p} outside [0, 1]")));
    }
    Ok(tokens
        .iter()
        .map(|&t| {
            if rng.random::<f64>() < p {
                vocab::HASH
            } else {
                t
            }
        })
        .collect())
}

/// Mean of the embedding rows of `tokens`, projected to the model width.
pub fn embed_text(tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<Var> {
    let d = bound.params.config.sti.width;
    let table = bound.var("text.table")?;
    let pooled = tape.embed_mean(table, tokens)?;
    let pooled = tape.reshape(pooled, &[1, d])?;
    let proj = tape.matmul(pooled, bound.var("text.w")?)?;
    let proj = tape.add_row(proj, bound.var("text.b")?)?;
    tape.reshape(proj, &[d])
}

/// Network input for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePack {
    /// `[F, H, W, 3C + 1]`: noisy frames, reference, visible frames, keep plane.
    pub input: Tensor,
    /// Caption tokens, present when text guidance is active.
    pub text: Option<Vec<usize>>,
    pub t: usize,
}

impl GuidancePack {
    pub fn frames(&self) -> usize {
        self.input.shape()[0]
    }

    /// Swaps the noisy-frame channels for `noisy`, keeping the rest.
    pub fn with_noisy(&self, noisy: &Tensor, t: usize) -> Result<GuidancePack> {
        let s = self.input.shape();
        let total = s[3];
        let c = (total - 1) / 3;
        if noisy.shape() != [s[0], s[1], s[2], c] {
            return Err(Error::shape(
                "pack_guidance",
                format!("noisy {:?} vs pack {:?}", noisy.shape(), s),
            ));
        }
        let mut input = self.input.clone();
        for (px, chunk) in input.data_mut().chunks_mut(total).enumerate() {
            chunk[..c].copy_from_slice(&noisy.data()[px * c..(px + 1) * c]);
        }
        Ok(GuidancePack {
            input,
            text: self.text.clone(),
            t,
        })
    }
}

/// Channel-concatenates the noisy frames with the reference (frame 0 of the
/// clip, broadcast), the masked visible frames and the keep plane.
pub fn pack_guidance(
    noisy: &Tensor,
    clip: &SpriteClip,
    cmask: &ConditionMask,
    t: usize,
    text: Option<&[usize]>,
) -> Result<GuidancePack> {
    if noisy.shape() != clip.frames.shape() {
        return Err(Error::shape(
            "pack_guidance",
            format!("noisy {:?} vs clip {:?}", noisy.shape(), clip.frames.shape()),
        ));
    }
    let masked = apply_masks(clip, cmask)?;
    let s = clip.frames.shape();
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    let reference = clip.frame(0);
    let total = 3 * c + 1;
    let mut data = Vec::with_capacity(f * h * w * total);
    for px in 0..f * h * w {
        let local = px % (h * w);
        data.extend_from_slice(&noisy.data()[px * c..(px + 1) * c]);
        data.extend_from_slice(&reference[local * c..(local + 1) * c]);
        data.extend_from_slice(&masked.guidance.data()[px * c..(px + 1) * c]);
        data.push(masked.keep_plane.data()[px]);
    }
    Ok(GuidancePack {
        input: Tensor::new(vec![f, h, w, total], data)?,
        text: if cmask.text_active {
            text.map(<[usize]>::to_vec)
        } else {
            None
        },
        t,
    })
}

/// Applies `w[in, out]` and bias along the trailing axis of `x`.
fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let cols = *shape.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
    let rows = tape.value(x).len() / cols.max(1);
    let flat = tape.reshape(x, &[rows, cols])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add_row(y, b)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = tape.value(y).shape()[1];
    tape.reshape(y, &out_shape)
}

fn semantic_branch(tape: &mut Tape, h: Var, bound: &Bound, i: usize) -> Result<Var> {
    let cfg = &bound.params.config;
    let gamma = cfg.sti.gamma;
    let pooled = tape.avg_pool2d(h, gamma)?;
    let pooled = if cfg.frame_positions {
        tape.add_frame_rows(pooled, bound.block(i, "pos")?)?
    } else {
        pooled
    };
    let shape = tape.value(pooled).shape().to_vec();
    let tokens = tape.reshape(pooled, &[shape[0] * shape[1] * shape[2], shape[3]])?;
    let weights = AttentionWeights {
        query: bound.block(i, "attn.q")?,
        key: bound.block(i, "attn.k")?,
        value: bound.block(i, "attn.v")?,
        out: bound.block(i, "attn.o")?,
    };
    let attended = numcore::self_attention(tape, tokens, weights, cfg.sti.heads)?;
    let attended = tape.reshape(attended, &shape)?;
    tape.upsample2d(attended, gamma)
}

fn detail_branch(tape: &mut Tape, h: Var, bound: &Bound, i: usize) -> Result<Var> {
    tape.channel_conv1d(h, bound.block(i, "conv.k")?, bound.block(i, "conv.b")?)
}

/// One spatial-temporal interaction block on `h[F, H, W, d]`:
/// `h + fuse([norm(semantic(h)), norm(detail(h))])`.
pub fn sti_forward(tape: &mut Tape, h: Var, bound: &Bound, block: usize) -> Result<Var> {
    let eps = bound.params.config.ln_eps;
    let a = semantic_branch(tape, h, bound, block)?;
    let b = detail_branch(tape, h, bound, block)?;
    let a = tape.layer_norm(a, bound.block(block, "norm_a.g")?, bound.block(block, "norm_a.b")?, eps)?;
    let b = tape.layer_norm(b, bound.block(block, "norm_b.g")?, bound.block(block, "norm_b.b")?, eps)?;
    let cat = tape.concat_last(&[a, b])?;
    let fused = linear(tape, cat, bound.block(block, "fuse.w")?, Some(bound.block(block, "fuse.b")?))?;
    tape.add(h, fused)
}

/// Drop-in temporal block: `h + fuse(norm(conv3x3x3(h)))`.
pub fn conv3d_baseline(tape: &mut Tape, h: Var, bound: &Bound, block: usize) -> Result<Var> {
    let eps = bound.params.config.ln_eps;
    let c = tape.depthwise_conv3d(h, bound.block(block, "conv3d.k")?, bound.block(block, "conv3d.b")?)?;
    let c = tape.layer_norm(c, bound.block(block, "norm.g")?, bound.block(block, "norm.b")?, eps)?;
    let fused = linear(tape, c, bound.block(block, "fuse.w")?, Some(bound.block(block, "fuse.b")?))?;
    tape.add(h, fused)
}

/// Sinusoidal embedding of timestep `t` with `width` entries.
pub fn timestep_embedding(t: usize, width: usize) -> Tensor {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[i + half] = (t as f64 * freq).cos();
    }
    Tensor::from_vec(out)
}

fn check_block(tape: &Tape, v: Var, label: &str) -> Result<()> {
    match tape.value(v).first_non_finite() {
        Some(index) => Err(Error::NonFinite {
            context: label.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Predicted noise `[F, H, W, C]` for one packed sample.
pub fn denoise(tape: &mut Tape, bound: &Bound, pack: &GuidancePack) -> Result<Var> {
    let cfg = &bound.params.config;
    let d = cfg.sti.width;
    let s = pack.input.shape();
    if s.len() != 4 || s[3] != cfg.input_channels() {
        return Err(Error::shape(
            "denoise",
            format!("input {:?}, expected {} channels", s, cfg.input_channels()),
        ));
    }
    if s[0] > cfg.max_frames && cfg.temporal == TemporalLayer::Sti && cfg.frame_positions {
        return Err(Error::shape(
            "denoise",
            format!("{} frames exceed the positional table of {}", s[0], cfg.max_frames),
        ));
    }
    let x = tape.leaf(pack.input.clone());
    let mut h = linear(tape, x, bound.var("in.w")?, Some(bound.var("in.b")?))?;

    let temb = tape.leaf(timestep_embedding(pack.t, d).reshape(&[1, d])?);
    let temb = tape.matmul(temb, bound.var("time.w")?)?;
    let temb = tape.add_row(temb, bound.var("time.b")?)?;
    let temb = tape.tanh(temb);
    let temb = tape.reshape(temb, &[d])?;
    h = tape.add_row(h, temb)?;

    if let Some(tokens) = &pack.text {
        let text = embed_text(tape, bound, tokens)?;
        h = tape.add_row(h, text)?;
    }
    check_block(tape, h, "input projection")?;

    for i in 0..cfg.blocks {
        h = match cfg.temporal {
            TemporalLayer::Sti => sti_forward(tape, h, bound, i)?,
            TemporalLayer::Conv3d => conv3d_baseline(tape, h, bound, i)?,
        };
        check_block(tape, h, &format!("block {i}"))?;
    }
    let out = linear(tape, h, bound.var("out.w")?, Some(bound.var("out.b")?))?;
    check_block(tape, out, "output projection")?;
    Ok(out)
}

/// Forward pass without keeping gradients.
pub fn predict_noise(params: &DenoiserParams, pack: &GuidancePack) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = denoise(&mut tape, &bound, pack)?;
    Ok(tape.value(out).clone())
}

/// Masked noise-prediction loss and its gradient for every parameter.
pub fn loss_and_gradients(
    params: &DenoiserParams,
    pack: &GuidancePack,
    eps: &Tensor,
    loss_mask: &LossMask,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let pred = denoise(&mut tape, &bound, pack)?;
    let loss = crate::diffusion::masked_loss(&mut tape, pred, eps, loss_mask)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "training loss".into(),
            index: 0,
        });
    }
    let grads = tape.backward(loss)?;
    Ok((value, bound.vars.iter().map(|&v| grads.get(v)).collect()))
}

const MAGIC: &[u8; 8] = b"DMASKCKP";
const VERSION: u32 = 1;

/// Tensors read back from a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub manifest: Vec<(String, Vec<usize>)>,
    pub tensors: Vec<Tensor>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

/// Header (magic, version, config hash, name/shape manifest), then every
/// value as a little-endian `f64` in manifest order.
pub fn write_checkpoint(path: &Path, params: &DenoiserParams, config_hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, config_hash);
    put_u32(&mut buf, params.tensors.len() as u32);
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.rank() as u32);
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
    }
    for t in &params.tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_hash = cur.string()?;
    let count = cur.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (_, shape) in &manifest {
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(Checkpoint {
        config_hash,
        manifest,
        tensors,
    })
}

impl Checkpoint {
    /// Rebuilds parameters, requiring the manifest to match `config`.
    pub fn into_params(self, config: &ModelConfig) -> Result<DenoiserParams> {
        let expected = config.manifest();
        if expected != self.manifest {
            let first = expected
                .iter()
                .zip(&self.manifest)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
                .unwrap_or_else(|| format!("{} vs {} tensors", expected.len(), self.manifest.len()));
            return Err(Error::Checkpoint(format!("manifest mismatch: {first}")));
        }
        DenoiserParams::from_tensors(config, self.tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{mask_from_choice, Task};
    use crate::spritegen::{sample_clip, SpriteConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn clip(frames: usize, seed: u64) -> SpriteClip {
        let cfg = SpriteConfig {
            min_frames: frames,
            max_frames: frames,
            ..SpriteConfig::default()
        };
        sample_clip(&mut rng(seed), &cfg).unwrap()
    }

    #[test]
    fn default_parameter_count_is_frozen() {
        assert_eq!(ModelConfig::default().parameter_count(), 18_567);
        let conv = ModelConfig {
            temporal: TemporalLayer::Conv3d,
            ..ModelConfig::default()
        };
        assert_eq!(conv.parameter_count(), conv.manifest().iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.sti.gamma = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.sti.kernel = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.sti.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sti_is_identity_at_init() {
        let params = DenoiserParams::init(&ModelConfig::default(), &mut rng(1)).unwrap();
        let h0 = Tensor::randn(&[3, 8, 8, 32], 1.0, &mut rng(2));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = tape.leaf(h0.clone());
        let y = sti_forward(&mut tape, h, &bound, 0).unwrap();
        assert_eq!(tape.value(y), &h0);
        let y = conv3d_baseline_check(&h0);
        assert_eq!(y, h0);
    }

    fn conv3d_baseline_check(h0: &Tensor) -> Tensor {
        let cfg = ModelConfig {
            temporal: TemporalLayer::Conv3d,
            ..ModelConfig::default()
        };
        let params = DenoiserParams::init(&cfg, &mut rng(3)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = tape.leaf(h0.clone());
        let y = conv3d_baseline(&mut tape, h, &bound, 0).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.sti.gamma = 4;
        let params = DenoiserParams::init(&cfg, &mut rng(1)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = tape.leaf(Tensor::zeros(&[2, 6, 6, 32]));
        assert!(sti_forward(&mut tape, h, &bound, 0).is_err());
    }

    #[test]
    fn zero_weights_predict_zero() {
        let params = DenoiserParams::zeros(&ModelConfig::default()).unwrap();
        let c = clip(4, 5);
        let mask = mask_from_choice(Task::Grt, 4, 0).unwrap();
        let noisy = Tensor::randn(c.frames.shape(), 1.0, &mut rng(6));
        let pack = pack_guidance(&noisy, &c, &mask, 17, Some(&c.caption)).unwrap();
        let out = predict_noise(&params, &pack).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), c.frames.shape());
    }

    #[test]
    fn pack_layout() {
        let c = clip(5, 7);
        let noisy = Tensor::randn(c.frames.shape(), 1.0, &mut rng(8));
        let all = ConditionMask::all_keep(Task::Ipt, 5);
        let pack = pack_guidance(&noisy, &c, &all, 3, Some(&c.caption)).unwrap();
        assert_eq!(pack.input.shape(), &[5, 8, 8, 4]);
        assert!(pack.text.is_some());
        let ipt = mask_from_choice(Task::Ipt, 5, 0).unwrap();
        assert!(pack_guidance(&noisy, &c, &ipt, 3, Some(&c.caption)).unwrap().text.is_none());
        for (px, chunk) in pack.input.data().chunks(4).enumerate() {
            assert_eq!(chunk[0], noisy.data()[px]);
            assert_eq!(chunk[1], c.frames.data()[px % 64]);
            assert_eq!(chunk[2], c.frames.data()[px]);
            assert_eq!(chunk[3], 1.0);
        }
        let grt = mask_from_choice(Task::Grt, 5, 0).unwrap();
        let pack = pack_guidance(&noisy, &c, &grt, 3, Some(&c.caption)).unwrap();
        assert_eq!(pack.text.as_deref(), Some(&c.caption[..]));
        for (px, chunk) in pack.input.data().chunks(4).enumerate() {
            let frame = px / 64;
            assert_eq!(chunk[3], if frame == 0 { 1.0 } else { 0.0 });
            if frame > 0 {
                assert_eq!(chunk[2], 0.0);
            }
        }
        let swapped = pack.with_noisy(&c.frames, 9).unwrap();
        assert_eq!(swapped.t, 9);
        assert_eq!(swapped.input.data()[0], c.frames.data()[0]);
        assert!(pack_guidance(&Tensor::zeros(&[4, 8, 8, 1]), &c, &grt, 0, None).is_err());
    }

    #[test]
    fn augment_text_extremes() {
        let toks = vec![2, 6, 9, 3];
        assert_eq!(augment_text(&toks, 0.0, &mut rng(1)).unwrap(), toks);
        assert!(augment_text(&toks, 1.0, &mut rng(1))
            .unwrap()
            .iter()
            .all(|&t| t == vocab::HASH));
        assert!(augment_text(&toks, 1.5, &mut rng(1)).is_err());
    }

    #[test]
    fn text_embedding_is_order_free_and_rejects_unknown_ids() {
        let params = DenoiserParams::init(&ModelConfig::default(), &mut rng(4)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = embed_text(&mut tape, &bound, &[2, 6, 9]).unwrap();
        let b = embed_text(&mut tape, &bound, &[9, 2, 6]).unwrap();
        let hash = embed_text(&mut tape, &bound, &[1, 1, 1]).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() < 1e-15);
        assert!(tape.value(a).max_abs_diff(tape.value(hash)).unwrap() > 1e-3);
        assert!(embed_text(&mut tape, &bound, &[64]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig::default();
        let params = DenoiserParams::init(&cfg, &mut rng(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &params, "abc").unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.config_hash, "abc");
        let back = ck.clone().into_params(&cfg).unwrap();
        assert_eq!(back, params);
        let other = ModelConfig {
            temporal: TemporalLayer::Conv3d,
            ..cfg
        };
        assert!(ck.into_params(&other).is_err());
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
