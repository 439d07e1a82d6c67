//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every op appends a node holding its forward value. Nodes are created in
//! topological order, so the backward pass is a single reverse sweep.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Tanh(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    AvgPool2d(Var, usize),
    Upsample2d(Var, usize),
    ChannelConv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    DepthwiseConv3d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Reshape(Var),
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Sum(Var),
    MaskedMse {
        pred: Var,
        target: Tensor,
        frame_weights: Vec<f64>,
        active: usize,
    },
    EmbedMean {
        table: Var,
        tokens: Vec<usize>,
    },
    AddFrameRows {
        x: Var,
        table: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation recorder for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_touched(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [f, h, w, c] => Ok([f, h, w, c]),
        _ => Err(Error::shape(
            op,
            format!("expected [F,H,W,C], got {:?}", t.shape()),
        )),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// `x[.., n] + row[n]`, the row broadcast over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let (_, cols) = xv.rows_cols();
        if rv.rank() != 1 || rv.len() != cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), rv.shape()),
            ));
        }
        let r = rv.data();
        let data = xv
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, n) = match (x.shape(), y.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", x.shape(), y.shape()),
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        let (xd, yd) = (x.data(), y.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = xd[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for (o, &b) in row.iter_mut().zip(&yd[p * n..(p + 1) * n]) {
                    *o += a_ip * b;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = match *x.shape() {
            [m, n] => (m, n),
            _ => return Err(Error::shape("transpose", format!("{:?}", x.shape()))),
        };
        let out = transpose_data(x.data(), m, n);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a)))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, cols) = x.rows_cols();
        if cols == 0 || x.rank() == 0 {
            return Err(Error::shape("softmax", format!("{:?}", x.shape())));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= total;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Normalizes each trailing-axis vector to zero mean and unit variance,
    /// then applies the per-feature affine `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, cols) = xv.rows_cols();
        if gv.shape() != [cols] || bv.shape() != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let (g, b) = (gv.data(), bv.data());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(cols) {
            let (mean, rstd) = row_stats(row, eps);
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(c, &v)| g[c] * (v - mean) * rstd + b[c]),
            );
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Mean over non-overlapping `factor x factor` spatial blocks of `[F,H,W,C]`.
    pub fn avg_pool2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let x = self.value(a);
        let [f, h, w, c] = rank4("avg_pool2d", x)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("factor {factor} does not divide {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let mut out = vec![0.0; f * ho * wo * c];
        let norm = 1.0 / (factor * factor) as f64;
        let xd = x.data();
        for fi in 0..f {
            for hi in 0..h {
                for wi in 0..w {
                    let src = ((fi * h + hi) * w + wi) * c;
                    let dst = ((fi * ho + hi / factor) * wo + wi / factor) * c;
                    for ci in 0..c {
                        out[dst + ci] += xd[src + ci] * norm;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![f, ho, wo, c], out);
        Ok(self.push(out, Op::AvgPool2d(a, factor)))
    }

    /// Nearest-neighbour spatial upsampling of `[F,H,W,C]` by `factor`.
    pub fn upsample2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let x = self.value(a);
        let [f, h, w, c] = rank4("upsample2d", x)?;
        if factor == 0 {
            return Err(Error::shape("upsample2d", "factor 0"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(f * ho * wo * c);
        let xd = x.data();
        for fi in 0..f {
            for hi in 0..ho {
                for wi in 0..wo {
                    let src = ((fi * h + hi / factor) * w + wi / factor) * c;
                    out.extend_from_slice(&xd[src..src + c]);
                }
            }
        }
        let out = Tensor::from_parts(vec![f, ho, wo, c], out);
        Ok(self.push(out, Op::Upsample2d(a, factor)))
    }

    /// 1-D convolution along the trailing (channel) axis with an odd-length
    /// kernel, zero padded, applied independently at every leading index.
    pub fn channel_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (_, cols) = xv.rows_cols();
        let j = kv.len();
        if kv.rank() != 1 || j % 2 == 0 || bv.shape() != [cols] {
            return Err(Error::shape(
                "channel_conv1d",
                format!(
                    "input {:?}, kernel {:?} (odd length required), bias {:?}",
                    xv.shape(),
                    kv.shape(),
                    bv.shape()
                ),
            ));
        }
        let half = j / 2;
        let (kd, bd) = (kv.data(), bv.data());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(cols) {
            for c in 0..cols {
                let mut acc = bd[c];
                for (k, &wk) in kd.iter().enumerate() {
                    let src = c + k;
                    if src >= half && src - half < cols {
                        acc += wk * row[src - half];
                    }
                }
                out.push(acc);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::ChannelConv1d { x, kernel, bias }))
    }

    /// Per-channel (depthwise) 3-D convolution over `(F,H,W)` of `[F,H,W,C]`
    /// with a `[K,K,K,C]` kernel, zero padded to preserve shape.
    pub fn depthwise_conv3d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let [f, h, w, c] = rank4("depthwise_conv3d", xv)?;
        let ks = match *kv.shape() {
            [a, b, d, cc] if a == b && b == d && a % 2 == 1 && cc == c => a,
            _ => {
                return Err(Error::shape(
                    "depthwise_conv3d",
                    format!("input {:?}, kernel {:?}", xv.shape(), kv.shape()),
                ))
            }
        };
        if bv.shape() != [c] {
            return Err(Error::shape(
                "depthwise_conv3d",
                format!("bias {:?} for {c} channels", bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(xv.len());
        for _ in 0..f * h * w {
            out.extend_from_slice(bv.data());
        }
        conv3d_visit(
            [f, h, w, c],
            ks,
            |dst, src, kidx| {
                for ci in 0..c {
                    out[dst + ci] += kv.data()[kidx + ci] * xv.data()[src + ci];
                }
            },
        );
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::DepthwiseConv3d { x, kernel, bias }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Concatenates along the trailing axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_last",
                    format!("leading dims {:?} vs {:?}", lead, s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec())))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        if xv.rank() == 0 || start + len > cols || len == 0 {
            return Err(Error::shape(
                "slice_last",
                format!("[{start}, {}) of {:?}", start + len, xv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in xv.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, Op::SliceLast { x, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Mean squared error between `pred` and a constant `target`, taken only
    /// over frames (leading index) whose weight is non-zero.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, frame_weights: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        same_shape("masked_mse", p, target)?;
        let frames = p.shape().first().copied().unwrap_or(0);
        if frame_weights.len() != frames {
            return Err(Error::shape(
                "masked_mse",
                format!("{} weights for {frames} frames", frame_weights.len()),
            ));
        }
        let per_frame = if frames == 0 { 0 } else { p.len() / frames };
        let active_frames = frame_weights.iter().filter(|&&w| w != 0.0).count();
        if active_frames == 0 {
            return Err(Error::invalid("masked_mse: loss mask has no active frame"));
        }
        let active = active_frames * per_frame;
        let mut total = 0.0;
        for (f, &wt) in frame_weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let range = f * per_frame..(f + 1) * per_frame;
            for (a, b) in p.data()[range.clone()].iter().zip(&target.data()[range]) {
                total += (a - b) * (a - b);
            }
        }
        let out = Tensor::scalar(total / active as f64);
        Ok(self.push(
            out,
            Op::MaskedMse {
                pred,
                target: target.clone(),
                frame_weights: frame_weights.to_vec(),
                active,
            },
        ))
    }

    /// Mean of the table rows selected by `tokens`.
    pub fn embed_mean(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = match *t.shape() {
            [r, c] => (r, c),
            _ => return Err(Error::shape("embed_mean", format!("table {:?}", t.shape()))),
        };
        if tokens.is_empty() {
            return Err(Error::invalid("embed_mean: empty token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= rows) {
            return Err(Error::invalid(format!(
                "embed_mean: token id {bad} outside vocabulary of {rows}"
            )));
        }
        let mut out = vec![0.0; cols];
        let norm = 1.0 / tokens.len() as f64;
        for &tok in tokens {
            for (o, &v) in out.iter_mut().zip(&t.data()[tok * cols..(tok + 1) * cols]) {
                *o += v * norm;
            }
        }
        Ok(self.push(
            Tensor::from_vec(out),
            Op::EmbedMean {
                table,
                tokens: tokens.to_vec(),
            },
        ))
    }

    /// Adds `table[f]` to every feature vector of frame `f` in `x[F, .., d]`.
    pub fn add_frame_rows(&mut self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(table));
        let frames = xv.shape().first().copied().unwrap_or(0);
        let (_, d) = xv.rows_cols();
        let ok = xv.rank() >= 2 && matches!(*tv.shape(), [m, dd] if m >= frames && dd == d);
        if !ok {
            return Err(Error::shape(
                "add_frame_rows",
                format!("input {:?}, table {:?}", xv.shape(), tv.shape()),
            ));
        }
        let per_frame = xv.len() / frames.max(1);
        let mut out = xv.data().to_vec();
        for f in 0..frames {
            let row = &tv.data()[f * d..(f + 1) * d];
            for chunk in out[f * per_frame..(f + 1) * per_frame].chunks_mut(d) {
                for (o, &r) in chunk.iter_mut().zip(row) {
                    *o += r;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::AddFrameRows { x, table }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for ((o, &gi), &y) in s.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &|s| {
                    for ((o, &gi), &x) in s.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| axpy(s, g, *c)),
            Op::AddRow(x, row) => {
                acc(*x, &|s| axpy(s, g, 1.0));
                let n = self.value(*row).len();
                acc(*row, &|s| {
                    for chunk in g.chunks(n) {
                        axpy(s, chunk, 1.0);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for ((o, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &|s| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            s[i * k + p] += dot(gi, brow);
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip != 0.0 {
                                axpy(&mut s[p * n..(p + 1) * n], gi, a_ip);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[1], node.value.shape()[0]);
                // g has shape [n, m]; its transpose is [m, n].
                let gt = transpose_data(g, n, m);
                acc(*a, &|s| axpy(s, &gt, 1.0));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                acc(*a, &|s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let inner = dot(grow, yrow);
                        for ((o, &gi), &yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let (_, cols) = xv.rows_cols();
                let n = cols as f64;
                acc(*x, &|s| {
                    for ((srow, grow), xrow) in s
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xv.data().chunks(cols))
                    {
                        let (mean, rstd) = row_stats(xrow, *eps);
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = grow[c] * gam[c];
                            let h = (xrow[c] - mean) * rstd;
                            sum_dh += dh;
                            sum_dh_h += dh * h;
                        }
                        for c in 0..cols {
                            let dh = grow[c] * gam[c];
                            let h = (xrow[c] - mean) * rstd;
                            srow[c] += rstd * (dh - sum_dh / n - h * sum_dh_h / n);
                        }
                    }
                });
                acc(*gamma, &|s| {
                    for (grow, xrow) in g.chunks(cols).zip(xv.data().chunks(cols)) {
                        let (mean, rstd) = row_stats(xrow, *eps);
                        for c in 0..cols {
                            s[c] += grow[c] * (xrow[c] - mean) * rstd;
                        }
                    }
                });
                acc(*beta, &|s| {
                    for grow in g.chunks(cols) {
                        axpy(s, grow, 1.0);
                    }
                });
            }
            Op::AvgPool2d(a, factor) => {
                let [f, h, w, c] = rank4("avg_pool2d", self.value(*a)).unwrap();
                let (ho, wo) = (h / factor, w / factor);
                let norm = 1.0 / (factor * factor) as f64;
                acc(*a, &|s| {
                    for fi in 0..f {
                        for hi in 0..h {
                            for wi in 0..w {
                                let dst = ((fi * h + hi) * w + wi) * c;
                                let src = ((fi * ho + hi / factor) * wo + wi / factor) * c;
                                axpy(&mut s[dst..dst + c], &g[src..src + c], norm);
                            }
                        }
                    }
                });
            }
            Op::Upsample2d(a, factor) => {
                let [f, h, w, c] = rank4("upsample2d", self.value(*a)).unwrap();
                let (ho, wo) = (h * factor, w * factor);
                acc(*a, &|s| {
                    for fi in 0..f {
                        for hi in 0..ho {
                            for wi in 0..wo {
                                let src = ((fi * ho + hi) * wo + wi) * c;
                                let dst = ((fi * h + hi / factor) * w + wi / factor) * c;
                                axpy(&mut s[dst..dst + c], &g[src..src + c], 1.0);
                            }
                        }
                    }
                });
            }
            Op::ChannelConv1d { x, kernel, bias } => {
                let xv = self.value(*x);
                let kd = self.value(*kernel).data();
                let (_, cols) = xv.rows_cols();
                let half = kd.len() / 2;
                acc(*x, &|s| {
                    for (srow, grow) in s.chunks_mut(cols).zip(g.chunks(cols)) {
                        for c in 0..cols {
                            for (k, &wk) in kd.iter().enumerate() {
                                let src = c + k;
                                if src >= half && src - half < cols {
                                    srow[src - half] += wk * grow[c];
                                }
                            }
                        }
                    }
                });
                acc(*kernel, &|s| {
                    for (xrow, grow) in xv.data().chunks(cols).zip(g.chunks(cols)) {
                        for c in 0..cols {
                            for (k, sk) in s.iter_mut().enumerate() {
                                let src = c + k;
                                if src >= half && src - half < cols {
                                    *sk += grow[c] * xrow[src - half];
                                }
                            }
                        }
                    }
                });
                acc(*bias, &|s| {
                    for grow in g.chunks(cols) {
                        axpy(s, grow, 1.0);
                    }
                });
            }
            Op::DepthwiseConv3d { x, kernel, bias } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let dims = rank4("depthwise_conv3d", xv).unwrap();
                let c = dims[3];
                let ks = kv.shape()[0];
                acc(*x, &|s| {
                    conv3d_visit(dims, ks, |dst, src, kidx| {
                        for ci in 0..c {
                            s[src + ci] += kv.data()[kidx + ci] * g[dst + ci];
                        }
                    });
                });
                acc(*kernel, &|s| {
                    conv3d_visit(dims, ks, |dst, src, kidx| {
                        for ci in 0..c {
                            s[kidx + ci] += xv.data()[src + ci] * g[dst + ci];
                        }
                    });
                });
                acc(*bias, &|s| {
                    for grow in g.chunks(c) {
                        axpy(s, grow, 1.0);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|s| axpy(s, g, 1.0)),
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *self.value(*p).shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    acc(p, &|s| {
                        for (srow, grow) in s.chunks_mut(wd).zip(g.chunks(total)) {
                            axpy(srow, &grow[offset..offset + wd], 1.0);
                        }
                    });
                    offset += wd;
                }
            }
            Op::SliceLast { x, start } => {
                let (_, cols) = self.value(*x).rows_cols();
                let (_, len) = node.value.rows_cols();
                acc(*x, &|s| {
                    for (srow, grow) in s.chunks_mut(cols).zip(g.chunks(len)) {
                        axpy(&mut srow[*start..*start + len], grow, 1.0);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &|s| s.iter_mut().for_each(|o| *o += g0));
            }
            Op::MaskedMse {
                pred,
                target,
                frame_weights,
                active,
            } => {
                let p = self.value(*pred).data();
                let per_frame = p.len() / frame_weights.len();
                let scale = 2.0 * g[0] / *active as f64;
                acc(*pred, &|s| {
                    for (f, &wt) in frame_weights.iter().enumerate() {
                        if wt == 0.0 {
                            continue;
                        }
                        for idx in f * per_frame..(f + 1) * per_frame {
                            s[idx] += scale * (p[idx] - target.data()[idx]);
                        }
                    }
                });
            }
            Op::EmbedMean { table, tokens } => {
                let cols = node.value.len();
                let norm = 1.0 / tokens.len() as f64;
                acc(*table, &|s| {
                    for &tok in tokens {
                        axpy(&mut s[tok * cols..(tok + 1) * cols], g, norm);
                    }
                });
            }
            Op::AddFrameRows { x, table } => {
                acc(*x, &|s| axpy(s, g, 1.0));
                let xv = self.value(*x);
                let frames = xv.shape()[0];
                let (_, d) = xv.rows_cols();
                let per_frame = xv.len() / frames;
                acc(*table, &|s| {
                    for f in 0..frames {
                        for chunk in g[f * per_frame..(f + 1) * per_frame].chunks(d) {
                            axpy(&mut s[f * d..(f + 1) * d], chunk, 1.0);
                        }
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose_data(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Calls `visit(dst_offset, src_offset, kernel_offset)` for every in-bounds
/// (output site, kernel tap) pair of a zero-padded cubic 3-D convolution.
fn conv3d_visit(dims: [usize; 4], ks: usize, mut visit: impl FnMut(usize, usize, usize)) {
    let [f, h, w, c] = dims;
    let half = ks / 2;
    let shifted = |pos: usize, tap: usize, extent: usize| -> Option<usize> {
        let p = pos + tap;
        (p >= half && p - half < extent).then(|| p - half)
    };
    for fi in 0..f {
        for hi in 0..h {
            for wi in 0..w {
                let dst = ((fi * h + hi) * w + wi) * c;
                for a in 0..ks {
                    let Some(sf) = shifted(fi, a, f) else { continue };
                    for b in 0..ks {
                        let Some(sh) = shifted(hi, b, h) else { continue };
                        for e in 0..ks {
                            let Some(sw) = shifted(wi, e, w) else { continue };
                            let src = ((sf * h + sh) * w + sw) * c;
                            let kidx = ((a * ks + b) * ks + e) * c;
                            visit(dst, src, kidx);
                        }
                    }
                }
            }
        }
    }
}
