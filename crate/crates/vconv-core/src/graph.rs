use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the
/// graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[inline]
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-channel statistics reported by instance normalization.
/// `std` is the ε-stabilized denominator, so it is always ≥ sqrt(eps).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<T: Scalar> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// y = scale·x + shift with constant coefficients; only the scale
    /// matters to the backward pass.
    AffineConst {
        x: usize,
        scale: T,
    },
    Matmul(usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Abs(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    /// Saves the per-channel 1/σ from the forward pass; the node value
    /// is the normalized map itself.
    InstanceNorm {
        x: usize,
        inv_std: Vec<T>,
    },
    /// y[c, t] = x[c, t] · s[c]
    ScaleRows {
        x: usize,
        s: usize,
    },
    /// y[c, t] = x[c, t] + b[c]
    AddRows {
        x: usize,
        b: usize,
    },
    /// y[c, t] = x[c] for t in 0..width
    BroadcastWidth {
        x: usize,
        width: usize,
    },
    /// Average over the time axis: [C × T] -> [C × 1]
    MeanWidth(usize),
    SumAll(usize),
    MeanAll(usize),
    /// log Σ exp over all elements, max-shifted for stability.
    LogSumExp(usize),
    ConcatRows(Vec<usize>),
    /// y[:, j] = x[:, idx[j]]
    GatherCols {
        x: usize,
        idx: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only reverse-mode differentiation tape.
///
/// Every op pushes a node whose inputs have strictly smaller ids, so a
/// single reverse sweep over the node list is a valid topological
/// order. All reductions run in fixed index order: two identical
/// graphs produce bitwise-identical values and gradients.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that participates in differentiation.
    pub fn trainable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant: no gradient is ever computed for it
    /// or propagated through paths that only reach constants.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── elementwise binary ──

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Add(a.0, b.0), req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Sub(a.0, b.0), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Mul(a.0, b.0), req))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Div(a.0, b.0), req))
    }

    // ── elementwise unary ──

    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| scale * v + shift);
        let req = self.requires(x);
        self.push(value, Op::AffineConst { x: x.0, scale }, req)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.nodes[x.0]
            .value
            .map(|v| if v > T::zero() { v } else { slope * v });
        let req = self.requires(x);
        self.push(value, Op::LeakyRelu { x: x.0, slope }, req)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.abs());
        let req = self.requires(x);
        self.push(value, Op::Abs(x.0), req)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        // max(x, 0) + ln(1 + e^{−|x|}) avoids overflow on both tails.
        let value = self.nodes[x.0]
            .value
            .map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        let req = self.requires(x);
        self.push(value, Op::Softplus(x.0), req)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.exp());
        let req = self.requires(x);
        self.push(value, Op::Exp(x.0), req)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.ln());
        let req = self.requires(x);
        self.push(value, Op::Ln(x.0), req)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.sqrt());
        let req = self.requires(x);
        self.push(value, Op::Sqrt(x.0), req)
    }

    // ── linear algebra ──

    /// [M × K] · [K × N] -> [M × N]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul: {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = ad[i * k + kk];
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::Matmul(a.0, b.0), req))
    }

    /// 1-d convolution over [C_in × T] with weight [C_out × C_in × k]
    /// and bias [C_out]; zero padding on both sides.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape();
        let sw = self.nodes[w.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sx.len() != 2 || sw.len() != 3 || sb.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "conv1d ranks: input {sx:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        let (c_in, t_in) = (sx[0], sx[1]);
        let (c_out, k) = (sw[0], sw[2]);
        if sw[1] != c_in || sb[0] != c_out {
            return Err(Error::ShapeMismatch(format!(
                "conv1d channels: input {sx:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        if stride < 1 || dilation < 1 || k < 1 {
            return Err(Error::InvalidConfig(
                "conv1d: stride, dilation, kernel must be ≥ 1".into(),
            ));
        }
        let span = dilation * (k - 1) + 1;
        if t_in + 2 * padding < span {
            return Err(Error::ShapeMismatch(format!(
                "conv1d: input length {t_in} + 2·{padding} shorter than kernel span {span}"
            )));
        }
        let t_out = (t_in + 2 * padding - span) / stride + 1;

        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); c_out * t_out];
        for o in 0..c_out {
            let orow = &mut out[o * t_out..(o + 1) * t_out];
            orow.iter_mut().for_each(|v| *v = bd[o]);
            for ci in 0..c_in {
                let xrow = &xd[ci * t_in..(ci + 1) * t_in];
                for j in 0..k {
                    let wv = wd[(o * c_in + ci) * k + j];
                    let off = (j * dilation) as isize - padding as isize;
                    if stride == 1 {
                        let t0 = (-off).max(0) as usize;
                        let t1 = ((t_in as isize - off).max(0) as usize).min(t_out);
                        if t0 < t1 {
                            let xs = &xrow[(t0 as isize + off) as usize..];
                            for (ov, &xv) in orow[t0..t1].iter_mut().zip(xs) {
                                *ov = *ov + wv * xv;
                            }
                        }
                    } else {
                        for (t, ov) in orow.iter_mut().enumerate() {
                            let u = (t * stride) as isize + off;
                            if u >= 0 && (u as usize) < t_in {
                                *ov = *ov + wv * xrow[u as usize];
                            }
                        }
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor::from_vec(&[c_out, t_out], out)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                dilation,
                padding,
            },
            req,
        ))
    }

    // ── normalization ──

    /// Per-channel standardization of [C × T] with biased variance and
    /// σ = sqrt(var + eps). A zero-variance channel maps to zeros.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<(Var, ChannelStats<T>)> {
        let sx = self.nodes[x.0].value.shape();
        if sx.len() != 2 || sx[1] == 0 {
            return Err(Error::ShapeMismatch(format!("instance_norm: {sx:?}")));
        }
        let (c, t) = (sx[0], sx[1]);
        let inv_t = T::one() / T::from_usize(t);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); c * t];
        let mut stats = ChannelStats {
            mean: Vec::with_capacity(c),
            std: Vec::with_capacity(c),
        };
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let row = &xd[ch * t..(ch + 1) * t];
            let mean = row.iter().copied().sum::<T>() * inv_t;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                * inv_t;
            let std = (var + eps).sqrt();
            let is = T::one() / std;
            for (o, &v) in out[ch * t..(ch + 1) * t].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            stats.mean.push(mean);
            stats.std.push(std);
            inv_std.push(is);
        }
        let req = self.requires(x);
        let v = self.push(
            Tensor::from_vec(&[c, t], out)?,
            Op::InstanceNorm { x: x.0, inv_std },
            req,
        );
        Ok((v, stats))
    }

    /// β·normalize(x) + α with per-channel α, β (each [C] or [C × 1]).
    pub fn adain(&mut self, x: Var, alpha: Var, beta: Var, eps: T) -> Result<Var> {
        let (norm, _) = self.instance_norm(x, eps)?;
        let scaled = self.scale_rows(norm, beta)?;
        self.add_rows(scaled, alpha)
    }

    // ── broadcasting over rows / width ──

    fn row_vec_len(&self, v: Var, what: &str) -> Result<usize> {
        let s = self.nodes[v.0].value.shape();
        match s {
            [c] => Ok(*c),
            [c, 1] => Ok(*c),
            _ => Err(Error::ShapeMismatch(format!(
                "{what}: expected [C] or [C × 1], got {s:?}"
            ))),
        }
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch(format!("scale_rows input: {sx:?}")));
        }
        let c = self.row_vec_len(s, "scale_rows scale")?;
        if c != sx[0] {
            return Err(Error::ShapeMismatch(format!(
                "scale_rows: {c} scales for {} channels",
                sx[0]
            )));
        }
        let t = sx[1];
        let xd = self.nodes[x.0].value.data();
        let sd = self.nodes[s.0].value.data();
        let mut out = vec![T::zero(); c * t];
        for ch in 0..c {
            let sv = sd[ch];
            for (o, &v) in out[ch * t..(ch + 1) * t].iter_mut().zip(&xd[ch * t..(ch + 1) * t]) {
                *o = sv * v;
            }
        }
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(
            Tensor::from_vec(&sx, out)?,
            Op::ScaleRows { x: x.0, s: s.0 },
            req,
        ))
    }

    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch(format!("add_rows input: {sx:?}")));
        }
        let c = self.row_vec_len(b, "add_rows bias")?;
        if c != sx[0] {
            return Err(Error::ShapeMismatch(format!(
                "add_rows: {c} biases for {} channels",
                sx[0]
            )));
        }
        let t = sx[1];
        let xd = self.nodes[x.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); c * t];
        for ch in 0..c {
            let bv = bd[ch];
            for (o, &v) in out[ch * t..(ch + 1) * t].iter_mut().zip(&xd[ch * t..(ch + 1) * t]) {
                *o = v + bv;
            }
        }
        let req = self.requires(x) || self.requires(b);
        Ok(self.push(
            Tensor::from_vec(&sx, out)?,
            Op::AddRows { x: x.0, b: b.0 },
            req,
        ))
    }

    pub fn broadcast_width(&mut self, x: Var, width: usize) -> Result<Var> {
        let c = self.row_vec_len(x, "broadcast_width input")?;
        if width == 0 {
            return Err(Error::InvalidConfig("broadcast_width: width 0".into()));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); c * width];
        for ch in 0..c {
            out[ch * width..(ch + 1) * width].fill(xd[ch]);
        }
        let req = self.requires(x);
        Ok(self.push(
            Tensor::from_vec(&[c, width], out)?,
            Op::BroadcastWidth { x: x.0, width },
            req,
        ))
    }

    /// Temporal average pool: [C × T] -> [C × 1].
    pub fn mean_width(&mut self, x: Var) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape();
        if sx.len() != 2 || sx[1] == 0 {
            return Err(Error::ShapeMismatch(format!("mean_width: {sx:?}")));
        }
        let (c, t) = (sx[0], sx[1]);
        let inv_t = T::one() / T::from_usize(t);
        let xd = self.nodes[x.0].value.data();
        let out: Vec<T> = (0..c)
            .map(|ch| xd[ch * t..(ch + 1) * t].iter().copied().sum::<T>() * inv_t)
            .collect();
        let req = self.requires(x);
        Ok(self.push(Tensor::from_vec(&[c, 1], out)?, Op::MeanWidth(x.0), req))
    }

    // ── reductions ──

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), req)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let req = self.requires(x);
        self.push(
            Tensor::scalar(s / T::from_usize(n.max(1))),
            Op::MeanAll(x.0),
            req,
        )
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let d = self.nodes[x.0].value.data();
        let m = d.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = d.iter().map(|&v| (v - m).exp()).sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(m + s.ln()), Op::LogSumExp(x.0), req)
    }

    // ── structure ──

    /// Stack along the channel axis; all inputs share the same width.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch("concat_rows: no inputs".into()));
        }
        let width = {
            let s0 = self.nodes[xs[0].0].value.shape();
            if s0.len() != 2 {
                return Err(Error::ShapeMismatch(format!("concat_rows input: {s0:?}")));
            }
            s0[1]
        };
        let mut rows = 0;
        for v in xs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != 2 || s[1] != width {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows: widths differ ({s:?} vs width {width})"
                )));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * width);
        for v in xs {
            out.extend_from_slice(self.nodes[v.0].value.data());
        }
        let req = xs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Tensor::from_vec(&[rows, width], out)?,
            Op::ConcatRows(xs.iter().map(|v| v.0).collect()),
            req,
        ))
    }

    /// Column gather: output column j is input column idx[j]. Backward
    /// scatter-adds, so repeating an index accumulates its gradient.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch(format!("gather_cols input: {sx:?}")));
        }
        let (c, t) = (sx[0], sx[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::ShapeMismatch(format!(
                "gather_cols: index {bad} out of range for width {t}"
            )));
        }
        let w_out = idx.len();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); c * w_out];
        for ch in 0..c {
            let xrow = &xd[ch * t..(ch + 1) * t];
            let orow = &mut out[ch * w_out..(ch + 1) * w_out];
            for (o, &i) in orow.iter_mut().zip(idx) {
                *o = xrow[i];
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            Tensor::from_vec(&[c, w_out], out)?,
            Op::GatherCols {
                x: x.0,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss. Gradients from this call are
    /// added onto whatever previous calls accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward: loss must be scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut pass: Vec<Option<Vec<T>>> = vec![None; n];
        pass[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if pass[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = pass.split_at_mut(i);
            let g: &[T] = hi[0].as_deref().unwrap();
            // Only materialize gradients for inputs on a trainable path.
            let ensure = |lo: &mut [Option<Vec<T>>], id: usize, len: usize| -> bool {
                if !self.nodes[id].requires_grad {
                    return false;
                }
                if lo[id].is_none() {
                    lo[id] = Some(vec![T::zero(); len]);
                }
                true
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for &id in &[*a, *b] {
                        if ensure(lo, id, g.len()) {
                            let buf = lo[id].as_mut().unwrap();
                            for (o, &gv) in buf.iter_mut().zip(g) {
                                *o = *o + gv;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if ensure(lo, *a, g.len()) {
                        let buf = lo[*a].as_mut().unwrap();
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o = *o + gv;
                        }
                    }
                    if ensure(lo, *b, g.len()) {
                        let buf = lo[*b].as_mut().unwrap();
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o = *o - gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if ensure(lo, a, g.len()) {
                        let bd = self.nodes[b].value.data();
                        let buf = lo[a].as_mut().unwrap();
                        for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(bd) {
                            *o = *o + gv * bv;
                        }
                    }
                    if ensure(lo, b, g.len()) {
                        let ad = self.nodes[a].value.data();
                        let buf = lo[b].as_mut().unwrap();
                        for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(ad) {
                            *o = *o + gv * av;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if ensure(lo, a, g.len()) {
                        let bd = self.nodes[b].value.data();
                        let buf = lo[a].as_mut().unwrap();
                        for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(bd) {
                            *o = *o + gv / bv;
                        }
                    }
                    if ensure(lo, b, g.len()) {
                        let ad = self.nodes[a].value.data();
                        let bd = self.nodes[b].value.data();
                        let buf = lo[b].as_mut().unwrap();
                        for (j, (o, &gv)) in buf.iter_mut().zip(g).enumerate() {
                            *o = *o - gv * ad[j] / (bd[j] * bd[j]);
                        }
                    }
                }
                Op::AffineConst { x, scale } => {
                    let (x, scale) = (*x, *scale);
                    if ensure(lo, x, g.len()) {
                        let buf = lo[x].as_mut().unwrap();
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o = *o + scale * gv;
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let (x, slope) = (*x, *slope);
                    if ensure(lo, x, g.len()) {
                        let xd = self.nodes[x].value.data();
                        let buf = lo[x].as_mut().unwrap();
                        for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                            *o = *o + if xv > T::zero() { gv } else { slope * gv };
                        }
                    }
                }
                Op::Abs(x) => {
                    let x = *x;
                    if ensure(lo, x, g.len()) {
                        let xd = self.nodes[x].value.data();
                        let buf = lo[x].as_mut().unwrap();
                        for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                            let s = if xv > T::zero() {
                                T::one()
                            } else if xv < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            *o = *o + gv * s;
                        }
                    }
                }
                Op::Softplus(x) => {
                    let x = *x;
                    if ensure(lo, x, g.len()) {
                        let xd = self.nodes[x].value.data();
                        let buf = lo[x].as_mut().unwrap();
                        for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                            let sig = T::one() / (T::one() + (-xv).exp());
                            *o = *o + gv * sig;
                        }
                    }
                }
                Op::Exp(x) => {
                    let x = *x;
                    if ensure(lo, x, g.len()) {
                        let yd = self.nodes[i].value.data();
                        let buf = lo[x].as_mut().unwrap();
                        for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(yd) {
                            *o = *o + gv * yv;
                        }
                    }
                }
                Op::Ln(x) => {
                    let x = *x;
                    if ensure(lo, x, g.len()) {
                        let xd = self.nodes[x].value.data();
                        let buf = lo[x].as_mut().unwrap();
                        for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                            *o = *o + gv / xv;
                        }
                    }
                }
                Op::Sqrt(x) => {
                    let x = *x;
                    if ensure(lo, x, g.len()) {
                        let yd = self.nodes[i].value.data();
                        let half = T::from_f64(0.5);
                        let buf = lo[x].as_mut().unwrap();
                        for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(yd) {
                            *o = *o + gv * half / yv;
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = self.nodes[a].value.shape();
                        (s[0], s[1])
                    };
                    let nn = self.nodes[b].value.shape()[1];
                    if ensure(lo, a, m * k) {
                        let bd = self.nodes[b].value.data();
                        let buf = lo[a].as_mut().unwrap();
                        for i2 in 0..m {
                            let grow = &g[i2 * nn..(i2 + 1) * nn];
                            for kk in 0..k {
                                let brow = &bd[kk * nn..(kk + 1) * nn];
                                let mut acc = T::zero();
                                for (&gv, &bv) in grow.iter().zip(brow) {
                                    acc = acc + gv * bv;
                                }
                                buf[i2 * k + kk] = buf[i2 * k + kk] + acc;
                            }
                        }
                    }
                    if ensure(lo, b, k * nn) {
                        let ad = self.nodes[a].value.data();
                        let buf = lo[b].as_mut().unwrap();
                        for i2 in 0..m {
                            let grow = &g[i2 * nn..(i2 + 1) * nn];
                            for kk in 0..k {
                                let av = ad[i2 * k + kk];
                                let brow = &mut buf[kk * nn..(kk + 1) * nn];
                                for (o, &gv) in brow.iter_mut().zip(grow) {
                                    *o = *o + av * gv;
                                }
                            }
                        }
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    dilation,
                    padding,
                } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (stride, dilation, padding) = (*stride, *dilation, *padding);
                    let (c_in, t_in) = {
                        let s = self.nodes[x].value.shape();
                        (s[0], s[1])
                    };
                    let (c_out, k) = {
                        let s = self.nodes[w].value.shape();
                        (s[0], s[2])
                    };
                    let t_out = self.nodes[i].value.shape()[1];
                    if ensure(lo, b, c_out) {
                        let buf = lo[b].as_mut().unwrap();
                        for (o, gb) in buf.iter_mut().zip(g.chunks_exact(t_out)) {
                            *o = *o + gb.iter().copied().sum::<T>();
                        }
                    }
                    let want_x = self.nodes[x].requires_grad;
                    let want_w = self.nodes[w].requires_grad;
                    if want_x {
                        ensure(lo, x, c_in * t_in);
                    }
                    if want_w {
                        ensure(lo, w, c_out * c_in * k);
                    }
                    if want_x || want_w {
                        let xd = self.nodes[x].value.data();
                        let wd = self.nodes[w].value.data();
                        for o in 0..c_out {
                            let grow = &g[o * t_out..(o + 1) * t_out];
                            for ci in 0..c_in {
                                for j in 0..k {
                                    let off = (j * dilation) as isize - padding as isize;
                                    if stride == 1 {
                                        let t0 = (-off).max(0) as usize;
                                        let t1 =
                                            ((t_in as isize - off).max(0) as usize).min(t_out);
                                        if t0 >= t1 {
                                            continue;
                                        }
                                        let u0 = (t0 as isize + off) as usize;
                                        if want_w {
                                            let xs = &xd[ci * t_in + u0..];
                                            let mut acc = T::zero();
                                            for (&gv, &xv) in grow[t0..t1].iter().zip(xs) {
                                                acc = acc + gv * xv;
                                            }
                                            let wb = lo[w].as_mut().unwrap();
                                            let wi = (o * c_in + ci) * k + j;
                                            wb[wi] = wb[wi] + acc;
                                        }
                                        if want_x {
                                            let wv = wd[(o * c_in + ci) * k + j];
                                            let xb = lo[x].as_mut().unwrap();
                                            let xs = &mut xb[ci * t_in + u0..];
                                            for (xg, &gv) in xs.iter_mut().zip(&grow[t0..t1]) {
                                                *xg = *xg + wv * gv;
                                            }
                                        }
                                    } else {
                                        for (t, &gv) in grow.iter().enumerate() {
                                            let u = (t * stride) as isize + off;
                                            if u < 0 || u as usize >= t_in {
                                                continue;
                                            }
                                            let u = u as usize;
                                            if want_w {
                                                let wb = lo[w].as_mut().unwrap();
                                                let wi = (o * c_in + ci) * k + j;
                                                wb[wi] = wb[wi] + gv * xd[ci * t_in + u];
                                            }
                                            if want_x {
                                                let wv = wd[(o * c_in + ci) * k + j];
                                                let xb = lo[x].as_mut().unwrap();
                                                xb[ci * t_in + u] = xb[ci * t_in + u] + wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    let x = *x;
                    if ensure(lo, x, g.len()) {
                        let yd = self.nodes[i].value.data();
                        let c = inv_std.len();
                        let t = g.len() / c;
                        let inv_t = T::one() / T::from_usize(t);
                        let buf = lo[x].as_mut().unwrap();
                        for ch in 0..c {
                            let gr = &g[ch * t..(ch + 1) * t];
                            let yr = &yd[ch * t..(ch + 1) * t];
                            let g_mean = gr.iter().copied().sum::<T>() * inv_t;
                            let gy_mean = gr
                                .iter()
                                .zip(yr)
                                .map(|(&gv, &yv)| gv * yv)
                                .sum::<T>()
                                * inv_t;
                            let is = inv_std[ch];
                            let br = &mut buf[ch * t..(ch + 1) * t];
                            for ((o, &gv), &yv) in br.iter_mut().zip(gr).zip(yr) {
                                *o = *o + is * (gv - g_mean - yv * gy_mean);
                            }
                        }
                    }
                }
                Op::ScaleRows { x, s } => {
                    let (x, s) = (*x, *s);
                    let c = self.nodes[s].value.len();
                    let t = g.len() / c;
                    if ensure(lo, x, g.len()) {
                        let sd = self.nodes[s].value.data();
                        let buf = lo[x].as_mut().unwrap();
                        for ch in 0..c {
                            let sv = sd[ch];
                            for (o, &gv) in buf[ch * t..(ch + 1) * t]
                                .iter_mut()
                                .zip(&g[ch * t..(ch + 1) * t])
                            {
                                *o = *o + sv * gv;
                            }
                        }
                    }
                    if ensure(lo, s, c) {
                        let xd = self.nodes[x].value.data();
                        let buf = lo[s].as_mut().unwrap();
                        for ch in 0..c {
                            let mut acc = T::zero();
                            for (&gv, &xv) in g[ch * t..(ch + 1) * t]
                                .iter()
                                .zip(&xd[ch * t..(ch + 1) * t])
                            {
                                acc = acc + gv * xv;
                            }
                            buf[ch] = buf[ch] + acc;
                        }
                    }
                }
                Op::AddRows { x, b } => {
                    let (x, b) = (*x, *b);
                    let c = self.nodes[b].value.len();
                    let t = g.len() / c;
                    if ensure(lo, x, g.len()) {
                        let buf = lo[x].as_mut().unwrap();
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o = *o + gv;
                        }
                    }
                    if ensure(lo, b, c) {
                        let buf = lo[b].as_mut().unwrap();
                        for (ch, o) in buf.iter_mut().enumerate() {
                            *o = *o + g[ch * t..(ch + 1) * t].iter().copied().sum::<T>();
                        }
                    }
                }
                Op::BroadcastWidth { x, width } => {
                    let (x, width) = (*x, *width);
                    let c = self.nodes[x].value.len();
                    if ensure(lo, x, c) {
                        let buf = lo[x].as_mut().unwrap();
                        for (ch, o) in buf.iter_mut().enumerate() {
                            *o = *o
                                + g[ch * width..(ch + 1) * width]
                                    .iter()
                                    .copied()
                                    .sum::<T>();
                        }
                    }
                }
                Op::MeanWidth(x) => {
                    let x = *x;
                    let (c, t) = {
                        let s = self.nodes[x].value.shape();
                        (s[0], s[1])
                    };
                    if ensure(lo, x, c * t) {
                        let inv_t = T::one() / T::from_usize(t);
                        let buf = lo[x].as_mut().unwrap();
                        for ch in 0..c {
                            let gv = g[ch] * inv_t;
                            for o in &mut buf[ch * t..(ch + 1) * t] {
                                *o = *o + gv;
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let n2 = self.nodes[x].value.len();
                    if ensure(lo, x, n2) {
                        let gv = g[0];
                        let buf = lo[x].as_mut().unwrap();
                        for o in buf.iter_mut() {
                            *o = *o + gv;
                        }
                    }
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let n2 = self.nodes[x].value.len();
                    if ensure(lo, x, n2) {
                        let gv = g[0] / T::from_usize(n2.max(1));
                        let buf = lo[x].as_mut().unwrap();
                        for o in buf.iter_mut() {
                            *o = *o + gv;
                        }
                    }
                }
                Op::LogSumExp(x) => {
                    let x = *x;
                    let n2 = self.nodes[x].value.len();
                    if ensure(lo, x, n2) {
                        let y = self.nodes[i].value.item();
                        let xd = self.nodes[x].value.data();
                        let gv = g[0];
                        let buf = lo[x].as_mut().unwrap();
                        for (o, &xv) in buf.iter_mut().zip(xd) {
                            *o = *o + gv * (xv - y).exp();
                        }
                    }
                }
                Op::ConcatRows(xs) => {
                    let xs = xs.clone();
                    let mut offset = 0;
                    for id in xs {
                        let len = self.nodes[id].value.len();
                        if ensure(lo, id, len) {
                            let buf = lo[id].as_mut().unwrap();
                            for (o, &gv) in buf.iter_mut().zip(&g[offset..offset + len]) {
                                *o = *o + gv;
                            }
                        }
                        offset += len;
                    }
                }
                Op::GatherCols { x, idx } => {
                    let x = *x;
                    let (c, t) = {
                        let s = self.nodes[x].value.shape();
                        (s[0], s[1])
                    };
                    let w_out = idx.len();
                    if ensure(lo, x, c * t) {
                        let idx = idx.clone();
                        let buf = lo[x].as_mut().unwrap();
                        for ch in 0..c {
                            let gr = &g[ch * w_out..(ch + 1) * w_out];
                            for (j, &src) in idx.iter().enumerate() {
                                buf[ch * t + src] = buf[ch * t + src] + gr[j];
                            }
                        }
                    }
                }
            }
        }

        // Fold this pass into the persistent accumulators.
        for (node, p) in self.nodes.iter_mut().zip(pass) {
            if let Some(pg) = p {
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (o, v) in acc.iter_mut().zip(pg) {
                            *o = *o + v;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}
