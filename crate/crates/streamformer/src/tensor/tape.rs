//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations append records to a [`Tape`]; records are replayed once, in
//! reverse, to accumulate gradients. The tape is append-only and ids are
//! handed out in topological order, so the reverse sweep visits each record
//! exactly once and is bit-for-bit deterministic across runs.
//!
//! Gradient flow is opt-in per leaf. `stop_gradient` re-enters a value as a
//! node that never propagates backward, which is what makes chunk-cache
//! severance an assertable property rather than a convention.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    StopGrad,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: S },
    AddRowBias { x: usize, bias: usize },
    Relu { x: usize },
    Gelu { x: usize },
    Exp { x: usize },
    Sum { x: usize },
    MeanLast { x: usize },
    VarLast { x: usize },
    // Masked probabilities are exactly zero in the stored output, which is
    // all the pullback needs; the mask itself is not retained.
    SoftmaxLast { x: usize },
    LogSoftmaxLast { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<S>, rstd: Vec<S> },
    Conv1d { x: usize, kernel: usize, bias: usize },
    Conv2d { x: usize, kernel: usize, bias: usize },
    MaxPoolTime { x: usize, src: Vec<usize> },
    MaxPoolFreq { x: usize, src: Vec<usize> },
    ConcatRows { a: usize, b: usize },
    ConcatCols { a: usize, b: usize },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Reshape { x: usize },
    NllFromLogProbs { logp: usize, labels: Arc<Vec<usize>> },
}

impl<S> Op<S> {
    /// Elements of saved-for-backward state, for memory accounting.
    fn aux_elems(&self) -> usize {
        match self {
            Op::LayerNorm { mean, rstd, .. } => mean.len() + rstd.len(),
            Op::MaxPoolTime { src, .. } | Op::MaxPoolFreq { src, .. } => src.len(),
            _ => 0,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of executed primitives plus their results.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    live_elems: usize,
    peak_elems: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            live_elems: 0,
            peak_elems: 0,
        }
    }

    /// Number of records on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// High-water mark of stored value + saved-state elements. Proxy for
    /// activation memory in the chunked-training tests.
    pub fn peak_elements(&self) -> usize {
        self.peak_elems
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// `None` before `backward` or for nodes outside gradient flow.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref().map(|data| {
                Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()).unwrap()
            })
        })
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.live_elems += value.numel() + op.aux_elems();
        self.peak_elems = self.peak_elems.max(self.live_elems);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never participates in gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Forward identity whose backward contributes exactly nothing to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGrad, false)
    }

    // ---- binary / elementwise ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![m, n], data).unwrap(),
            Op::Matmul { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![c, r], data).unwrap(),
            Op::Transpose { x: x.0 },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Add { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Mul { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let data: Vec<S> = self.nodes[x.0].value.data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x.0]);
        self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Scale { x: x.0, c },
            rg,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// `x[T,d] + bias[d]`, bias broadcast over rows. The only broadcast in
    /// the crate beyond tensor-vs-scalar.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (t, d) = (sx[0], sx[1]);
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut data = Vec::with_capacity(t * d);
        for r in 0..t {
            for j in 0..d {
                data.push(xv[r * d + j] + bv[j]);
            }
        }
        let rg = self.needs(&[x.0, bias.0]);
        Ok(self.push(
            Tensor::new(vec![t, d], data).unwrap(),
            Op::AddRowBias {
                x: x.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<S> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| if v > S::ZERO { v } else { S::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x.0]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu { x: x.0 }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<S> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| gelu_fwd(v))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x.0]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Gelu { x: x.0 }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data: Vec<S> = self.nodes[x.0].value.data().iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x.0]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Exp { x: x.0 }, rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let rg = self.needs(&[x.0]);
        self.push(Tensor::scalar(acc), Op::Sum { x: x.0 }, rg)
    }

    /// Mean over the last axis; a rank-1 input yields shape `[1]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::config("mean_last", "rank-0 input"))?;
        if n == 0 {
            return Err(Error::config("mean_last", "empty last axis"));
        }
        let rows = self.nodes[x.0].value.numel() / n;
        let xv = self.nodes[x.0].value.data();
        let inv = S::from_f64(1.0 / n as f64);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = S::ZERO;
            for j in 0..n {
                acc += xv[r * n + j];
            }
            data.push(acc * inv);
        }
        let out_shape = reduced_shape(&s);
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::MeanLast { x: x.0 },
            rg,
        ))
    }

    /// Population variance over the last axis.
    pub fn var_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::config("var_last", "rank-0 input"))?;
        if n == 0 {
            return Err(Error::config("var_last", "empty last axis"));
        }
        let rows = self.nodes[x.0].value.numel() / n;
        let xv = self.nodes[x.0].value.data();
        let inv = S::from_f64(1.0 / n as f64);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut mean = S::ZERO;
            for j in 0..n {
                mean += xv[r * n + j];
            }
            mean = mean * inv;
            let mut acc = S::ZERO;
            for j in 0..n {
                let d = xv[r * n + j] - mean;
                acc += d * d;
            }
            data.push(acc * inv);
        }
        let out_shape = reduced_shape(&s);
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::VarLast { x: x.0 },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis, numerically stabilized by
    /// row-max subtraction. Masked positions get probability exactly zero;
    /// they are excluded from the max and the normalizer rather than pushed
    /// through an additive sentinel, so no non-finite intermediate exists at
    /// any precision. A fully masked row is an error.
    pub fn softmax_last(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::config("softmax", "rank-0 input"))?;
        let rows = self.nodes[x.0].value.numel() / n.max(1);
        if let Some(m) = mask {
            if m.rows() != rows || m.cols() != n {
                return Err(Error::ShapeMismatch {
                    op: "softmax_last",
                    lhs: s,
                    rhs: vec![m.rows(), m.cols()],
                });
            }
        }
        let xv = self.nodes[x.0].value.data();
        let mut data = vec![S::ZERO; rows * n];
        for r in 0..rows {
            let visible = |j: usize| mask.is_none_or(|m| m.get(r, j));
            let mut max: Option<S> = None;
            for j in 0..n {
                if visible(j) {
                    let v = xv[r * n + j];
                    max = Some(match max {
                        Some(m) => m.maximum(v),
                        None => v,
                    });
                }
            }
            let max = max.ok_or(Error::DegenerateMaskRow { row: r })?;
            let mut denom = S::ZERO;
            for j in 0..n {
                if visible(j) {
                    let e = (xv[r * n + j] - max).exp();
                    data[r * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                if visible(j) {
                    data[r * n + j] = data[r * n + j] / denom;
                }
            }
        }
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(s, data).unwrap(),
            Op::SoftmaxLast { x: x.0 },
            rg,
        ))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::config("log_softmax", "rank-0 input"))?;
        if n == 0 {
            return Err(Error::config("log_softmax", "empty last axis"));
        }
        let rows = self.nodes[x.0].value.numel() / n;
        let xv = self.nodes[x.0].value.data();
        let mut data = vec![S::ZERO; rows * n];
        for r in 0..rows {
            let mut max = xv[r * n];
            for j in 1..n {
                max = max.maximum(xv[r * n + j]);
            }
            let mut denom = S::ZERO;
            for j in 0..n {
                denom += (xv[r * n + j] - max).exp();
            }
            let lse = max + denom.ln();
            for j in 0..n {
                data[r * n + j] = xv[r * n + j] - lse;
            }
        }
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(s, data).unwrap(),
            Op::LogSoftmaxLast { x: x.0 },
            rg,
        ))
    }

    /// Per-row layer normalization of `x[T,d]` with affine gain/bias `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: vec![],
            });
        }
        let (t, d) = (s[0], s[1]);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut data = vec![S::ZERO; t * d];
        let mut means = Vec::with_capacity(t);
        let mut rstds = Vec::with_capacity(t);
        for r in 0..t {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rstd = S::ONE / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Tensor::new(vec![t, d], data).unwrap(),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    // ---- convolutional -------------------------------------------------------

    /// 1-D temporal convolution with same padding.
    /// `x[T,d_in] * kernel[k,d_in,d_out] + bias[d_out] -> [T,d_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 2 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (t, d_in) = (sx[0], sx[1]);
        let (k, d_out) = (sk[0], sk[2]);
        if k % 2 == 0 {
            return Err(Error::config(
                "conv1d",
                format!("kernel width must be odd for same padding, got {k}"),
            ));
        }
        if self.shape(bias) != [d_out] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: vec![d_out],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let half = k / 2;
        let xv = self.nodes[x.0].value.data();
        let kv = self.nodes[kernel.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut data = vec![S::ZERO; t * d_out];
        for tt in 0..t {
            let out_row = &mut data[tt * d_out..(tt + 1) * d_out];
            out_row.copy_from_slice(bv);
            for tap in 0..k {
                let src = tt as isize + tap as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let x_row = &xv[src as usize * d_in..(src as usize + 1) * d_in];
                for i in 0..d_in {
                    let xi = x_row[i];
                    let w_row = &kv[(tap * d_in + i) * d_out..(tap * d_in + i + 1) * d_out];
                    for o in 0..d_out {
                        out_row[o] += xi * w_row[o];
                    }
                }
            }
        }
        let rg = self.needs(&[x.0, kernel.0, bias.0]);
        Ok(self.push(
            Tensor::new(vec![t, d_out], data).unwrap(),
            Op::Conv1d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    /// 2-D convolution over (time, frequency) with same padding, stride 1.
    /// `x[T,F,c_in] * kernel[kh,kw,c_in,c_out] + bias[c_out] -> [T,F,c_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (t, f, c_in) = (sx[0], sx[1], sx[2]);
        let (kh, kw, c_out) = (sk[0], sk[1], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(
                "conv2d",
                format!("kernel extents must be odd for same padding, got {kh}x{kw}"),
            ));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![c_out],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (hh, hw) = (kh / 2, kw / 2);
        let xv = self.nodes[x.0].value.data();
        let kv = self.nodes[kernel.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut data = vec![S::ZERO; t * f * c_out];
        for tt in 0..t {
            for ff in 0..f {
                let out = &mut data[(tt * f + ff) * c_out..(tt * f + ff + 1) * c_out];
                out.copy_from_slice(bv);
                for dt in 0..kh {
                    let st = tt as isize + dt as isize - hh as isize;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    for dw in 0..kw {
                        let sf = ff as isize + dw as isize - hw as isize;
                        if sf < 0 || sf >= f as isize {
                            continue;
                        }
                        let x_px = &xv[(st as usize * f + sf as usize) * c_in..][..c_in];
                        for i in 0..c_in {
                            let xi = x_px[i];
                            let w = &kv[((dt * kw + dw) * c_in + i) * c_out..][..c_out];
                            for o in 0..c_out {
                                out[o] += xi * w[o];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[x.0, kernel.0, bias.0]);
        Ok(self.push(
            Tensor::new(vec![t, f, c_out], data).unwrap(),
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    /// Max pooling over the time axis by a factor of 2 (floor); ties resolve
    /// to the earlier frame for determinism.
    pub fn maxpool_time(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "maxpool_time",
                lhs: s,
                rhs: vec![],
            });
        }
        let (t, f, c) = (s[0], s[1], s[2]);
        let t_out = t / 2;
        if t_out == 0 {
            return Err(Error::config(
                "maxpool_time",
                format!("time axis {t} collapses to zero after pooling"),
            ));
        }
        let xv = self.nodes[x.0].value.data();
        let mut data = vec![S::ZERO; t_out * f * c];
        let mut src = vec![0usize; t_out * f * c];
        for tt in 0..t_out {
            for ff in 0..f {
                for cc in 0..c {
                    let i0 = ((2 * tt) * f + ff) * c + cc;
                    let i1 = ((2 * tt + 1) * f + ff) * c + cc;
                    let o = (tt * f + ff) * c + cc;
                    if xv[i1] > xv[i0] {
                        data[o] = xv[i1];
                        src[o] = i1;
                    } else {
                        data[o] = xv[i0];
                        src[o] = i0;
                    }
                }
            }
        }
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![t_out, f, c], data).unwrap(),
            Op::MaxPoolTime { x: x.0, src },
            rg,
        ))
    }

    /// Max pooling over the frequency axis by a factor of 2 (floor).
    pub fn maxpool_freq(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "maxpool_freq",
                lhs: s,
                rhs: vec![],
            });
        }
        let (t, f, c) = (s[0], s[1], s[2]);
        let f_out = f / 2;
        if f_out == 0 {
            return Err(Error::config(
                "maxpool_freq",
                format!("frequency axis {f} collapses to zero after pooling"),
            ));
        }
        let xv = self.nodes[x.0].value.data();
        let mut data = vec![S::ZERO; t * f_out * c];
        let mut src = vec![0usize; t * f_out * c];
        for tt in 0..t {
            for ff in 0..f_out {
                for cc in 0..c {
                    let i0 = (tt * f + 2 * ff) * c + cc;
                    let i1 = (tt * f + 2 * ff + 1) * c + cc;
                    let o = (tt * f_out + ff) * c + cc;
                    if xv[i1] > xv[i0] {
                        data[o] = xv[i1];
                        src[o] = i1;
                    } else {
                        data[o] = xv[i0];
                        src[o] = i0;
                    }
                }
            }
        }
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![t, f_out, c], data).unwrap(),
            Op::MaxPoolFreq { x: x.0, src },
            rg,
        ))
    }

    // ---- concatenation / slicing / shape --------------------------------------

    /// Concatenation along the time (row) axis; either operand may have zero
    /// rows, making the empty tensor the neutral element.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "concat_time",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut data = Vec::with_capacity((sa[0] + sb[0]) * sa[1]);
        data.extend_from_slice(self.nodes[a.0].value.data());
        data.extend_from_slice(self.nodes[b.0].value.data());
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![sa[0] + sb[0], sa[1]], data).unwrap(),
            Op::ConcatRows { a: a.0, b: b.0 },
            rg,
        ))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (t, ca, cb) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut data = Vec::with_capacity(t * (ca + cb));
        for r in 0..t {
            data.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![t, ca + cb], data).unwrap(),
            Op::ConcatCols { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::config(
                "slice_rows",
                format!("rows [{start}, {}) out of bounds for shape {s:?}", start + len),
            ));
        }
        let c = s[1];
        let data = self.nodes[x.0].value.data()[start * c..(start + len) * c].to_vec();
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![len, c], data).unwrap(),
            Op::SliceRows { x: x.0, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::config(
                "slice_cols",
                format!("cols [{start}, {}) out of bounds for shape {s:?}", start + len),
            ));
        }
        let (t, c) = (s[0], s[1]);
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(t * len);
        for r in 0..t {
            data.extend_from_slice(&xv[r * c + start..r * c + start + len]);
        }
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![t, len], data).unwrap(),
            Op::SliceCols { x: x.0, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].value.data().to_vec();
        let rg = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Reshape { x: x.0 },
            rg,
        ))
    }

    /// Mean over frames of the negative log-probability of each frame's
    /// label: `logp[T,K]`, `labels[T]` -> `[1]`.
    pub fn nll_from_log_probs(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "nll_from_log_probs",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (t, k) = (s[0], s[1]);
        if t == 0 {
            return Err(Error::config("nll_from_log_probs", "empty frame axis"));
        }
        for (frame, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: k,
                    frame,
                });
            }
        }
        let xv = self.nodes[logp.0].value.data();
        let mut acc = S::ZERO;
        for (frame, &label) in labels.iter().enumerate() {
            acc += xv[frame * k + label];
        }
        let value = -(acc * S::from_f64(1.0 / t as f64));
        let rg = self.needs(&[logp.0]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::NllFromLogProbs {
                logp: logp.0,
                labels: Arc::new(labels.to_vec()),
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------------

    /// Reverse accumulation from a scalar loss. Every gradient-enabled node
    /// receives a gradient buffer (zeros if no path reaches it), each tape
    /// record is visited exactly once, and repeated calls on the same tape
    /// produce bitwise-identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![S::ZERO; n.value.numel()])
                } else {
                    None
                }
            })
            .collect();
        if self.grads[loss.0].is_none() {
            // Loss outside gradient flow: all gradients are zero by definition.
            return Ok(());
        }
        self.grads[loss.0].as_mut().unwrap()[0] = S::ONE;

        for id in (0..=loss.0).rev() {
            let g = match &self.grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.pull(id, &g);
        }
        Ok(())
    }

    fn acc(&mut self, target: usize, update: impl FnOnce(&mut [S])) {
        if let Some(buf) = self.grads[target].as_mut() {
            update(buf);
        }
    }

    fn pull(&mut self, id: usize, g: &[S]) {
        // Borrow values before mutating grad buffers.
        macro_rules! val {
            ($i:expr) => {
                self.nodes[$i].value.data().to_vec()
            };
        }
        match &self.nodes[id].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a].value.shape()[0];
                let k = self.nodes[a].value.shape()[1];
                let n = self.nodes[b].value.shape()[1];
                if self.grads[a].is_some() {
                    let bv = val!(b);
                    let da = matmul_nt(g, &bv, m, n, k);
                    self.acc(a, |buf| add_into(buf, &da));
                }
                if self.grads[b].is_some() {
                    let av = val!(a);
                    let db = matmul_tn(&av, g, m, k, n);
                    self.acc(b, |buf| add_into(buf, &db));
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let (r, c) = {
                    let s = self.nodes[x].value.shape();
                    (s[0], s[1])
                };
                self.acc(x, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, |buf| add_into(buf, g));
                self.acc(b, |buf| add_into(buf, g));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.grads[a].is_some() {
                    let bv = val!(b);
                    self.acc(a, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * bv[i];
                        }
                    });
                }
                if self.grads[b].is_some() {
                    let av = val!(a);
                    self.acc(b, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.acc(x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * c;
                    }
                });
            }
            Op::AddRowBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let d = self.nodes[bias].value.numel();
                self.acc(x, |buf| add_into(buf, g));
                self.acc(bias, |buf| {
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % d] += gv;
                    }
                });
            }
            Op::Relu { x } => {
                let x = *x;
                if self.grads[x].is_some() {
                    let xv = val!(x);
                    self.acc(x, |buf| {
                        for i in 0..buf.len() {
                            if xv[i] > S::ZERO {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.grads[x].is_some() {
                    let xv = val!(x);
                    self.acc(x, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * gelu_bwd(xv[i]);
                        }
                    });
                }
            }
            Op::Exp { x } => {
                let x = *x;
                if self.grads[x].is_some() {
                    let yv = val!(id);
                    self.acc(x, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * yv[i];
                        }
                    });
                }
            }
            Op::Sum { x } => {
                let x = *x;
                let gv = g[0];
                self.acc(x, |buf| {
                    for v in buf.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::MeanLast { x } => {
                let x = *x;
                let n = *self.nodes[x].value.shape().last().unwrap();
                let inv = S::from_f64(1.0 / n as f64);
                self.acc(x, |buf| {
                    for (i, v) in buf.iter_mut().enumerate() {
                        *v += g[i / n] * inv;
                    }
                });
            }
            Op::VarLast { x } => {
                let x = *x;
                let n = *self.nodes[x].value.shape().last().unwrap();
                let inv = S::from_f64(1.0 / n as f64);
                let two = S::from_f64(2.0);
                if self.grads[x].is_some() {
                    let xv = val!(x);
                    let rows = xv.len() / n;
                    self.acc(x, |buf| {
                        for r in 0..rows {
                            let mut mean = S::ZERO;
                            for j in 0..n {
                                mean += xv[r * n + j];
                            }
                            mean = mean * inv;
                            for j in 0..n {
                                buf[r * n + j] += g[r] * two * (xv[r * n + j] - mean) * inv;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxLast { x } => {
                let x = *x;
                if self.grads[x].is_some() {
                    let pv = val!(id);
                    let n = *self.nodes[id].value.shape().last().unwrap();
                    let rows = pv.len() / n;
                    self.acc(x, |buf| {
                        for r in 0..rows {
                            let mut dot = S::ZERO;
                            for j in 0..n {
                                dot += g[r * n + j] * pv[r * n + j];
                            }
                            for j in 0..n {
                                buf[r * n + j] += pv[r * n + j] * (g[r * n + j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmaxLast { x } => {
                let x = *x;
                if self.grads[x].is_some() {
                    let yv = val!(id);
                    let n = *self.nodes[id].value.shape().last().unwrap();
                    let rows = yv.len() / n;
                    self.acc(x, |buf| {
                        for r in 0..rows {
                            let mut gsum = S::ZERO;
                            for j in 0..n {
                                gsum += g[r * n + j];
                            }
                            for j in 0..n {
                                buf[r * n + j] += g[r * n + j] - yv[r * n + j].exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let mean = mean.clone();
                let rstd = rstd.clone();
                let d = self.nodes[gain].value.numel();
                let t = mean.len();
                let xv = val!(x);
                let gv = val!(gain);
                let inv_d = S::from_f64(1.0 / d as f64);
                if self.grads[x].is_some() {
                    self.acc(x, |buf| {
                        for r in 0..t {
                            let mut gh_mean = S::ZERO;
                            let mut ghx_mean = S::ZERO;
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                                let gh = g[r * d + j] * gv[j];
                                gh_mean += gh;
                                ghx_mean += gh * xhat;
                            }
                            gh_mean = gh_mean * inv_d;
                            ghx_mean = ghx_mean * inv_d;
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                                let gh = g[r * d + j] * gv[j];
                                buf[r * d + j] += rstd[r] * (gh - gh_mean - xhat * ghx_mean);
                            }
                        }
                    });
                }
                if self.grads[gain].is_some() {
                    self.acc(gain, |buf| {
                        for r in 0..t {
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                                buf[j] += g[r * d + j] * xhat;
                            }
                        }
                    });
                }
                self.acc(bias, |buf| {
                    for r in 0..t {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel, bias } => {
                let (x, kernel, bias) = (*x, *kernel, *bias);
                let (t, d_in) = {
                    let s = self.nodes[x].value.shape();
                    (s[0], s[1])
                };
                let (k, d_out) = {
                    let s = self.nodes[kernel].value.shape();
                    (s[0], s[2])
                };
                let half = k / 2;
                if self.grads[x].is_some() {
                    let kv = val!(kernel);
                    self.acc(x, |buf| {
                        for tt in 0..t {
                            let g_row = &g[tt * d_out..(tt + 1) * d_out];
                            for tap in 0..k {
                                let src = tt as isize + tap as isize - half as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                for i in 0..d_in {
                                    let w = &kv[(tap * d_in + i) * d_out..][..d_out];
                                    let mut acc = S::ZERO;
                                    for o in 0..d_out {
                                        acc += g_row[o] * w[o];
                                    }
                                    buf[src as usize * d_in + i] += acc;
                                }
                            }
                        }
                    });
                }
                if self.grads[kernel].is_some() {
                    let xv = val!(x);
                    self.acc(kernel, |buf| {
                        for tt in 0..t {
                            let g_row = &g[tt * d_out..(tt + 1) * d_out];
                            for tap in 0..k {
                                let src = tt as isize + tap as isize - half as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                for i in 0..d_in {
                                    let xi = xv[src as usize * d_in + i];
                                    let w = &mut buf[(tap * d_in + i) * d_out..][..d_out];
                                    for o in 0..d_out {
                                        w[o] += xi * g_row[o];
                                    }
                                }
                            }
                        }
                    });
                }
                self.acc(bias, |buf| {
                    for tt in 0..t {
                        for o in 0..d_out {
                            buf[o] += g[tt * d_out + o];
                        }
                    }
                });
            }
            Op::Conv2d { x, kernel, bias } => {
                let (x, kernel, bias) = (*x, *kernel, *bias);
                let (t, f, c_in) = {
                    let s = self.nodes[x].value.shape();
                    (s[0], s[1], s[2])
                };
                let (kh, kw, c_out) = {
                    let s = self.nodes[kernel].value.shape();
                    (s[0], s[1], s[3])
                };
                let (hh, hw) = (kh / 2, kw / 2);
                if self.grads[x].is_some() {
                    let kv = val!(kernel);
                    self.acc(x, |buf| {
                        for tt in 0..t {
                            for ff in 0..f {
                                let g_px = &g[(tt * f + ff) * c_out..][..c_out];
                                for dt in 0..kh {
                                    let st = tt as isize + dt as isize - hh as isize;
                                    if st < 0 || st >= t as isize {
                                        continue;
                                    }
                                    for dw in 0..kw {
                                        let sf = ff as isize + dw as isize - hw as isize;
                                        if sf < 0 || sf >= f as isize {
                                            continue;
                                        }
                                        for i in 0..c_in {
                                            let w = &kv[((dt * kw + dw) * c_in + i) * c_out..][..c_out];
                                            let mut acc = S::ZERO;
                                            for o in 0..c_out {
                                                acc += g_px[o] * w[o];
                                            }
                                            buf[(st as usize * f + sf as usize) * c_in + i] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if self.grads[kernel].is_some() {
                    let xv = val!(x);
                    self.acc(kernel, |buf| {
                        for tt in 0..t {
                            for ff in 0..f {
                                let g_px = &g[(tt * f + ff) * c_out..][..c_out];
                                for dt in 0..kh {
                                    let st = tt as isize + dt as isize - hh as isize;
                                    if st < 0 || st >= t as isize {
                                        continue;
                                    }
                                    for dw in 0..kw {
                                        let sf = ff as isize + dw as isize - hw as isize;
                                        if sf < 0 || sf >= f as isize {
                                            continue;
                                        }
                                        for i in 0..c_in {
                                            let xi = xv[(st as usize * f + sf as usize) * c_in + i];
                                            let w = &mut buf[((dt * kw + dw) * c_in + i) * c_out..]
                                                [..c_out];
                                            for o in 0..c_out {
                                                w[o] += xi * g_px[o];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                self.acc(bias, |buf| {
                    for px in 0..t * f {
                        for o in 0..c_out {
                            buf[o] += g[px * c_out + o];
                        }
                    }
                });
            }
            Op::MaxPoolTime { x, src } | Op::MaxPoolFreq { x, src } => {
                let x = *x;
                let src = src.clone();
                self.acc(x, |buf| {
                    for (o, &s_idx) in src.iter().enumerate() {
                        buf[s_idx] += g[o];
                    }
                });
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let na = self.nodes[a].value.numel();
                self.acc(a, |buf| add_into(buf, &g[..na]));
                self.acc(b, |buf| add_into(buf, &g[na..]));
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let (t, ca) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let cb = self.nodes[b].value.shape()[1];
                let cols = ca + cb;
                self.acc(a, |buf| {
                    for r in 0..t {
                        for j in 0..ca {
                            buf[r * ca + j] += g[r * cols + j];
                        }
                    }
                });
                self.acc(b, |buf| {
                    for r in 0..t {
                        for j in 0..cb {
                            buf[r * cb + j] += g[r * cols + ca + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let c = self.nodes[x].value.shape()[1];
                self.acc(x, |buf| {
                    for (i, &gv) in g.iter().enumerate() {
                        buf[start * c + i] += gv;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let c = self.nodes[x].value.shape()[1];
                let len = self.nodes[id].value.shape()[1];
                let t = self.nodes[id].value.shape()[0];
                self.acc(x, |buf| {
                    for r in 0..t {
                        for j in 0..len {
                            buf[r * c + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                let x = *x;
                self.acc(x, |buf| add_into(buf, g));
            }
            Op::NllFromLogProbs { logp, labels } => {
                let logp = *logp;
                let labels = labels.clone();
                let k = self.nodes[logp].value.shape()[1];
                let t = labels.len();
                let gv = g[0];
                let inv_t = S::from_f64(1.0 / t as f64);
                self.acc(logp, |buf| {
                    for (frame, &label) in labels.iter().enumerate() {
                        buf[frame * k + label] += -(gv * inv_t);
                    }
                });
            }
        }
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn add_into<S: Scalar>(buf: &mut [S], src: &[S]) {
    debug_assert_eq!(buf.len(), src.len());
    for (b, &s) in buf.iter_mut().zip(src) {
        *b += s;
    }
}

/// a[m,k] * b[k,n]
pub(crate) fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            let o_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
    out
}

/// a[m,n] * b[k,n]^T -> [m,k]
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = S::ZERO;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// a[m,k]^T * b[m,n] -> [k,n]
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let o_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
    out
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::ONE + three * a * x * x);
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]), false);
        let id = tape.leaf(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false);
        let y = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_permutes_basis_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[vec![1.0, 0.0], vec![0.0, 0.0]]), false);
        let p = tape.leaf(t2(&[vec![0.0, 1.0], vec![1.0, 0.0]]), false);
        let y = tape.matmul(a, p).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![1.5, -2.0, 0.25]]), false);
        let z = tape.leaf(Tensor::zeros(vec![1, 3]), false);
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![3], &[-1.0, 0.0, 2.0]).unwrap(), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn grad_of_mean_of_squares() {
        // d/dx mean(x^2) = 2x/n over x = [1,2,3]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![3], &[1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean_last(sq).unwrap();
        tape.backward(m).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[2.0 / 3.0, 4.0 / 3.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![1, 2], &[0.0, 0.0]).unwrap(), false);
        let y = tape.softmax_last(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stabilized_against_overflow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![1, 2], &[1000.0, 0.0]).unwrap(), false);
        let y = tape.softmax_last(x, None).unwrap();
        let out = tape.value(y).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert_eq!(out[1], 0.0); // exp(-1000) underflows to exactly zero
    }

    #[test]
    fn softmax_masked_probabilities_match_direct_evaluation() {
        // x = [1, 2, 3], mask = [true, false, true]:
        // p = [1/(1+e^2), 0, e^2/(1+e^2)]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap(), false);
        let mask = Mask::new(1, 3, vec![true, false, true]);
        let y = tape.softmax_last(x, Some(&mask)).unwrap();
        let out = tape.value(y).data();
        let e2 = f64::exp(2.0);
        assert!((out[0] - 1.0 / (1.0 + e2)).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - e2 / (1.0 + e2)).abs() < 1e-15);
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_entries_are_exact_zeros() {
        let mut rng = Rng::new(77);
        for trial in 0..20 {
            let (rows, n) = (4usize, 7usize);
            let x = Tensor::<f64>::rand_uniform(vec![rows, n], 30.0, &mut rng);
            // Random mask with at least one visible entry per row.
            let mut mask = Mask::new(rows, n, vec![false; rows * n]);
            for r in 0..rows {
                let forced = rng.range_usize(0, n);
                for j in 0..n {
                    mask.set(r, j, j == forced || rng.bernoulli(0.5));
                }
            }
            let mut tape = Tape::new();
            let xv = tape.leaf(x, false);
            let p = tape.softmax_last(xv, Some(&mask)).unwrap();
            for r in 0..rows {
                let row = tape.value(p).row(r).to_vec();
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "trial {trial} row {r}: sum {sum}");
                for (j, &v) in row.iter().enumerate() {
                    if !mask.get(r, j) {
                        assert_eq!(v.to_bits(), 0.0f64.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), false);
        let mask = Mask::new(2, 2, vec![true, true, false, false]);
        let err = tape.softmax_last(x, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::DegenerateMaskRow { row: 1 }));
    }

    #[test]
    fn conv1d_centered_delta_kernel_is_projection() {
        // kernel[tap=center][i][o] = (i == o): output equals input
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::rand_uniform(vec![6, 3], 1.0, &mut rng);
        let mut kern = Tensor::<f64>::zeros(vec![3, 3, 3]);
        for i in 0..3 {
            kern.data_mut()[(3 + i) * 3 + i] = 1.0; // center tap
        }
        let xv = tape.leaf(x.clone(), false);
        let kv = tape.leaf(kern, false);
        let bv = tape.leaf(Tensor::zeros(vec![3]), false);
        let y = tape.conv1d(xv, kv, bv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv1d_length_one_only_center_tap_contributes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![2.0]]), false);
        let mut kern = Tensor::<f64>::zeros(vec![3, 1, 1]);
        kern.data_mut()[0] = 10.0; // past tap: falls off the edge
        kern.data_mut()[1] = 3.0; // center tap
        kern.data_mut()[2] = 10.0; // future tap: falls off the edge
        let kv = tape.leaf(kern, false);
        let bv = tape.leaf(Tensor::zeros(vec![1]), false);
        let y = tape.conv1d(x, kv, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![4, 2]), false);
        let k = tape.leaf(Tensor::zeros(vec![2, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(vec![2]), false);
        assert!(matches!(
            tape.conv1d(x, k, b),
            Err(Error::Config { op: "conv1d", .. })
        ));
    }

    #[test]
    fn conv1d_matches_naive_triple_loop() {
        let mut rng = Rng::new(11);
        let x = Tensor::<f64>::rand_uniform(vec![8, 4], 1.0, &mut rng);
        let kern = Tensor::<f64>::rand_uniform(vec![3, 4, 5], 1.0, &mut rng);
        let bias = Tensor::<f64>::rand_uniform(vec![5], 1.0, &mut rng);

        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), false);
        let kv = tape.leaf(kern.clone(), false);
        let bv = tape.leaf(bias.clone(), false);
        let y = tape.conv1d(xv, kv, bv).unwrap();

        // Independent reference: direct definition of same-padded convolution.
        let (t, d_in, d_out, k) = (8usize, 4usize, 5usize, 3usize);
        for tt in 0..t {
            for o in 0..d_out {
                let mut want = bias.data()[o];
                for tap in 0..k {
                    let src = tt as isize + tap as isize - 1;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for i in 0..d_in {
                        want += x.data()[src as usize * d_in + i]
                            * kern.data()[(tap * d_in + i) * d_out + o];
                    }
                }
                let got = tape.value(y).data()[tt * d_out + o];
                assert!((got - want).abs() <= 1e-12, "t={tt} o={o}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn conv2d_delta_kernel_single_channel_is_identity() {
        let mut rng = Rng::new(6);
        let x = Tensor::<f64>::rand_uniform(vec![5, 4, 1], 1.0, &mut rng);
        let mut kern = Tensor::<f64>::zeros(vec![3, 3, 1, 1]);
        kern.data_mut()[3 + 1] = 1.0; // center of the 3x3 window
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), false);
        let kv = tape.leaf(kern, false);
        let bv = tape.leaf(Tensor::zeros(vec![1]), false);
        let y = tape.conv2d(xv, kv, bv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        let mut rng = Rng::new(12);
        let (t, f, c_in, c_out) = (4usize, 5usize, 2usize, 3usize);
        let x = Tensor::<f64>::rand_uniform(vec![t, f, c_in], 1.0, &mut rng);
        let kern = Tensor::<f64>::rand_uniform(vec![3, 3, c_in, c_out], 1.0, &mut rng);
        let bias = Tensor::<f64>::rand_uniform(vec![c_out], 1.0, &mut rng);

        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), false);
        let kv = tape.leaf(kern.clone(), false);
        let bv = tape.leaf(bias.clone(), false);
        let y = tape.conv2d(xv, kv, bv).unwrap();

        for tt in 0..t {
            for ff in 0..f {
                for o in 0..c_out {
                    let mut want = bias.data()[o];
                    for dt in 0..3usize {
                        for dw in 0..3usize {
                            let st = tt as isize + dt as isize - 1;
                            let sf = ff as isize + dw as isize - 1;
                            if st < 0 || st >= t as isize || sf < 0 || sf >= f as isize {
                                continue;
                            }
                            for i in 0..c_in {
                                want += x.data()[(st as usize * f + sf as usize) * c_in + i]
                                    * kern.data()[((dt * 3 + dw) * c_in + i) * c_out + o];
                            }
                        }
                    }
                    let got = tape.value(y).data()[(tt * f + ff) * c_out + o];
                    assert!((got - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_time_floors_odd_lengths() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_f64s(vec![5, 1, 1], &[1.0, 5.0, 2.0, 2.5, 9.0]).unwrap(),
            false,
        );
        let y = tape.maxpool_time(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0, 2.5]);
    }

    #[test]
    fn maxpool_time_rejects_empty_result() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 1]), false);
        assert!(tape.maxpool_time(x).is_err());
    }

    #[test]
    fn concat_rows_with_empty_is_neutral() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]), false);
        let empty = tape.leaf(Tensor::zeros(vec![0, 2]), false);
        let y = tape.concat_rows(empty, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.shape(y), &[2, 2]);
    }

    #[test]
    fn concat_rows_stacks_in_order() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[vec![1.0]]), false);
        let b = tape.leaf(t2(&[vec![2.0]]), false);
        let y = tape.concat_rows(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        assert_eq!(tape.shape(y), &[2, 1]);
    }

    #[test]
    fn concat_rows_gradient_routes_to_both_operands() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[vec![1.0, 1.0]]), true);
        let b = tape.leaf(t2(&[vec![2.0, 2.0], vec![3.0, 3.0]]), true);
        let y = tape.concat_rows(a, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_rows_rejects_feature_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 2]), false);
        let b = tape.leaf(Tensor::zeros(vec![1, 3]), false);
        assert!(matches!(
            tape.concat_rows(a, b),
            Err(Error::ShapeMismatch { op: "concat_time", .. })
        ));
    }

    #[test]
    fn stop_gradient_forward_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![1.0, -2.0, 3.0]]), true);
        let y = tape.stop_gradient(x);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn stop_gradient_severs_one_factor_of_a_product() {
        // loss = sum(sg(x) * x): d/dx = value of x (only the live factor).
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![2.0, -3.0, 0.5]]), true);
        let sg = tape.stop_gradient(x);
        let prod = tape.mul(sg, x).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -3.0, 0.5]);
    }

    #[test]
    fn stop_gradient_alone_yields_bitwise_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![2.0, -3.0]]), true);
        let sg = tape.stop_gradient(x);
        let loss = tape.sum(sg);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.data().iter().all(|v| v.to_bits() == 0.0f64.to_bits()));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_twice_is_bitwise_identical() {
        let mut rng = Rng::new(42);
        let x = Tensor::<f64>::rand_uniform(vec![4, 4], 2.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(vec![4, 4], 2.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x, true);
        let wv = tape.leaf(w, true);
        let y = tape.matmul(xv, wv).unwrap();
        let p = tape.softmax_last(y, None).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(xv).unwrap();
        let g2 = tape.grad(wv).unwrap();
        tape.backward(loss).unwrap();
        let h1 = tape.grad(xv).unwrap();
        let h2 = tape.grad(wv).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&h1));
        assert_eq!(bits(&g2), bits(&h2));
    }

    #[test]
    fn slice_cols_roundtrip_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0, 3.0, 4.0]]), true);
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 2).unwrap();
        let joined = tape.concat_cols(left, right).unwrap();
        assert_eq!(tape.value(joined).data(), tape.value(x).data());
        let loss = tape.sum(joined);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn nll_matches_per_frame_loop() {
        let mut rng = Rng::new(9);
        let logits = Tensor::<f64>::rand_uniform(vec![6, 4], 2.0, &mut rng);
        let labels = vec![0usize, 3, 1, 2, 2, 0];
        let mut tape = Tape::<f64>::new();
        let lv = tape.leaf(logits.clone(), false);
        let logp = tape.log_softmax_last(lv).unwrap();
        let loss = tape.nll_from_log_probs(logp, &labels).unwrap();

        let mut want = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            let row = logits.row(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            want -= row[y] - lse;
        }
        want /= labels.len() as f64;
        assert!((tape.value(loss).item() - want).abs() <= 1e-12);
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let err = tape.nll_from_log_probs(x, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, .. }));
    }
}
