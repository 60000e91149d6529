use super::linalg::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{ensure, invalid, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ChannelAffine(Var, Var, Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    /// Scalar loss whose gradient w.r.t. `input` was computed during the forward pass.
    FusedLoss {
        input: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MatMul(a, b) | MatMulNT(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Relu(a) | Sigmoid(a) | Tanh(a) | Transpose(a) | GlobalAvgPool(a)
            | Reshape(a) | SoftmaxRows(a) | Sum(a) | Mean(a) => vec![*a],
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            ChannelAffine(x, s, b) => vec![*x, *s, *b],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            SliceCols { x, .. } | SliceRows { x, .. } | NormalizeRows { x, .. } => vec![*x],
            LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
            FusedLoss { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. A tape supports exactly one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(invalid!("{what} expects a rank-2 tensor, got shape {s:?}")),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Sign pattern (`x > 0`) of every ReLU input on the tape, in execution
    /// order. Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Its gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a `requires_grad` leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(data, x.shape()).expect("shape preserved");
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_vec(data, x.shape()).expect("shape preserved");
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, |p, q| p + q, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, |p, q| p - q, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, |p, q| p * q, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |v| v * c, Op::Scale(a, c))
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        ensure!(
            args.len() == arity,
            "{kind:?} takes {arity} operand(s), got {}",
            args.len()
        );
        Ok(match kind {
            Elementwise::Add => self.add(args[0], args[1])?,
            Elementwise::Mul => self.mul(args[0], args[1])?,
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Scale(c) => self.scale(args[0], c),
        })
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "add_row")?;
        ensure!(
            self.value(b).numel() == n,
            "add_row: bias of {} elements for {n} columns",
            self.value(b).numel()
        );
        let bias = self.data(b);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, bias);
        }
        let value = Tensor::from_vec(data, &[m, n])?;
        Ok(self.push(value, Op::AddRow(x, b)))
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        ensure!(k == k2, "matmul: inner dimensions differ ({m}x{k} · {k2}x{n})");
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::from_vec(out, &[m, n])?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        ensure!(k == k2, "matmul_nt: inner dimensions differ ({m}x{k} · ({n}x{k2})ᵀ)");
        let mut out = vec![0.0; m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::from_vec(out, &[m, n])?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "transpose")?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let value = Tensor::from_vec(out, &[n, m])?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Cross-correlation of `input[cin,h,w]` with `kernel[cout,cin,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (cin, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(invalid!("conv2d input must be [C,H,W], got {s:?}")),
        };
        let (cout, kc, kh, kw) = match self.shape(kernel) {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            s => return Err(invalid!("conv2d kernel must be [Cout,Cin,kh,kw], got {s:?}")),
        };
        ensure!(kc == cin, "conv2d: kernel expects {kc} input channels, input has {cin}");
        ensure!(stride > 0, "conv2d: stride must be positive");
        let geom = ConvGeom::new(cin, h, w, kh, kw, stride, padding).ok_or_else(|| {
            invalid!("conv2d: {kh}x{kw} kernel larger than padded {h}x{w} input (padding {padding})")
        })?;
        let cols = im2col(self.data(input), &geom);
        let np = geom.out_pixels();
        let mut out = vec![0.0; cout * np];
        gemm_nn(self.data(kernel), &cols, &mut out, cout, geom.patch_len(), np);
        let value = Tensor::from_vec(out, &[cout, geom.ho, geom.wo])?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Per-channel `x[c,..] · scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        ensure!(
            self.value(scale).numel() == c && self.value(shift).numel() == c,
            "channel_affine: expected {c} scale/shift entries"
        );
        let per = self.value(x).numel() / c;
        let (s, b) = (self.data(scale), self.data(shift));
        let mut data = self.data(x).to_vec();
        for (ch, chunk) in data.chunks_mut(per).enumerate() {
            for v in chunk {
                *v = *v * s[ch] + b[ch];
            }
        }
        let value = Tensor::from_vec(data, self.shape(x))?;
        Ok(self.push(value, Op::ChannelAffine(x, scale, shift)))
    }

    /// Mean over all axes but the first: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        let per = self.value(x).numel() / c;
        let data = self
            .data(x)
            .chunks(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect();
        let value = Tensor::from_vec(data, &[c])?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::from_vec(self.data(x).to_vec(), shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols: no inputs");
        let (m, _) = dims2(self.value(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = dims2(self.value(p), "concat_cols")?;
            ensure!(mi == m, "concat_cols: row counts differ ({mi} vs {m})");
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_vec(out, &[m, total])?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_rows: no inputs");
        let (_, n) = dims2(self.value(parts[0]), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (mi, ni) = dims2(self.value(p), "concat_rows")?;
            ensure!(ni == n, "concat_rows: column counts differ ({ni} vs {n})");
            rows += mi;
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::from_vec(out, &[rows, n])?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_cols")?;
        ensure!(len > 0 && start + len <= n, "slice_cols: [{start}, {}) out of {n}", start + len);
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::from_vec(out, &[m, len])?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_rows")?;
        ensure!(len > 0 && start + len <= m, "slice_rows: [{start}, {}) out of {m}", start + len);
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        let value = Tensor::from_vec(out, &[len, n])?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "softmax_rows")?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(out, &[m, n])?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    /// Scale every row to unit Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "normalize_rows")?;
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in out.chunks_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!(norm > 0.0, "normalize_rows: row {i} has zero norm");
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::from_vec(out, &[m, n])?;
        Ok(self.push(value, Op::NormalizeRows { x, norms }))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "layer_norm_rows")?;
        ensure!(
            self.value(gain).numel() == n && self.value(bias).numel() == n,
            "layer_norm_rows: gain/bias must have {n} entries"
        );
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = self.data(x).to_vec();
        let mut rstd = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for (row, orow) in xhat.chunks_mut(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                row[j] = (row[j] - mean) * r;
                orow[j] = row[j] * g[j] + b[j];
            }
            rstd.push(r);
        }
        let value = Tensor::from_vec(out, &[m, n])?;
        Ok(self.push(
            value,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Record a scalar loss computed outside the tape together with its
    /// gradient with respect to `input`.
    pub(crate) fn fused_loss(&mut self, input: Var, loss: f64, grad: Vec<f64>) -> Var {
        debug_assert_eq!(grad.len(), self.value(input).numel());
        self.push(Tensor::scalar(loss), Op::FusedLoss { input, grad })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = dims2(self.value(logits), "cross_entropy")?;
        ensure!(
            targets.len() == m,
            "cross_entropy: {} targets for {m} rows",
            targets.len()
        );
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid!("cross_entropy: target {bad} out of range for {k} classes"));
        }
        let mut grad = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in grad.chunks_mut(k).zip(targets) {
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp() / m as f64;
            }
            row[t] -= 1.0 / m as f64;
        }
        Ok(self.fused_loss(logits, loss / m as f64, grad))
    }

    /// Reverse accumulation from a one-element `loss`.
    ///
    /// Populates `grad` on every leaf that requires it (zeros when the leaf
    /// does not influence the loss). A tape can be differentiated once; a
    /// second call returns [`Error::State`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward called on a consumed tape".into()));
        }
        ensure!(
            self.value(loss).numel() == 1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape(loss)
        );
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let numel = node.value.numel();
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; numel]));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.data(*a), self.data(*b));
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * x[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::AddRow(x, b) => {
                let n = self.value(*b).numel();
                acc(*x, &|d| add_into(d, g));
                acc(*b, &|d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (x, y) = (self.data(*a), self.data(*b));
                acc(*a, &|d| gemm_nt(g, y, d, m, n, k));
                acc(*b, &|d| gemm_tn(x, g, d, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (x, y) = (self.data(*a), self.data(*b));
                acc(*a, &|d| gemm_nn(g, y, d, m, n, k));
                acc(*b, &|d| gemm_tn(g, x, d, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &|d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let cout = self.shape(*kernel)[0];
                let (pl, np) = (geom.patch_len(), geom.out_pixels());
                let kdata = self.data(*kernel);
                acc(*kernel, &|d| gemm_nt(g, cols, d, cout, np, pl));
                acc(*input, &|d| {
                    let mut gcols = vec![0.0; pl * np];
                    gemm_tn(kdata, g, &mut gcols, cout, pl, np);
                    col2im(&gcols, geom, d);
                });
            }
            Op::ChannelAffine(x, s, b) => {
                let c = self.value(*s).numel();
                let per = g.len() / c;
                let (xv, sv) = (self.data(*x), self.data(*s));
                acc(*x, &|d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += g[i] * sv[i / per];
                    }
                });
                acc(*s, &|d| {
                    for (i, (gv, xv)) in g.iter().zip(xv).enumerate() {
                        d[i / per] += gv * xv;
                    }
                });
                acc(*b, &|d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i / per] += gv;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let c = g.len();
                let per = self.value(*x).numel() / c;
                acc(*x, &|d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += g[i / per] / per as f64;
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|d| add_into(d, g)),
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &|d| {
                        for i in 0..m {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &|d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let (m, len) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &|d| {
                    for i in 0..m {
                        add_into(&mut d[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = self.shape(*x)[1];
                acc(*x, &|d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                acc(*x, &|d| {
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.shape()[1];
                acc(*x, &|d| {
                    for (i, ((drow, yrow), grow)) in
                        d.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)).enumerate()
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            drow[j] += (grow[j] - yrow[j] * dot) / norms[i];
                        }
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.shape()[1];
                let gv = self.data(*gain);
                acc(*bias, &|d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
                acc(*gain, &|d| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*x, &|d| {
                    for (i, ((drow, grow), hrow)) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        let dxhat: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            drow[j] += rstd[i] * (dxhat[j] - mean_d - hrow[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &|d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::FusedLoss { input, grad } => {
                acc(*input, &|d| d.iter_mut().zip(grad).for_each(|(d, q)| *d += g[0] * q))
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_column() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]));
        let m = tape.constant(t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(p), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let ones = tape.constant(t(&[1.0, 1.0], &[2, 1]));
        let q = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.shape(q), &[2, 1]);
        assert_eq!(tape.data(q), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conv_identity_kernel_and_strided_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&(1..=9).map(f64::from).collect::<Vec<_>>(), &[1, 3, 3]));
        let k = tape.constant(t(&[1.0], &[1, 1, 1, 1]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));

        let ones = tape.constant(Tensor::full(&[1, 4, 4], 1.0));
        let k2 = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y2 = tape.conv2d(ones, k2, 2, 0).unwrap();
        assert_eq!(tape.shape(y2), &[1, 2, 2]);
        assert_eq!(tape.data(y2), &[4.0; 4]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, k, 1, 0).is_err());
        assert!(tape.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn pointwise_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[-1.0, 0.0, 2.0], &[3]));
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        assert_eq!(tape.data(s), &[0.5]);
        assert_eq!(tape.data(th), &[0.0]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.elementwise(Elementwise::Add, &[x, bad]).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[0.0, 1.0], &[2]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[0.0, 0.0, 0.0], &[1, 3]));
        let s = tape.softmax_rows(x).unwrap();
        for &v in tape.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let l = tape.constant(t(&[1f64.ln(), 2f64.ln(), 3f64.ln()], &[1, 3]));
        let s = tape.softmax_rows(l).unwrap();
        for (v, e) in tape.data(s).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let sat = tape.constant(t(&[-50.0, 50.0], &[1, 2]));
        let l = tape.cross_entropy(sat, &[1]).unwrap();
        assert!(tape.value(l).item() < 1e-40);

        assert!(tape.cross_entropy(x, &[2]).is_err());
    }

    #[test]
    fn square_sum_and_constant_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0, 3.0], &[3]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0], &[2]));
        let c = tape.constant(Tensor::scalar(5.0));
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0], &[2]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::InvalidArgument(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
    }
}
