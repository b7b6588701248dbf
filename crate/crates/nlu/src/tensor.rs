//! Reverse-mode automatic differentiation over a flat arena tape.
//!
//! Every forward op appends one node (output values + enough context to run
//! its backward rule) to a [`Tape`]. The tape is rebuilt from scratch each
//! training step; parameters live outside it in a [`ParamSet`] and are entered
//! as leaves through a [`TapeBinding`]. All storage is row-major `Vec<f64>`.

use crate::error::{NluError, Result};
use rand_chacha::rand_core::RngCore;

// ── persistent tensors ───────────────────────────────────────────────────

/// A value that outlives any single tape: parameters, optimizer state, frozen
/// activations pulled out of a finished forward pass.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(vec![0.0; n], shape)
    }

    /// Gaussian init via Box-Muller, mean 0, given std.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl RngCore) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(std * gaussian(rng));
        }
        Tensor::from_vec(data, shape)
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Accumulated gradient, if any backward pass has touched this tensor
    /// since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Standard normal draw from a uniform generator (Box-Muller).
fn gaussian(rng: &mut impl RngCore) -> f64 {
    // map u64 to (0,1] so ln() is always finite
    let u1 = 1.0 - (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ── named parameter collections ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat, ordered collection of named parameter tensors. Order is insertion
/// order and is part of the checkpoint contract.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.requires_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }
}

// ── activation choice shared by adapters and config ──────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Gelu => tape.gelu(x),
        }
    }

    /// Plain scalar evaluation, for loop-style reference code.
    pub fn scalar(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => gelu_scalar(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => Err(format!("unknown activation \"{other}\" (expected tanh or gelu)")),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

// ── the tape ─────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Which axis of a 2-d tensor softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize along each row (over columns). The usual attention case.
    Rows,
    /// Normalize along each column (over rows).
    Cols,
}

/// Additive bias used for masked softmax. Large enough that `exp` underflows
/// to exactly 0.0 after max subtraction, so masked positions carry exactly
/// zero weight and zero gradient.
pub const MASK_BIAS: f64 = -1e30;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// Row broadcast: out[r][c] = x[r][c] + bias[c].
    AddBias {
        x: TensorId,
        bias: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Sum {
        x: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Gelu {
        x: TensorId,
    },
    /// Inverted dropout; `mult` holds 0.0 or 1/keep per element.
    Dropout {
        x: TensorId,
        mult: Vec<f64>,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// Saved normalized activations, one per element of x.
        xhat: Vec<f64>,
        /// Saved 1/sqrt(var + eps), one per row.
        rstd: Vec<f64>,
    },
    Softmax {
        x: TensorId,
        axis: Axis,
    },
    Embed {
        table: TensorId,
        ids: Vec<usize>,
    },
    /// Mean cross-entropy over rows with `Some` targets.
    CrossEntropyMean {
        logits: TensorId,
        targets: Vec<Option<usize>>,
        n_valid: usize,
    },
    SliceRows {
        x: TensorId,
        start: usize,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        src_cols: usize,
    },
    ConcatRows {
        xs: Vec<TensorId>,
    },
    ConcatCols {
        xs: Vec<TensorId>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Wengert-style arena of forward values and backward closures-in-data.
/// Build one per forward pass; dropping it frees everything.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    // ── accessors ────────────────────────────────────────────────────────

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(NluError::NonScalarLoss { len: n.data.len() });
        }
        Ok(n.data[0])
    }

    fn rows_cols(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(NluError::BadShape {
                op,
                shape: s.clone(),
                reason: "expected a 2-d tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── leaves ───────────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(shape, data, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], vec![1], false)
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(NluError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.data(a), self.data(b), &mut out, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, needs, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, r], out, needs, Op::Transpose { x }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(NluError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, needs, Op::Add { a, b }))
    }

    /// `[r×c] + [c]` (or `[1×c]`) with the bias broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "add_bias")?;
        let blen = self.nodes[bias.0].data.len();
        if blen != c {
            return Err(NluError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(r * c);
        {
            let xs = self.data(x);
            let bs = self.data(bias);
            for i in 0..r {
                for j in 0..c {
                    out.push(xs[i * c + j] + bs[j]);
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(vec![r, c], out, needs, Op::AddBias { x, bias }))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(NluError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, needs, Op::Scale { x, c }))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![s], needs, Op::Sum { x }))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, needs, Op::Tanh { x }))
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| gelu_scalar(*v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, needs, Op::Gelu { x }))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`; otherwise
    /// each element is dropped with probability `p` and survivors are scaled
    /// by `1/(1-p)`, so eval mode needs no rescaling.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        train: bool,
        rng: &mut impl RngCore,
    ) -> Result<TensorId> {
        if !train || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(NluError::BadShape {
                op: "dropout",
                shape: self.shape(x).to_vec(),
                reason: format!("dropout probability {p} outside [0,1)"),
            });
        }
        let keep = 1.0 - p;
        let inv = 1.0 / keep;
        let n = self.nodes[x.0].data.len();
        let mut mult = Vec::with_capacity(n);
        for _ in 0..n {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            mult.push(if u < keep { inv } else { 0.0 });
        }
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .zip(&mult)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, needs, Op::Dropout { x, mult }))
    }

    /// Row-wise layer normalization with learned gain and shift:
    /// `y[r] = (x[r] - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "layer_norm")?;
        if self.nodes[gamma.0].data.len() != c || self.nodes[beta.0].data.len() != c {
            return Err(NluError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        {
            let xs = self.data(x);
            let gs = self.data(gamma);
            let bs = self.data(beta);
            for i in 0..r {
                let row = &xs[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let xh = (row[j] - mean) * rs;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = xh * gs[j] + bs[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            vec![r, c],
            out,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax along `axis` of a 2-d tensor, with optional masking: positions
    /// where `mask[i]` is false get [`MASK_BIAS`] added before normalization,
    /// which zeroes them exactly. `mask` indexes along the normalized axis and
    /// applies to every lane. Errors if a lane has every position masked.
    pub fn softmax(&mut self, x: TensorId, axis: Axis, mask: Option<&[bool]>) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "softmax")?;
        let (lanes, lane_len, lane_stride, elem_stride) = match axis {
            Axis::Rows => (r, c, c, 1),
            Axis::Cols => (c, r, 1, c),
        };
        if let Some(m) = mask {
            if m.len() != lane_len {
                return Err(NluError::BadShape {
                    op: "softmax",
                    shape: self.shape(x).to_vec(),
                    reason: format!("mask length {} does not match axis length {lane_len}", m.len()),
                });
            }
        }
        let mut out = vec![0.0; r * c];
        {
            let xs = self.data(x);
            let mut lane = vec![0.0; lane_len];
            for l in 0..lanes {
                let base = l * lane_stride;
                for j in 0..lane_len {
                    let mut v = xs[base + j * elem_stride];
                    if let Some(m) = mask {
                        if !m[j] {
                            v += MASK_BIAS;
                        }
                    }
                    lane[j] = v;
                }
                let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max <= MASK_BIAS / 2.0 {
                    return Err(NluError::DegenerateSoftmax);
                }
                let mut denom = 0.0;
                for v in lane.iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                for (j, v) in lane.iter().enumerate() {
                    out[base + j * elem_stride] = v / denom;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, c], out, needs, Op::Softmax { x, axis }))
    }

    /// Row gather: `out[i] = table[ids[i]]`, shape `[ids.len() × d]`.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.rows_cols(table, "embed")?;
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(NluError::TokenIdOutOfRange { id, size: v, pos });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let ts = self.data(table);
            for &id in ids {
                out.extend_from_slice(&ts[id * d..(id + 1) * d]);
            }
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            needs,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of `[r×c]` logits against integer targets; rows with
    /// `None` are excluded from the mean. Output is a `[1]` scalar.
    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorId,
        targets: &[Option<usize>],
    ) -> Result<TensorId> {
        let (r, c) = self.rows_cols(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(NluError::BadShape {
                op: "cross_entropy",
                shape: self.shape(logits).to_vec(),
                reason: format!("{} targets for {r} logit rows", targets.len()),
            });
        }
        let mut n_valid = 0usize;
        for t in targets.iter().flatten() {
            if *t >= c {
                return Err(NluError::LabelOutOfRange {
                    index: *t,
                    classes: c,
                });
            }
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(NluError::BadShape {
                op: "cross_entropy",
                shape: self.shape(logits).to_vec(),
                reason: "no valid targets in batch".into(),
            });
        }
        let mut total = 0.0;
        {
            let xs = self.data(logits);
            for (i, t) in targets.iter().enumerate() {
                let Some(t) = t else { continue };
                let row = &xs[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[*t];
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![total / n_valid as f64],
            needs,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                n_valid,
            },
        ))
    }

    /// Rows `[start, end)` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "slice_rows")?;
        if start > end || end > r {
            return Err(NluError::BadShape {
                op: "slice_rows",
                shape: self.shape(x).to_vec(),
                reason: format!("row range {start}..{end} out of bounds"),
            });
        }
        let out = self.data(x)[start * c..end * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![end - start, c], out, needs, Op::SliceRows { x, start }))
    }

    /// Columns `[start, end)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if start > end || end > c {
            return Err(NluError::BadShape {
                op: "slice_cols",
                shape: self.shape(x).to_vec(),
                reason: format!("column range {start}..{end} out of bounds"),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        {
            let xs = self.data(x);
            for i in 0..r {
                out.extend_from_slice(&xs[i * c + start..i * c + end]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![r, w],
            out,
            needs,
            Op::SliceCols {
                x,
                start,
                src_cols: c,
            },
        ))
    }

    /// Stack 2-d tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        assert!(!xs.is_empty(), "concat_rows of zero tensors");
        let (_, c) = self.rows_cols(xs[0], "concat_rows")?;
        let mut rows = 0;
        for &x in xs {
            let (r, cx) = self.rows_cols(x, "concat_rows")?;
            if cx != c {
                return Err(NluError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &x in xs {
            out.extend_from_slice(self.data(x));
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(vec![rows, c], out, needs, Op::ConcatRows { xs: xs.to_vec() }))
    }

    /// Stack 2-d tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        assert!(!xs.is_empty(), "concat_cols of zero tensors");
        let (r, _) = self.rows_cols(xs[0], "concat_cols")?;
        let mut cols = 0;
        for &x in xs {
            let (rx, cx) = self.rows_cols(x, "concat_cols")?;
            if rx != r {
                return Err(NluError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            cols += cx;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &x in xs {
                let cx = self.nodes[x.0].shape[1];
                let xs_data = self.data(x);
                out.extend_from_slice(&xs_data[i * cx..(i + 1) * cx]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(vec![r, cols], out, needs, Op::ConcatCols { xs: xs.to_vec() }))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. After this call every node with
    /// `needs_grad` has a populated (possibly zero) gradient buffer.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            return Err(NluError::NonScalarLoss { len: n.data.len() });
        }
        for node in &mut self.nodes {
            if node.needs_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if !self.nodes[loss.0].needs_grad {
            // loss does not depend on anything differentiable; nothing to do
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let gout = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &gout)?;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn grad_slice(&mut self, id: TensorId) -> &mut [f64] {
        self.nodes[id.0]
            .grad
            .as_mut()
            .expect("gradient buffer allocated for needs_grad node")
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) -> Result<()> {
        // Op data is moved out and restored so input nodes can be borrowed
        // mutably; every op stores plain ids and saved buffers, never borrows.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.needs(*a) {
                    // dA[i,p] += sum_j gout[i,j] * B[p,j]
                    let bdat = std::mem::take(&mut self.nodes[b.0].data);
                    {
                        let ga = self.grad_slice(*a);
                        for r in 0..m {
                            let grow = &gout[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bdat[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                ga[r * k + p] += acc;
                            }
                        }
                    }
                    self.nodes[b.0].data = bdat;
                }
                if self.needs(*b) {
                    // dB[p,j] += sum_i A[i,p] * gout[i,j]
                    let adat = std::mem::take(&mut self.nodes[a.0].data);
                    {
                        let gb = self.grad_slice(*b);
                        for r in 0..m {
                            let grow = &gout[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = adat[r * k + p];
                                if av != 0.0 {
                                    let gbrow = &mut gb[p * n..(p + 1) * n];
                                    for j in 0..n {
                                        gbrow[j] += av * grow[j];
                                    }
                                }
                            }
                        }
                    }
                    self.nodes[a.0].data = adat;
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    let (c, r) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let gx = self.grad_slice(*x);
                    for a in 0..c {
                        for b in 0..r {
                            gx[b * c + a] += gout[a * r + b];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    if self.needs(t) {
                        let g = self.grad_slice(t);
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    let g = self.grad_slice(*x);
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if self.needs(*bias) {
                    let c = self.nodes[bias.0].data.len();
                    let g = self.grad_slice(*bias);
                    for (j, go) in gout.iter().enumerate() {
                        g[j % c] += go;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bdat = std::mem::take(&mut self.nodes[b.0].data);
                    {
                        let ga = self.grad_slice(*a);
                        for ((gi, go), bv) in ga.iter_mut().zip(gout).zip(&bdat) {
                            *gi += go * bv;
                        }
                    }
                    self.nodes[b.0].data = bdat;
                }
                if self.needs(*b) {
                    let adat = std::mem::take(&mut self.nodes[a.0].data);
                    {
                        let gb = self.grad_slice(*b);
                        for ((gi, go), av) in gb.iter_mut().zip(gout).zip(&adat) {
                            *gi += go * av;
                        }
                    }
                    self.nodes[a.0].data = adat;
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let g = self.grad_slice(*x);
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += c * go;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let g = self.grad_slice(*x);
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let ydat = std::mem::take(&mut self.nodes[i].data);
                    {
                        let g = self.grad_slice(*x);
                        for ((gi, go), y) in g.iter_mut().zip(gout).zip(&ydat) {
                            *gi += go * (1.0 - y * y);
                        }
                    }
                    self.nodes[i].data = ydat;
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xdat = std::mem::take(&mut self.nodes[x.0].data);
                    {
                        let g = self.grad_slice(*x);
                        for ((gi, go), xv) in g.iter_mut().zip(gout).zip(&xdat) {
                            *gi += go * gelu_grad_scalar(*xv);
                        }
                    }
                    self.nodes[x.0].data = xdat;
                }
            }
            Op::Dropout { x, mult } => {
                if self.needs(*x) {
                    let g = self.grad_slice(*x);
                    for ((gi, go), m) in g.iter_mut().zip(gout).zip(mult) {
                        *gi += go * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.nodes[gamma.0].data.len();
                let r = rstd.len();
                if self.needs(*gamma) {
                    let g = self.grad_slice(*gamma);
                    for row in 0..r {
                        for j in 0..c {
                            g[j] += gout[row * c + j] * xhat[row * c + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let g = self.grad_slice(*beta);
                    for row in 0..r {
                        for j in 0..c {
                            g[j] += gout[row * c + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gdat = std::mem::take(&mut self.nodes[gamma.0].data);
                    {
                        let gx = self.grad_slice(*x);
                        let mut dxhat = vec![0.0; c];
                        for row in 0..r {
                            let base = row * c;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let d = gout[base + j] * gdat[j];
                                dxhat[j] = d;
                                m1 += d;
                                m2 += d * xhat[base + j];
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for j in 0..c {
                                gx[base + j] +=
                                    rstd[row] * (dxhat[j] - m1 - xhat[base + j] * m2);
                            }
                        }
                    }
                    self.nodes[gamma.0].data = gdat;
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let (lanes, lane_len, lane_stride, elem_stride) = match axis {
                        Axis::Rows => (r, c, c, 1),
                        Axis::Cols => (c, r, 1, c),
                    };
                    let ydat = std::mem::take(&mut self.nodes[i].data);
                    {
                        let gx = self.grad_slice(*x);
                        for l in 0..lanes {
                            let base = l * lane_stride;
                            let mut dot = 0.0;
                            for j in 0..lane_len {
                                let idx = base + j * elem_stride;
                                dot += ydat[idx] * gout[idx];
                            }
                            for j in 0..lane_len {
                                let idx = base + j * elem_stride;
                                gx[idx] += ydat[idx] * (gout[idx] - dot);
                            }
                        }
                    }
                    self.nodes[i].data = ydat;
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let d = self.nodes[table.0].shape[1];
                    let g = self.grad_slice(*table);
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &gout[pos * d..(pos + 1) * d];
                        let dst = &mut g[id * d..(id + 1) * d];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                n_valid,
            } => {
                if self.needs(*logits) {
                    let c = self.nodes[logits.0].shape[1];
                    let xdat = std::mem::take(&mut self.nodes[logits.0].data);
                    {
                        let g = self.grad_slice(*logits);
                        let scale = gout[0] / *n_valid as f64;
                        for (row, t) in targets.iter().enumerate() {
                            let Some(t) = t else { continue };
                            let xrow = &xdat[row * c..(row + 1) * c];
                            let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = xrow.iter().map(|v| (v - max).exp()).sum();
                            let grow = &mut g[row * c..(row + 1) * c];
                            for j in 0..c {
                                let p = (xrow[j] - max).exp() / denom;
                                grow[j] += scale * (p - if j == *t { 1.0 } else { 0.0 });
                            }
                        }
                    }
                    self.nodes[logits.0].data = xdat;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let c = self.nodes[i].shape[1];
                    let g = self.grad_slice(*x);
                    let dst = &mut g[start * c..start * c + gout.len()];
                    for (a, b) in dst.iter_mut().zip(gout) {
                        *a += b;
                    }
                }
            }
            Op::SliceCols { x, start, src_cols } => {
                if self.needs(*x) {
                    let (r, w) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let g = self.grad_slice(*x);
                    for row in 0..r {
                        for j in 0..w {
                            g[row * src_cols + start + j] += gout[row * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.nodes[x.0].data.len();
                    if self.needs(x) {
                        let g = self.grad_slice(x);
                        for (a, b) in g.iter_mut().zip(&gout[offset..offset + n]) {
                            *a += b;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { xs } => {
                let r = self.nodes[i].shape[0];
                let total_c = self.nodes[i].shape[1];
                let mut col_off = 0;
                for &x in xs {
                    let cx = self.nodes[x.0].shape[1];
                    if self.needs(x) {
                        let g = self.grad_slice(x);
                        for row in 0..r {
                            for j in 0..cx {
                                g[row * cx + j] += gout[row * total_c + col_off + j];
                            }
                        }
                    }
                    col_off += cx;
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

/// Cache-friendly `[m×k]·[k×n]` kernel, `c` fully overwritten.
fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

// ── parameter ↔ tape binding ─────────────────────────────────────────────

/// Per-forward cache mapping [`ParamId`]s to tape leaves. Evaluating the same
/// parameter twice in one pass reuses one leaf, so gradients accumulate.
pub struct TapeBinding {
    ids: Vec<Option<TensorId>>,
}

impl TapeBinding {
    pub fn new(params: &ParamSet) -> Self {
        TapeBinding {
            ids: vec![None; params.len()],
        }
    }

    /// Tape leaf for `p`, entering it on first use.
    pub fn get(&mut self, tape: &mut Tape, params: &ParamSet, p: ParamId) -> TensorId {
        if let Some(id) = self.ids[p.0] {
            return id;
        }
        let t = params.get(p);
        let id = tape.leaf(t.data().to_vec(), t.shape().to_vec(), t.requires_grad);
        self.ids[p.0] = Some(id);
        id
    }

    /// Pull gradients accumulated on the tape back into the parameter set.
    /// Parameters never bound this pass are left untouched.
    pub fn harvest(&self, tape: &Tape, params: &mut ParamSet) {
        for (i, id) in self.ids.iter().enumerate() {
            let Some(id) = id else { continue };
            if let Some(g) = tape.grad(*id) {
                params.get_mut(ParamId(i)).accumulate_grad(g);
            }
        }
    }
}

// ── tests ────────────────────────────────────────────────────────────────
