//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate of one forward computation. Ops append
//! nodes and compute values eagerly; [`Tape::backward`] walks the nodes in
//! reverse creation order and accumulates gradients, which is valid because
//! a node's parents always precede it. Tensors are row-major, rank 1 or 2;
//! scalars are length-1 vectors. The element type is [`f32`] for training
//! and [`f64`] for gradient verification.
//!
//! Model parameters live outside the tape in a [`ParamStore`]; a forward
//! pass copies each parameter onto the tape once (cached by id) and
//! [`Tape::accum_param_grads`] adds the resulting gradients back, so several
//! backward passes can accumulate into the same buffers.

use std::collections::HashMap;

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: rate {rate} outside [0, 1)")]
    InvalidRate { op: &'static str, rate: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("backward already ran on this tape; combine losses with add before the sweep")]
    DoubleBackward,
    #[error("parameter '{0}' registered twice")]
    DuplicateParam(String),
}

/// Scalar type the tape computes with.
pub trait Element:
    Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position of this parameter in store order; stable for the store's
    /// lifetime, usable to index side tables (e.g. optimizer moments).
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

/// Named parameter buffers with accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: Vec<F>,
    ) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                detail: format!("'{name}' shape {shape:?} vs {} values", value.len()),
            });
        }
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        let grad = vec![F::zero(); value.len()];
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<F> {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            for g in &mut self.entries[id.0].grad {
                *g = F::zero();
            }
        }
    }

    pub fn zero_all_grads(&mut self) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g = F::zero();
            }
        }
    }
}

enum Op<F> {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: F,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        normed: Vec<F>,
        inv_std: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Dropout {
        a: Var,
        mask: Vec<F>,
    },
    AddMask {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    AddN {
        parts: Vec<Var>,
    },
    NllGather {
        logp: Var,
        targets: Vec<u32>,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    param_cache: HashMap<ParamId, Var>,
    swept: bool,
}

/// Rows and columns of a rank-1 or rank-2 shape; vectors count as one row.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => (0, 0),
    }
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            swept: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, needs_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Extract a scalar value.
    pub fn item(&self, v: Var) -> Result<F, TensorError> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(TensorError::NotScalar(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<F>) -> Result<Var, TensorError> {
        self.leaf_impl(shape, value, false)
    }

    pub fn leaf_grad(&mut self, shape: Vec<usize>, value: Vec<F>) -> Result<Var, TensorError> {
        self.leaf_impl(shape, value, true)
    }

    fn leaf_impl(
        &mut self,
        shape: Vec<usize>,
        value: Vec<F>,
        needs_grad: bool,
    ) -> Result<Var, TensorError> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("rank {} unsupported", shape.len()),
            });
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {shape:?} vs {} values", value.len()),
            });
        }
        Ok(self.push(shape, value, needs_grad, Op::Leaf { param: None }))
    }

    pub fn scalar(&mut self, c: F) -> Var {
        self.push(vec![1], vec![c], false, Op::Leaf { param: None })
    }

    /// Copy a parameter onto the tape (once per tape; later calls return the
    /// cached node).
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(
            entry.shape.clone(),
            entry.value.clone(),
            true,
            Op::Leaf { param: Some(id) },
        );
        self.param_cache.insert(id, v);
        v
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_flags(a, b, false, false)
    }

    /// `a · b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_flags(a, b, false, true)
    }

    /// `a^T · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_flags(a, b, true, false)
    }

    pub fn matmul_flags(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    ) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("need rank-2 operands, got {sa:?} and {sb:?}"),
            });
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {kb} ({sa:?} x {sb:?}, ta={ta}, tb={tb})"),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a),
            ta,
            self.value(b),
            tb,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, needs, Op::Matmul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, needs, Op::Mul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value: Vec<F> = self.value(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, needs, Op::Scale { a, c })
    }

    /// Add a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = rows_cols(self.shape(a));
        let sb = self.shape(bias);
        if sb.len() != 1 || sb[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("matrix {:?} plus row {sb:?}", self.shape(a)),
            });
        }
        let bias_v = self.value(bias).to_vec();
        let mut value = self.value(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] += bias_v[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(self.shape(a).to_vec(), value, needs, Op::AddRow { a, bias }))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = rows_cols(self.shape(a));
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut value = self.value(a).to_vec();
        for r in 0..rows {
            softmax_row(&mut value[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), value, needs, Op::Softmax { a }))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = rows_cols(self.shape(a));
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "log_softmax" });
        }
        let mut value = self.value(a).to_vec();
        for r in 0..rows {
            let row = &mut value[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let log_z = row
                .iter()
                .map(|&x| (x - max).exp())
                .sum::<F>()
                .ln()
                + max;
            for x in row.iter_mut() {
                *x -= log_z;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), value, needs, Op::LogSoftmax { a }))
    }

    /// Normalize each row to zero mean and unit variance, then scale and
    /// shift with learned row vectors.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gain: Var,
        bias: Var,
        eps: F,
    ) -> Result<Var, TensorError> {
        let (rows, cols) = rows_cols(self.shape(a));
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        for (gv, name) in [(gain, "gain"), (bias, "bias")] {
            let s = self.shape(gv);
            if s.len() != 1 || s[0] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{name} {s:?} vs {cols} columns"),
                });
            }
        }
        let x = self.value(a);
        let gain_v = self.value(gain);
        let bias_v = self.value(bias);
        let mut value = vec![F::zero(); x.len()];
        let mut normed = vec![F::zero(); x.len()];
        let mut inv_std = vec![F::zero(); rows];
        let denom = F::from_f64(cols as f64);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().cloned().sum::<F>() / denom;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                / denom;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for c in 0..cols {
                let xn = (row[c] - mean) * is;
                normed[r * cols + c] = xn;
                value[r * cols + c] = gain_v[c] * xn + bias_v[c];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            self.shape(a).to_vec(),
            value,
            needs,
            Op::LayerNorm {
                a,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    /// Look up embedding rows: `table[ids[i], :]` stacked into a matrix.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                detail: format!("table must be rank 2, got {s:?}"),
            });
        }
        let (v, d) = (s[0], s[1]);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: v,
                });
            }
            value.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            needs,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenate along the last axis. Vectors concatenate end to end;
    /// matrices must share their row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        }
        let rank = self.shape(parts[0]).len();
        let rows = rows_cols(self.shape(parts[0])).0;
        let mut total_cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || rows_cols(s).0 != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("{s:?} incompatible with first part"),
                });
            }
            total_cols += rows_cols(s).1;
        }
        let mut value = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = rows_cols(self.shape(p));
                value.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let shape = if rank == 1 {
            vec![total_cols]
        } else {
            vec![rows, total_cols]
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            shape,
            value,
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len`, keeping the input's rank.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&s);
        if start + len > cols || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}..{} of {cols} columns", start + len),
            });
        }
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&self.value(a)[r * cols + start..r * cols + start + len]);
        }
        let shape = if s.len() == 1 {
            vec![len]
        } else {
            vec![rows, len]
        };
        let needs = self.needs(a);
        Ok(self.push(shape, value, needs, Op::SliceCols { a, start }))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("need rank 2, got {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if start + len > rows || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{start}..{} of {rows} rows", start + len),
            });
        }
        let value = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(vec![len, cols], value, needs, Op::SliceRows { a, start }))
    }

    /// Inverted-scaling dropout: each element is zeroed with probability
    /// `rate`, survivors are scaled by `1/(1-rate)`. Training-mode only;
    /// callers skip the op entirely in evaluation mode.
    pub fn dropout<R: Rng>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate {
                op: "dropout",
                rate,
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let needs = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), value, needs, Op::Dropout { a, mask }))
    }

    /// Add `fill` to every element whose mask entry is true (used to blank
    /// attention scores before softmax).
    pub fn add_mask(&mut self, a: Var, mask: &[bool], fill: F) -> Result<Var, TensorError> {
        if mask.len() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_mask",
                detail: format!("mask {} vs tensor {}", mask.len(), self.value(a).len()),
            });
        }
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { x + fill } else { x })
            .collect();
        let needs = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), value, needs, Op::AddMask { a }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value: Vec<F> = self
            .value(a)
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, needs, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value: Vec<F> = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, needs, Op::Gelu { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().cloned().sum::<F>()];
        let needs = self.needs(a);
        self.push(vec![1], value, needs, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let value = vec![self.value(a).iter().cloned().sum::<F>() / F::from_f64(n as f64)];
        let needs = self.needs(a);
        Ok(self.push(vec![1], value, needs, Op::Mean { a }))
    }

    /// Column means of a matrix: `[m, n] → [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_rows",
                detail: format!("need non-empty rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let inv = F::from_f64(1.0 / m as f64);
        let x = self.value(a);
        let mut value = vec![F::zero(); n];
        for r in 0..m {
            for c in 0..n {
                value[c] += x[r * n + c];
            }
        }
        for v in &mut value {
            *v *= inv;
        }
        let needs = self.needs(a);
        Ok(self.push(vec![n], value, needs, Op::MeanRows { a }))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "add_n" });
        }
        for &p in &parts[1..] {
            self.same_shape("add_n", parts[0], p)?;
        }
        let len = self.value(parts[0]).len();
        let mut value = vec![F::zero(); len];
        for &p in parts {
            for (o, &x) in value.iter_mut().zip(self.value(p)) {
                *o += x;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            self.shape(parts[0]).to_vec(),
            value,
            needs,
            Op::AddN {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Negative sum of selected log-probabilities: given row-wise
    /// log-probabilities `[m, v]` and one target id per row, returns
    /// `-Σ_i logp[i, target_i]` as a scalar.
    pub fn nll_gather(&mut self, logp: Var, targets: &[u32]) -> Result<Var, TensorError> {
        let s = self.shape(logp);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "nll_gather",
                detail: format!("logp {s:?} vs {} targets", targets.len()),
            });
        }
        let v = s[1];
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let t = t as usize;
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll_gather",
                    index: t,
                    bound: v,
                });
            }
            total += self.value(logp)[i * v + t];
        }
        let value = vec![-total];
        let needs = self.needs(logp);
        Ok(self.push(
            vec![1],
            value,
            needs,
            Op::NllGather {
                logp,
                targets: targets.to_vec(),
            },
        ))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. One sweep per tape: a node's
    /// gradient left over from an earlier sweep would be re-propagated, so a
    /// second call is rejected — combine losses with [`Tape::add`] or
    /// [`Tape::add_n`] and sweep the combined scalar instead.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        if self.swept {
            return Err(TensorError::DoubleBackward);
        }
        self.swept = true;
        add_to_grad(&mut self.nodes[loss.0].grad, &[F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let contribs = self.node_backward(i);
            for (p, c) in contribs {
                add_to_grad(&mut self.nodes[p].grad, &c);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize) -> Vec<(usize, Vec<F>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("caller checked");
        let mut out: Vec<(usize, Vec<F>)> = Vec::new();
        let mut emit = |tape: &Self, v: Var, c: Vec<F>| {
            if tape.needs(v) {
                out.push((v.0, c));
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = node.shape[1];
                if self.needs(*a) {
                    let mut da = vec![F::zero(); sa[0] * sa[1]];
                    if !*ta {
                        // dA = dC · B^T
                        gemm_acc(m, n, k, g, false, self.value(*b), !*tb, &mut da);
                    } else {
                        // physical A is [k, m]: dA_phys = B · dC^T
                        gemm_acc(k, n, m, self.value(*b), *tb, g, true, &mut da);
                    }
                    emit(self, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); sb[0] * sb[1]];
                    if !*tb {
                        // dB = A^T · dC
                        gemm_acc(k, m, n, self.value(*a), !*ta, g, false, &mut db);
                    } else {
                        // physical B is [n, k]: dB_phys = dC^T · A
                        gemm_acc(n, m, k, g, true, self.value(*a), *ta, &mut db);
                    }
                    emit(self, *b, db);
                }
            }
            Op::Add { a, b } => {
                emit(self, *a, g.clone());
                emit(self, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let da: Vec<F> = g.iter().zip(self.value(*b)).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<F> = g.iter().zip(self.value(*a)).map(|(&gi, &ai)| gi * ai).collect();
                emit(self, *a, da);
                emit(self, *b, db);
            }
            Op::Scale { a, c } => {
                emit(self, *a, g.iter().map(|&gi| gi * *c).collect());
            }
            Op::AddRow { a, bias } => {
                emit(self, *a, g.clone());
                if self.needs(*bias) {
                    let (m, n) = rows_cols(&node.shape);
                    let mut db = vec![F::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    emit(self, *bias, db);
                }
            }
            Op::Softmax { a } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut da = vec![F::zero(); y.len()];
                for r in 0..rows {
                    let off = r * cols;
                    let dot: F = (0..cols).map(|c| g[off + c] * y[off + c]).sum();
                    for c in 0..cols {
                        da[off + c] = y[off + c] * (g[off + c] - dot);
                    }
                }
                emit(self, *a, da);
            }
            Op::LogSoftmax { a } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut da = vec![F::zero(); y.len()];
                for r in 0..rows {
                    let off = r * cols;
                    let gsum: F = (0..cols).map(|c| g[off + c]).sum();
                    for c in 0..cols {
                        da[off + c] = g[off + c] - y[off + c].exp() * gsum;
                    }
                }
                emit(self, *a, da);
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gain_v = self.value(*gain);
                if self.needs(*gain) {
                    let mut dg = vec![F::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * normed[r * cols + c];
                        }
                    }
                    emit(self, *gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![F::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    emit(self, *bias, db);
                }
                if self.needs(*a) {
                    let denom = F::from_f64(cols as f64);
                    let mut da = vec![F::zero(); normed.len()];
                    #[allow(clippy::needless_range_loop)]
                    for r in 0..rows {
                        let off = r * cols;
                        let mut mean_dxn = F::zero();
                        let mut mean_dxn_xn = F::zero();
                        for c in 0..cols {
                            let dxn = g[off + c] * gain_v[c];
                            mean_dxn += dxn;
                            mean_dxn_xn += dxn * normed[off + c];
                        }
                        mean_dxn /= denom;
                        mean_dxn_xn /= denom;
                        for c in 0..cols {
                            let dxn = g[off + c] * gain_v[c];
                            da[off + c] =
                                inv_std[r] * (dxn - mean_dxn - normed[off + c] * mean_dxn_xn);
                        }
                    }
                    emit(self, *a, da);
                }
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                let tv = self.value(*table).len();
                let mut dt = vec![F::zero(); tv];
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                emit(self, *table, dt);
            }
            Op::ConcatCols { parts } => {
                let rows = rows_cols(&node.shape).0;
                let total = rows_cols(&node.shape).1;
                let mut col_off = 0;
                for &p in parts {
                    let (_, c) = rows_cols(self.shape(p));
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + col_off..r * total + col_off + c]);
                        }
                        emit(self, p, dp);
                    }
                    col_off += c;
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, len) = rows_cols(&node.shape);
                let (_, cols) = rows_cols(self.shape(*a));
                let mut da = vec![F::zero(); self.value(*a).len()];
                for r in 0..rows {
                    for c in 0..len {
                        da[r * cols + start + c] = g[r * len + c];
                    }
                }
                emit(self, *a, da);
            }
            Op::SliceRows { a, start } => {
                let (len, cols) = (node.shape[0], node.shape[1]);
                let mut da = vec![F::zero(); self.value(*a).len()];
                da[start * cols..(start + len) * cols].copy_from_slice(&g[..len * cols]);
                emit(self, *a, da);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<F> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                emit(self, *a, da);
            }
            Op::AddMask { a } => {
                emit(self, *a, g.clone());
            }
            Op::Relu { a } => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&gi, &x)| if x > F::zero() { gi } else { F::zero() })
                    .collect();
                emit(self, *a, da);
            }
            Op::Gelu { a } => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&gi, &x)| gi * gelu_bwd(x))
                    .collect();
                emit(self, *a, da);
            }
            Op::Sum { a } => {
                emit(self, *a, vec![g[0]; self.value(*a).len()]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                let gi = g[0] / F::from_f64(n as f64);
                emit(self, *a, vec![gi; n]);
            }
            Op::MeanRows { a } => {
                let (m, n) = rows_cols(self.shape(*a));
                let inv = F::from_f64(1.0 / m as f64);
                let mut da = vec![F::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g[c] * inv;
                    }
                }
                emit(self, *a, da);
            }
            Op::AddN { parts } => {
                for &p in parts {
                    emit(self, p, g.clone());
                }
            }
            Op::NllGather { logp, targets } => {
                let v = self.shape(*logp)[1];
                let mut da = vec![F::zero(); self.value(*logp).len()];
                for (i2, &t) in targets.iter().enumerate() {
                    da[i2 * v + t as usize] = -g[0];
                }
                emit(self, *logp, da);
            }
        }
        out
    }

    /// Add this tape's parameter-leaf gradients into the store.
    pub fn accum_param_grads(&self, store: &mut ParamStore<F>) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &node.grad {
                    let entry = store.entry_mut(id);
                    for (pg, &gi) in entry.grad.iter_mut().zip(g) {
                        *pg += gi;
                    }
                }
            }
        }
    }
}

fn add_to_grad<F: Element>(grad: &mut Option<Vec<F>>, contribution: &[F]) {
    match grad {
        Some(g) => {
            for (gi, &c) in g.iter_mut().zip(contribution) {
                *gi += c;
            }
        }
        None => *grad = Some(contribution.to_vec()),
    }
}

fn softmax_row<F: Element>(row: &mut [F]) {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

fn gelu_fwd<F: Element>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Element>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

/// `out += op(a) · op(b)` with optional transposes; `m`, `k`, `n` are the
/// logical dimensions after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<F: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    out: &mut [F],
) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        match (ta, tb) {
            (false, false) => {
                let a_row = &a[i * k..(i + 1) * k];
                for (kk, &aik) in a_row.iter().enumerate() {
                    let b_row = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += aik * bv;
                    }
                }
            }
            (false, true) => {
                let a_row = &a[i * k..(i + 1) * k];
                for (j, o) in out_row.iter_mut().enumerate() {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut acc = F::zero();
                    for (&av, &bv) in a_row.iter().zip(b_row) {
                        acc += av * bv;
                    }
                    *o += acc;
                }
            }
            (true, false) => {
                for kk in 0..k {
                    let aik = a[kk * m + i];
                    let b_row = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += aik * bv;
                    }
                }
            }
            (true, true) => {
                for (j, o) in out_row.iter_mut().enumerate() {
                    let mut acc = F::zero();
                    for kk in 0..k {
                        acc += a[kk * m + i] * b[j * k + kk];
                    }
                    *o += acc;
                }
            }
        }
    }
}

/// Compare tape gradients of `build(tape, x)` (a scalar-valued graph in one
/// input tensor) against central finite differences. Returns the largest
/// relative error `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn grad_check<Build>(
    build: Build,
    shape: &[usize],
    x0: &[f64],
    eps: f64,
) -> Result<f64, TensorError>
where
    Build: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf_grad(shape.to_vec(), x0.to_vec())?;
    let y = build(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x0.len()]);

    let eval = |data: Vec<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let xv = t.constant(shape.to_vec(), data)?;
        let y = build(&mut t, xv)?;
        t.item(y)
    };
    let mut max_rel: f64 = 0.0;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += eps;
        let mut minus = x0.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(TensorError::NonFinite {
                what: format!("gradient coordinate {i}"),
            });
        }
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn matmul_forward_example() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.constant(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(t.shape(c), &[2, 2]);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_vec(&mut rng, 6); // 2x3
        let b = rand_vec(&mut rng, 6); // 2x3
        let mut t: Tape<f64> = Tape::new();
        let av = t.constant(vec![2, 3], a.clone()).unwrap();
        let bv = t.constant(vec![2, 3], b.clone()).unwrap();
        let nt = t.matmul_nt(av, bv).unwrap(); // [2,2]
        let bt: Vec<f64> = (0..3)
            .flat_map(|c| (0..2).map(move |r| (r, c)))
            .map(|(r, c)| b[r * 3 + c])
            .collect(); // 3x2 transpose
        let btv = t.constant(vec![3, 2], bt).unwrap();
        let plain = t.matmul(av, btv).unwrap();
        for (x, y) in t.value(nt).iter().zip(t.value(plain)) {
            assert!((x - y).abs() < 1e-12);
        }
        let tn = t.matmul_tn(av, bv).unwrap(); // [3,3]
        assert_eq!(t.shape(tn), &[3, 3]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul:"), "{err}");
        let v = t.constant(vec![4], vec![0.0; 4]).unwrap();
        let err = t.add(a, v).unwrap_err();
        assert!(err.to_string().starts_with("add:"), "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_empty_axis_errors() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.1, 1.0, -2.0, 5.0, 5.0, 5.0]).unwrap();
        let s = t.softmax(a).unwrap();
        for r in 0..2 {
            let sum: f64 = t.value(s)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let empty = t.constant(vec![0], vec![]).unwrap();
        assert!(t.softmax(empty).is_err());
    }

    #[test]
    fn softmax_handles_large_scores() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(a).unwrap();
        assert!((t.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(t.value(s).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let mut t: Tape<f64> = Tape::new();
        let data = vec![0.3, -1.2, 2.0, 0.0];
        let a = t.constant(vec![2, 2], data.clone()).unwrap();
        let s = t.softmax(a).unwrap();
        let ls = t.log_softmax(a).unwrap();
        for (x, y) in t.value(s).iter().zip(t.value(ls)) {
            assert!((x.ln() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_looks_up_rows_and_checks_bounds() {
        let mut t: Tape<f64> = Tape::new();
        let table = t.constant(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(t.gather(table, &[3]).is_err());
    }

    #[test]
    fn dropout_masks_are_zero_or_scaled() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.constant(vec![64], vec![1.0; 64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = t.dropout(a, 0.25, &mut rng).unwrap();
        let keep = 1.0 / 0.75;
        let mut zeros = 0;
        for &v in t.value(d) {
            assert!(v == 0.0 || (v - keep).abs() < 1e-6);
            if v == 0.0 {
                zeros += 1;
            }
        }
        assert!(zeros > 0 && zeros < 64);
        // rate 0 is the identity (same node handle).
        let same = t.dropout(a, 0.0, &mut rng).unwrap();
        assert_eq!(same, a);
        assert!(t.dropout(a, 1.0, &mut rng).is_err());
    }

    #[test]
    fn nll_gather_sums_selected_rows() {
        let mut t: Tape<f64> = Tape::new();
        let logp = t
            .constant(vec![2, 3], vec![-0.1, -2.0, -3.0, -1.5, -0.2, -4.0])
            .unwrap();
        let loss = t.nll_gather(logp, &[0, 2]).unwrap();
        assert!((t.item(loss).unwrap() - (0.1 + 4.0)).abs() < 1e-12);
        assert!(t.nll_gather(logp, &[0]).is_err());
        assert!(t.nll_gather(logp, &[0, 3]).is_err());
    }

    #[test]
    fn backward_accumulates_across_reuse() {
        // y = x*x + 3x, dy/dx = 2x + 3; x feeds two branches.
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf_grad(vec![2], vec![1.5, -0.5]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let tripled = t.scale(x, 3.0);
        let both = t.add(sq, tripled).unwrap();
        let loss = t.sum(both);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] - (2.0 * 1.5 + 3.0)).abs() < 1e-12);
        assert!((g[1] - (2.0 * -0.5 + 3.0)).abs() < 1e-12);

        // A second sweep on the same tape would re-propagate stale
        // gradients, so it is rejected.
        let loss2 = t.sum(x);
        assert!(matches!(
            t.backward(loss2),
            Err(TensorError::DoubleBackward)
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf_grad(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn param_cache_shares_leaves_and_grads_flow_to_store() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", vec![2], vec![2.0, -1.0]).unwrap();
        let mut t = Tape::new();
        let w1 = t.param(&store, w);
        let w2 = t.param(&store, w);
        assert_eq!(w1, w2);
        let sq = t.mul(w1, w2).unwrap(); // w^2
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        t.accum_param_grads(&mut store);
        assert!((store.entry(w).grad[0] - 4.0).abs() < 1e-12);
        assert!((store.entry(w).grad[1] + 2.0).abs() < 1e-12);
        // Accumulation is additive across tapes.
        let mut t2 = Tape::new();
        let wv = t2.param(&store, w);
        let loss = t2.sum(wv);
        t2.backward(loss).unwrap();
        t2.accum_param_grads(&mut store);
        assert!((store.entry(w).grad[0] - 5.0).abs() < 1e-12);
        store.zero_grads(&[w]);
        assert_eq!(store.entry(w).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn param_store_rejects_duplicates_and_bad_shapes() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("w", vec![2], vec![0.0; 2]).unwrap();
        assert!(store.add("w", vec![2], vec![0.0; 2]).is_err());
        assert!(store.add("v", vec![3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let eps = 1e-5;
        let tol = 1e-5;
        type Build = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>>;

        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("matmul_nn", vec![3, 4], Box::new(|t, x| {
                let w = t.constant(vec![4, 2], (0..8).map(|i| 0.3 - 0.1 * i as f64).collect())?;
                let y = t.matmul(x, w)?;
                Ok(t.sum(y))
            })),
            ("matmul_nt", vec![3, 4], Box::new(|t, x| {
                let w = t.constant(vec![2, 4], (0..8).map(|i| 0.25 - 0.07 * i as f64).collect())?;
                let y = t.matmul_nt(x, w)?;
                Ok(t.sum(y))
            })),
            ("matmul_tn", vec![4, 3], Box::new(|t, x| {
                let w = t.constant(vec![4, 2], (0..8).map(|i| -0.2 + 0.09 * i as f64).collect())?;
                let y = t.matmul_tn(x, w)?;
                Ok(t.sum(y))
            })),
            ("matmul_tt_right", vec![2, 4], Box::new(|t, x| {
                let w = t.constant(vec![4, 3], (0..12).map(|i| 0.11 * i as f64 - 0.5).collect())?;
                // w^T · x^T exercises both transpose paths on the grad side.
                let y = t.matmul_flags(w, x, true, true)?;
                Ok(t.sum(y))
            })),
            ("add_mul_scale", vec![2, 3], Box::new(|t, x| {
                let sq = t.mul(x, x)?;
                let sc = t.scale(x, -1.7);
                let y = t.add(sq, sc)?;
                Ok(t.sum(y))
            })),
            ("add_row", vec![3], Box::new(|t, x| {
                let a = t.constant(vec![2, 3], vec![0.4, -0.2, 0.9, 1.1, 0.0, -0.6])?;
                let y = t.add_row(a, x)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("add_row_matrix_side", vec![2, 3], Box::new(|t, x| {
                let b = t.constant(vec![3], vec![0.2, -0.4, 0.6])?;
                let y = t.add_row(x, b)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("softmax", vec![2, 4], Box::new(|t, x| {
                let s = t.softmax(x)?;
                let w = t.constant(vec![2, 4], (0..8).map(|i| (i as f64).sin()).collect())?;
                let y = t.mul(s, w)?;
                Ok(t.sum(y))
            })),
            ("log_softmax_nll", vec![3, 5], Box::new(|t, x| {
                let ls = t.log_softmax(x)?;
                t.nll_gather(ls, &[1, 4, 0])
            })),
            ("layer_norm_input", vec![2, 4], Box::new(|t, x| {
                let gain = t.constant(vec![4], vec![1.1, 0.9, 1.3, 0.7])?;
                let bias = t.constant(vec![4], vec![0.1, -0.2, 0.0, 0.3])?;
                let y = t.layer_norm(x, gain, bias, 1e-5)?;
                let w = t.constant(vec![2, 4], (0..8).map(|i| 0.2 * i as f64 - 0.7).collect())?;
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            })),
            ("layer_norm_gain_bias", vec![4], Box::new(|t, x| {
                let a = t.constant(vec![2, 4], vec![0.5, -1.0, 2.0, 0.3, -0.8, 1.2, 0.0, 0.7])?;
                let y = t.layer_norm(a, x, x, 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("gather", vec![3, 2], Box::new(|t, x| {
                let g = t.gather(x, &[2, 0, 2, 1])?;
                let w = t.constant(vec![4, 2], (0..8).map(|i| 0.3 * i as f64 - 1.0).collect())?;
                let y = t.mul(g, w)?;
                Ok(t.sum(y))
            })),
            ("concat_slice", vec![2, 4], Box::new(|t, x| {
                let left = t.slice_cols(x, 0, 2)?;
                let right = t.slice_cols(x, 2, 2)?;
                let swapped = t.concat_cols(&[right, left])?;
                let sq = t.mul(swapped, swapped)?;
                Ok(t.sum(sq))
            })),
            ("slice_rows", vec![3, 2], Box::new(|t, x| {
                let mid = t.slice_rows(x, 1, 2)?;
                let sq = t.mul(mid, mid)?;
                Ok(t.sum(sq))
            })),
            ("add_mask", vec![2, 3], Box::new(|t, x| {
                let masked = t.add_mask(x, &[true, false, false, false, true, false], -2.0)?;
                let s = t.softmax(masked)?;
                let w = t.constant(vec![2, 3], vec![0.3, -0.5, 0.8, 1.0, -0.1, 0.2])?;
                let y = t.mul(s, w)?;
                Ok(t.sum(y))
            })),
            ("relu_offset", vec![2, 3], Box::new(|t, x| {
                // Shift inputs away from the kink.
                let shifted = t.add_mask(x, &[true; 6], 0.35)?;
                let r = t.relu(shifted);
                Ok(t.sum(r))
            })),
            ("gelu", vec![2, 3], Box::new(|t, x| {
                let gl = t.gelu(x);
                let sq = t.mul(gl, gl)?;
                Ok(t.sum(sq))
            })),
            ("mean", vec![5], Box::new(|t, x| {
                let sq = t.mul(x, x)?;
                t.mean(sq)
            })),
            ("mean_rows", vec![3, 2], Box::new(|t, x| {
                let pooled = t.mean_rows(x)?;
                let sq = t.mul(pooled, pooled)?;
                Ok(t.sum(sq))
            })),
            ("add_n", vec![2, 2], Box::new(|t, x| {
                let sq = t.mul(x, x)?;
                let sc = t.scale(x, 0.5);
                let y = t.add_n(&[x, sq, sc])?;
                Ok(t.sum(y))
            })),
            ("dropout_fixed_mask", vec![2, 3], Box::new(|t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let d = t.dropout(x, 0.3, &mut rng)?;
                let sq = t.mul(d, d)?;
                Ok(t.sum(sq))
            })),
        ];

        for (name, shape, build) in cases {
            let n: usize = shape.iter().product();
            let x0 = rand_vec(&mut rng, n);
            let rel = grad_check(&build, &shape, &x0, eps)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(rel <= tol, "{name}: max relative error {rel}");
        }
    }

    #[test]
    fn forward_values_are_bitwise_reproducible() {
        let run = || {
            let mut t: Tape<f32> = Tape::new();
            let a = t
                .constant(vec![4, 4], (0..16).map(|i| (i as f32 * 0.37).sin()).collect())
                .unwrap();
            let b = t.matmul(a, a).unwrap();
            let ln_g = t.constant(vec![4], vec![1.0; 4]).unwrap();
            let ln_b = t.constant(vec![4], vec![0.0; 4]).unwrap();
            let n = t.layer_norm(b, ln_g, ln_b, 1e-5).unwrap();
            let s = t.softmax(n).unwrap();
            t.value(s).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
