//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every forward operation is recorded on a [`Tape`] as a node holding its
//! output value. Node order is creation order, which is a topological order
//! of the dataflow graph, so [`Tape::backward`] is a single reverse sweep.
//! Matrices are row-major and two-dimensional; vectors are `1 × n` rows
//! unless an operation says otherwise.
//!
//! The tape also carries a multiply-accumulate counter, split by [`Stage`],
//! that backs the operation-count benchmarks.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major array of doubles with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{numel} values for shape {shape:?}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("from_rows: ragged rows"));
        }
        Tensor::new(&[r, c], rows.concat())
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Element `(r, c)` of a matrix.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} values", self.data.len()),
                format!("{} values", g.len()),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} values", self.data.len()),
                format!("shape {shape:?}"),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the output `y = apply(x)`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            // relu'(0) = 0
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Coarse attribution of multiply-accumulates for complexity reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Encoder,
    Projection,
    Attention,
    Context,
    Classifier,
    Other,
}

impl Stage {
    const ALL: [Stage; 6] = [
        Stage::Encoder,
        Stage::Projection,
        Stage::Attention,
        Stage::Context,
        Stage::Classifier,
        Stage::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    counts: [u64; 6],
}

impl MacCounter {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn stage(&self, stage: Stage) -> u64 {
        self.counts[stage.index()]
    }

    pub fn by_stage(&self) -> impl Iterator<Item = (Stage, u64)> + '_ {
        Stage::ALL.iter().map(|&s| (s, self.counts[s.index()]))
    }

    fn add(&mut self, stage: Stage, macs: u64) {
        self.counts[stage.index()] += macs;
    }
}

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRowBias(Var, Var),
    Act(Var, Activation),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    Slice {
        src: Var,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaxRows(Var, Vec<usize>),
    MaxOver(Vec<Var>, Vec<u32>),
    Sum(Var),
    MeanCols(Var),
    MeanRows(Var),
    GaussianPos {
        centers: Var,
        widths: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Records operations for one forward pass and runs the matching backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    stage: Stage,
    macs: MacCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, "a matrix", format!("shape {shape:?}"))),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            stage: Stage::Other,
            macs: MacCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    /// Sets the stage subsequent multiply-accumulates are charged to and
    /// returns the previous one.
    pub fn set_stage(&mut self, stage: Stage) -> Stage {
        std::mem::replace(&mut self.stage, stage)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(v.index()).ok_or(Error::ForeignVar)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.checked(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.checked(v)].shape
    }

    /// Copies a node's value out as a constant tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[self.checked(v)];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn checked(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.index()
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, value: Vec<f64>, kind: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            shape,
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var { tape: self.id, idx })
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.index()].requires_grad)
    }

    /// Records a tensor as a leaf. Gradients are tracked when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push("leaf", t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
            .expect("tensor values are finite by construction")
    }

    /// Records a tensor as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push("param", t.shape.clone(), t.data.clone(), Op::Leaf, true)
            .expect("tensor values are finite by construction")
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.leaf(&Tensor::zeros(shape))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", &self.node(a)?.shape)?;
        let (k2, n) = dims2("matmul", &self.node(b)?.shape)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] · [{k}xn]"),
                format!("[{m}x{k}] · [{k2}x{n}]"),
            ));
        }
        let out = matmul_raw(&self.nodes[a.index()].value, &self.nodes[b.index()].value, m, k, n);
        self.macs.add(self.stage, (m * n * k) as u64);
        let rg = self.needs(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", &self.node(a)?.shape)?;
        let src = &self.nodes[a.index()].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(&[a]);
        self.push("transpose", vec![c, r], out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = &self.node(a)?.shape;
        let sb = &self.node(b)?.shape;
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(sa.clone())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        let shape = self.same_shape(op, a, b)?;
        let out = self.nodes[a.index()]
            .value
            .iter()
            .zip(&self.nodes[b.index()].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(&[a, b]);
        self.push(op, shape, out, kind, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let node = self.node(a)?;
        let shape = node.shape.clone();
        let out = node.value.iter().map(|x| x * factor).collect();
        let rg = self.needs(&[a]);
        self.push("scale", shape, out, Op::Scale(a, factor), rg)
    }

    /// `a + offset` for a constant array of the same size.
    pub fn add_const(&mut self, a: Var, offset: &[f64]) -> Result<Var> {
        let node = self.node(a)?;
        if node.value.len() != offset.len() {
            return Err(Error::shape(
                "add_const",
                format!("{} values", node.value.len()),
                format!("{} values", offset.len()),
            ));
        }
        let shape = node.shape.clone();
        let out = node.value.iter().zip(offset).map(|(x, o)| x + o).collect();
        let rg = self.needs(&[a]);
        self.push("add_const", shape, out, Op::AddConst(a), rg)
    }

    /// Adds a bias vector with `cols(m)` entries to every row of `m`.
    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims2("add_row_bias", &self.node(m)?.shape)?;
        let bn = self.node(bias)?.value.len();
        if bn != c {
            return Err(Error::shape("add_row_bias", format!("bias with {c} entries"), format!("{bn} entries")));
        }
        let b = &self.nodes[bias.index()].value;
        let mut out = self.nodes[m.index()].value.clone();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.needs(&[m, bias]);
        self.push("add_row_bias", vec![r, c], out, Op::AddRowBias(m, bias), rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let node = self.node(a)?;
        let shape = node.shape.clone();
        let out = node.value.iter().map(|&x| kind.apply(x)).collect();
        let rg = self.needs(&[a]);
        self.push("activation", shape, out, Op::Act(a, kind), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("softmax_rows", &self.node(a)?.shape)?;
        let mut out = self.nodes[a.index()].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.needs(&[a]);
        self.push("softmax_rows", vec![r, c], out, Op::SoftmaxRows(a), rg)
    }

    /// Stacks rows `ids[i]` of `table` into a `[len(ids) × cols]` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("gather_rows", &self.node(table)?.shape)?;
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::OutOfVocab { id, size: v });
        }
        let src = &self.nodes[table.index()].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.needs(&[table]);
        self.push("gather_rows", vec![ids.len(), d], out, Op::GatherRows(table, ids.to_vec()), rg)
    }

    /// Sub-block `rows × cols` of a matrix.
    pub fn slice(&mut self, a: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let (r, c) = dims2("slice", &self.node(a)?.shape)?;
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > r || cols.end > c {
            return Err(Error::shape(
                "slice",
                format!("non-empty block inside [{r}x{c}]"),
                format!("rows {rows:?}, cols {cols:?}"),
            ));
        }
        let src = &self.nodes[a.index()].value;
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        let rg = self.needs(&[a]);
        self.push(
            "slice",
            vec![rows.len(), cols.len()],
            out,
            Op::Slice {
                src: a,
                r0: rows.start,
                c0: cols.start,
            },
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, rows: std::ops::Range<usize>) -> Result<Var> {
        let (_, c) = dims2("slice_rows", &self.node(a)?.shape)?;
        self.slice(a, rows, 0..c)
    }

    pub fn slice_cols(&mut self, a: Var, cols: std::ops::Range<usize>) -> Result<Var> {
        let (r, _) = dims2("slice_cols", &self.node(a)?.shape)?;
        self.slice(a, 0..r, cols)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let (r, _) = dims2("concat_cols", &self.node(parts[0])?.shape)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", &self.node(p)?.shape)?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{r} rows"), format!("{pr} rows")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.index()].value[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        self.push("concat_cols", vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let (_, c) = dims2("concat_rows", &self.node(parts[0])?.shape)?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = dims2("concat_rows", &self.node(p)?.shape)?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{c} columns"), format!("{pc} columns")));
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.index()].value);
        }
        let rg = self.needs(parts);
        self.push("concat_rows", vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Column-wise maximum over the rows of `a`, giving `[1 × cols]`.
    /// Ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("max_rows", &self.node(a)?.shape)?;
        let src = &self.nodes[a.index()].value;
        let mut best = src[..c].to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                let v = src[i * c + j];
                if v > best[j] {
                    best[j] = v;
                    arg[j] = i;
                }
            }
        }
        let rg = self.needs(&[a]);
        self.push("max_rows", vec![1, c], best, Op::MaxRows(a, arg), rg)
    }

    /// Elementwise maximum across equally shaped matrices. When `limits` is
    /// given, row `i` only considers the first `limits[i]` (at least one)
    /// entries of `parts`. Ties resolve to the earliest part.
    pub fn max_over(&mut self, parts: &[Var], limits: Option<&[usize]>) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("max_over"));
        }
        let shape = self.node(parts[0])?.shape.clone();
        let (r, c) = dims2("max_over", &shape)?;
        for &p in &parts[1..] {
            self.same_shape("max_over", parts[0], p)?;
        }
        if let Some(l) = limits {
            if l.len() != r {
                return Err(Error::shape("max_over", format!("{r} limits"), format!("{} limits", l.len())));
            }
        }
        let mut best = self.nodes[parts[0].index()].value.clone();
        let mut arg = vec![0u32; r * c];
        for (t, &p) in parts.iter().enumerate().skip(1) {
            let src = &self.nodes[p.index()].value;
            for i in 0..r {
                if let Some(l) = limits {
                    if t >= l[i].max(1) {
                        continue;
                    }
                }
                for j in 0..c {
                    let k = i * c + j;
                    if src[k] > best[k] {
                        best[k] = src[k];
                        arg[k] = t as u32;
                    }
                }
            }
        }
        let rg = self.needs(parts);
        self.push("max_over", shape, best, Op::MaxOver(parts.to_vec(), arg), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.iter().sum();
        let rg = self.needs(&[a]);
        self.push("sum", vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Mean of each row, giving `[rows × 1]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("mean_cols", &self.node(a)?.shape)?;
        let out = self.nodes[a.index()]
            .value
            .chunks(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        let rg = self.needs(&[a]);
        self.push("mean_cols", vec![r, 1], out, Op::MeanCols(a), rg)
    }

    /// Mean of each column, giving `[1 × cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("mean_rows", &self.node(a)?.shape)?;
        let mut out = vec![0.0; c];
        for row in self.nodes[a.index()].value.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.needs(&[a]);
        self.push("mean_rows", vec![1, c], out, Op::MeanRows(a), rg)
    }

    /// Gaussian position prior: entry `(i, j)` is `-(j - c_i)^2 / (2 w_i^2)`
    /// for column positions `j = 0..cols`. `centers` and `widths` hold one
    /// value per output row.
    pub fn gaussian_pos(&mut self, centers: Var, widths: Var, cols: usize) -> Result<Var> {
        let r = self.node(centers)?.value.len();
        let rw = self.node(widths)?.value.len();
        if r != rw {
            return Err(Error::shape("gaussian_pos", format!("{r} widths"), format!("{rw} widths")));
        }
        if cols == 0 {
            return Err(Error::Empty("gaussian_pos"));
        }
        let c = &self.nodes[centers.index()].value;
        let w = &self.nodes[widths.index()].value;
        if w.iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("gaussian_pos: widths must be positive"));
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            let denom = 2.0 * w[i] * w[i];
            for j in 0..cols {
                let d = j as f64 - c[i];
                out.push(-(d * d) / denom);
            }
        }
        let rg = self.needs(&[centers, widths]);
        self.push("gaussian_pos", vec![r, cols], out, Op::GaussianPos { centers, widths }, rg)
    }

    /// Weighted sum over rows of per-row cross-entropy, `Σ_i w_i · -log p_i[y_i]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (r, k) = dims2("cross_entropy", &self.node(logits)?.shape)?;
        if labels.len() != r || weights.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} labels and weights"),
                format!("{} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("cross_entropy: label {y} out of range for {k} classes")));
        }
        let mut probs = self.nodes[logits.index()].value.clone();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[labels[i]]);
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let rg = self.needs(&[logits]);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let node = self.node(a)?;
        let numel: usize = shape.iter().product();
        if numel != node.value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{} values", node.value.len()), format!("shape {shape:?}")));
        }
        let value = node.value.clone();
        let rg = self.needs(&[a]);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a), rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of nodes used more than
    /// once accumulate by summation, in tape order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        let n = loss.index() + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.index()];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.index()].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.index()].shape[0], self.nodes[a.index()].shape[1]);
                let n = self.nodes[b.index()].shape[1];
                let av = &self.nodes[a.index()].value;
                let bv = &self.nodes[b.index()].value;
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.index()].value;
                let bv = &self.nodes[b.index()].value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += gv * f;
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::AddRowBias(m, b) => {
                let c = node.shape[1];
                if let Some(gm) = self.slot(grads, *m) {
                    add_into(gm, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Act(a, kind) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += gv * kind.derivative_from_output(y);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for ((orow, grow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gv - dot);
                        }
                    }
                }
            }
            Op::GatherRows(t, ids) => {
                let d = node.shape[1];
                if let Some(gt) = self.slot(grads, *t) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], row);
                    }
                }
            }
            Op::Slice { src, r0, c0 } => {
                let sc = self.nodes[src.index()].shape[1];
                let (r, c) = (node.shape[0], node.shape[1]);
                if let Some(gs) = self.slot(grads, *src) {
                    for i in 0..r {
                        let off = (r0 + i) * sc + c0;
                        add_into(&mut gs[off..off + c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.index()].shape[1];
                    if let Some(gp) = self.slot(grads, *p) {
                        for i in 0..r {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.index()].value.len();
                    if let Some(gp) = self.slot(grads, *p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::MaxRows(a, arg) => {
                let c = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, &i) in arg.iter().enumerate() {
                        ga[i * c + j] += g[j];
                    }
                }
            }
            Op::MaxOver(parts, arg) => {
                for (t, p) in parts.iter().enumerate() {
                    if let Some(gp) = self.slot(grads, *p) {
                        for (k, &winner) in arg.iter().enumerate() {
                            if winner as usize == t {
                                gp[k] += g[k];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::MeanCols(a) => {
                let c = self.nodes[a.index()].shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (row, gv) in ga.chunks_mut(c).zip(g) {
                        for o in row {
                            *o += gv / c as f64;
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.nodes[a.index()].shape[0], node.shape[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for row in ga.chunks_mut(c) {
                        for (o, gv) in row.iter_mut().zip(g) {
                            *o += gv / r as f64;
                        }
                    }
                }
            }
            Op::GaussianPos { centers, widths } => {
                let (r, cols) = (node.shape[0], node.shape[1]);
                let c = &self.nodes[centers.index()].value;
                let w = &self.nodes[widths.index()].value;
                let mut dc = vec![0.0; r];
                let mut dw = vec![0.0; r];
                for i in 0..r {
                    let w2 = w[i] * w[i];
                    for j in 0..cols {
                        let d = j as f64 - c[i];
                        let gv = g[i * cols + j];
                        dc[i] += gv * d / w2;
                        dw[i] += gv * d * d / (w2 * w[i]);
                    }
                }
                if let Some(gc) = self.slot(grads, *centers) {
                    add_into(gc, &dc);
                }
                if let Some(gw) = self.slot(grads, *widths) {
                    add_into(gw, &dw);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = self.nodes[logits.index()].shape[1];
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, (orow, prow)) in gl.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        let wg = weights[i] * g[0];
                        if wg == 0.0 {
                            continue;
                        }
                        for (j, (o, p)) in orow.iter_mut().zip(prow).enumerate() {
                            let target = if j == labels[i] { 1.0 } else { 0.0 };
                            *o += wg * (p - target);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss or is not differentiable.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar loss from leaves bound to `params` (in order). Returns
/// the maximum over all parameter entries of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_check: eps must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::NotScalar(tape.shape(loss).to_vec()));
        }
        Ok(v[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let first = tape.value(loss)[0];
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for e in 0..params[pi].numel() {
            let base = params[pi].data[e];
            work[pi].data[e] = base + eps;
            let plus = eval(&work)?;
            work[pi].data[e] = base - eps;
            let minus = eval(&work)?;
            work[pi].data[e] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[e];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_sizes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.leaf(&m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.leaf(&m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_counts_macs() {
        let mut tape = Tape::new();
        let a = tape.zeros(&[2, 3]);
        let b = tape.zeros(&[3, 2]);
        let before = tape.macs().total();
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs().total() - before, 12);
        assert_eq!(tape.macs().stage(Stage::Other), 12);
    }

    #[test]
    fn matmul_shape_mismatch_reports_dims() {
        let mut tape = Tape::new();
        let a = tape.zeros(&[2, 3]);
        let b = tape.zeros(&[2, 2]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2x3]") && err.contains("[2x2]"), "{err}");
    }

    #[test]
    fn matmul_identity_gradcheck() {
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(&[&[0.3, -0.7], &[1.1, 0.4]]);
        let weights = m(&[&[0.5, -1.5], &[2.0, 0.25]]);
        let err = finite_diff_check(&[a, b], 1e-4, |t, v| {
            let w = t.leaf(&weights);
            let p = t.matmul(v[0], v[1])?;
            let q = t.mul(p, w)?;
            t.sum(q)
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&m(&[&[0.0, 0.0], &[2f64.ln(), 0.0], &[1000.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-12 && (v[3] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[4] - 1.0).abs() < 1e-12 && v[5] < 1e-300);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        let mut tape = Tape::new();
        let x = tape.param(&m(&[&[-1.0, 2.0, 0.0]]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 2.0, 0.0]);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_simple_sums() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let mut other = Tape::new();
        let y = other.param(&Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::ForeignVar)));
    }

    #[test]
    fn fan_out_accumulates() {
        // a used by two ops: sum(tanh(a)) + sum(3a) versus the derivative
        // of the combined expression, 1 - tanh²(a) + 3.
        let data = vec![0.2, -0.4];
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::new(&[1, 2], data.clone()).unwrap());
        let t = tape.tanh(a).unwrap();
        let s = tape.scale(a, 3.0).unwrap();
        let u = tape.add(t, s).unwrap();
        let l = tape.sum(u).unwrap();
        let g = tape.backward(l).unwrap();
        for (gv, x) in g.get(a).unwrap().iter().zip(&data) {
            assert!((gv - (1.0 - x.tanh().powi(2) + 3.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn gradcheck_trivial_cases() {
        let err = finite_diff_check(&[Tensor::scalar(3.0)], 1e-4, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-6);
        let err = finite_diff_check(&[Tensor::scalar(3.0)], 1e-4, |t, _| t.constant(&[1], vec![7.0])).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gradcheck_rejects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let res = finite_diff_check(&[Tensor::scalar(1.0)], 1e-4, |t, v| {
            calls.set(calls.get() + 1.0);
            let c = t.constant(&[1], vec![calls.get()])?;
            t.add(v[0], c)
        });
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn gaussian_pos_values() {
        let mut tape = Tape::new();
        let c = tape.leaf(&Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let w = tape.leaf(&Tensor::new(&[2, 1], vec![5.0, 5.0]).unwrap());
        let p = tape.gaussian_pos(c, w, 3).unwrap();
        let v = tape.value(p);
        assert_eq!(v[0], 0.0);
        assert!((v[1] + 0.02).abs() < 1e-15);
        assert!((v[3] + 0.02).abs() < 1e-15 && v[4] == 0.0);
    }

    #[test]
    fn cross_entropy_masked_rows_get_zero_gradient() {
        let mut tape = Tape::new();
        let l = tape.param(&m(&[&[0.3, -0.2], &[1.0, 2.0]]));
        let loss = tape.cross_entropy(l, &[0, 1], &[1.0, 0.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(&g.get(l).unwrap()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn max_over_respects_limits() {
        let mut tape = Tape::new();
        let a = tape.leaf(&m(&[&[1.0], &[1.0]]));
        let b = tape.leaf(&m(&[&[5.0], &[5.0]]));
        let out = tape.max_over(&[a, b], Some(&[1, 2])).unwrap();
        assert_eq!(tape.value(out), &[1.0, 5.0]);
    }

    // Shared random-op harness: each differentiable op inside a small random
    // expression, over many seeds and shapes.
    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, 1.0, rng)
    }

    #[test]
    fn every_op_passes_gradcheck_on_random_shapes() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.gen_range(1..=8);
            let k = rng.gen_range(1..=8);
            let c = rng.gen_range(2..=8);
            let a = rand_tensor(&mut rng, &[r, k]);
            let b = rand_tensor(&mut rng, &[k, c]);
            let bias = rand_tensor(&mut rng, &[1, c]);
            let other = rand_tensor(&mut rng, &[r, c]);
            let weights = rand_tensor(&mut rng, &[r, c]);
            let ids: Vec<usize> = (0..r + 1).map(|_| rng.gen_range(0..r)).collect();
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let ce_w: Vec<f64> = (0..r).map(|_| rng.gen_range(0..2) as f64).collect();
            let cen = rand_tensor(&mut rng, &[r, 1]);
            let wid = Tensor::new(&[r, 1], (0..r).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();

            let err = finite_diff_check(
                &[a.clone(), b.clone(), bias.clone(), other.clone(), cen.clone(), wid.clone()],
                1e-4,
                |t, v| {
                    let wv = t.leaf(&weights);
                    let p = t.matmul(v[0], v[1])?;
                    let p = t.add_row_bias(p, v[2])?;
                    let th = t.tanh(p)?;
                    let sg = t.sigmoid(v[3])?;
                    let rl = t.relu(v[3])?;
                    let x = t.mul(th, sg)?;
                    let x = t.sub(x, rl)?;
                    let x = t.add(x, v[3])?;
                    let sm = t.softmax_rows(x)?;
                    let tr = t.transpose(sm)?;
                    let tr = t.transpose(tr)?;
                    let g = t.gather_rows(tr, &ids)?;
                    let top = t.slice(g, 0..r, 0..c)?;
                    let halves = [t.slice_cols(top, 0..1)?, t.slice_cols(top, 1..c)?];
                    let cc = t.concat_cols(&halves)?;
                    let cr = t.concat_rows(&[cc, x])?;
                    let mx = t.max_rows(cr)?;
                    let mo = t.max_over(&[x, th], None)?;
                    let mc = t.mean_cols(mo)?;
                    let mr = t.mean_rows(mo)?;
                    let pos = t.gaussian_pos(v[4], v[5], c)?;
                    let pos = t.mul(pos, wv)?;
                    let ce = t.cross_entropy(x, &labels, &ce_w)?;
                    let rs = t.reshape(mr, &[c, 1])?;
                    let parts = [t.sum(mx)?, t.sum(mc)?, t.sum(rs)?, t.sum(pos)?, ce];
                    let mut acc = parts[0];
                    for &p in &parts[1..] {
                        acc = t.add(acc, p)?;
                    }
                    t.scale(acc, 0.5)
                },
            )
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn mac_counter_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut tape = Tape::new();
            let a = tape.leaf(&rand_tensor(&mut rng, &[3, 5]));
            let b = tape.leaf(&rand_tensor(&mut rng, &[5, 4]));
            let p = tape.matmul(a, b).unwrap();
            let bt = tape.transpose(b).unwrap();
            tape.matmul(p, bt).unwrap();
            tape.macs().clone()
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, vals in proptest::collection::vec(-50.0f64..50.0, 64)) {
                let data: Vec<f64> = vals.into_iter().take(rows * cols).chain(std::iter::repeat(0.0)).take(rows * cols).collect();
                let mut tape = Tape::new();
                let x = tape.leaf(&Tensor::new(&[rows, cols], data).unwrap());
                let y = tape.softmax_rows(x).unwrap();
                for row in tape.value(y).chunks(cols) {
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
