//! Reverse-mode differentiation over a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters are bound by name
//! from a borrowed [`ParamStore`] and never copied; every other value lives on
//! the tape. All values are rank-2 (`rows × cols`), vectors being `1 × n`.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Stack along rows (output rows = Σ input rows).
    Rows,
    /// Stack along columns.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    Concat(Vec<Var>, Axis),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Flatten(Var),
    Gather(Var, Vec<usize>),
    CosineDistanceRows(Var, Var),
    WeightedNll { probs: Var, gold: usize, weight: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Transpose(_) => "transpose",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::SumAll(_) => "sum_all",
            Op::Concat(..) => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Flatten(_) => "flatten",
            Op::Gather(..) => "gather",
            Op::CosineDistanceRows(..) => "cosine_distance_rows",
            Op::WeightedNll { .. } => "weighted_nll",
        }
    }
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    /// `None` for parameter leaves, whose values stay in the store.
    value: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Cosine guard: rows whose norm product falls below this are treated as
/// orthogonal (distance 1, zero gradient).
pub const COSINE_EPS: f64 = 1e-12;

/// Probability floor applied before taking logs in the NLL loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Recorded computation for one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

fn empty_store() -> &'static ParamStore {
    static EMPTY: std::sync::OnceLock<ParamStore> = std::sync::OnceLock::new();
    EMPTY.get_or_init(ParamStore::new)
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new(empty_store())
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Records an input tensor; gradients are tracked when it requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (rows, cols) = t.dims2()?;
        Ok(self.push_raw(rows, cols, Some(t.values().to_vec()), Op::Leaf, t.requires_grad()))
    }

    /// Records a detached constant.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::dim("constant", format!("{rows}x{cols} vs {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.push_raw(rows, cols, Some(values), Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<Var> {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Binds a named parameter (once per tape; repeated calls return the same node).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let (rows, cols) = self.params.by_id(id).dims2()?;
        let v = self.push_raw(rows, cols, None, Op::Param(id), true);
        self.bound.insert(id, v);
        Ok(v)
    }

    fn push_raw(&mut self, rows: usize, cols: usize, value: Option<Vec<f64>>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = self.inputs_need_grad(&op);
        Ok(self.push_raw(rows, cols, Some(value), op, needs_grad))
    }

    fn inputs_need_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf | Op::Param(_) => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleBy(a, b)
            | Op::CosineDistanceRows(a, b) => ng(a) || ng(b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Flatten(a)
            | Op::Gather(a, _) => ng(a),
            Op::Concat(parts, _) => parts.iter().any(ng),
            Op::WeightedNll { probs, .. } => ng(probs),
        }
    }

    // ── inspection ──────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(values), _) => values,
            (None, Op::Param(id)) => self.params.by_id(*id).values(),
            (None, _) => unreachable!("only parameter leaves borrow their values"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.shape(v) {
            (1, 1) => Ok(self.value(v)[0]),
            s => Err(Error::Contract(format!("expected a scalar, got {}x{}", s.0, s.1))),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("tape values are finite and well-shaped")
    }

    pub fn to_rows(&self, v: Var) -> Vec<Vec<f64>> {
        let (_, c) = self.shape(v);
        self.value(v).chunks(c).map(<[f64]>::to_vec).collect()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        Error::ShapeMismatch {
            op,
            left: vec![ar, ac],
            right: vec![br, bc],
        }
    }

    // ── ops ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.shape(a);
        let (q2, r) = self.shape(b);
        if q != q2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a), self.value(b), p, q, r);
        self.push(p, r, out, Op::MatMul(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op.name(), a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x` (r×c) plus the row vector `bias` (1×c) broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(self.mismatch("add_row", x, bias));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push(r, c, out, Op::AddRow(x, bias))
    }

    /// Scales row `i` of `x` (r×c) by `s[i]` where `s` is r×1.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(s) != (r, 1) {
            return Err(self.mismatch("scale_rows", x, s));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        self.push(r, c, out, Op::ScaleRows(x, s))
    }

    /// Multiplies every entry of `x` by the recorded 1×1 scalar `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(self.mismatch("scale_by", x, s));
        }
        let k = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * k).collect();
        let (r, c) = self.shape(x);
        self.push(r, c, out, Op::ScaleBy(x, s))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * k).collect();
        let (r, c) = self.shape(x);
        self.push(r, c, out, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + k).collect();
        let (r, c) = self.shape(x);
        self.push(r, c, out, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let (r, c) = self.shape(x);
        self.push(r, c, out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let (r, c) = self.shape(x);
        self.push(r, c, out, Op::Sigmoid(x))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        self.push(r, c, out, Op::SoftmaxRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = transpose_raw(self.value(x), r, c);
        self.push(c, r, out, Op::Transpose(x))
    }

    /// Sums over rows: r×c → 1×c.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.shape(x);
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.push(1, c, out, Op::SumRows(x))
    }

    /// Sums over columns: r×c → r×1.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).chunks(c).map(|row| row.iter().sum()).collect();
        self.push(r, 1, out, Op::SumCols(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let (r0, c0) = self.shape(first);
        match axis {
            Axis::Rows => {
                let mut rows = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if c != c0 {
                        return Err(self.mismatch("concat", first, p));
                    }
                    rows += r;
                    out.extend_from_slice(self.value(p));
                }
                self.push(rows, c0, out, Op::Concat(parts.to_vec(), axis))
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if r != r0 {
                        return Err(self.mismatch("concat", first, p));
                    }
                    cols += c;
                }
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        let (_, c) = self.shape(p);
                        out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                self.push(r0, cols, out, Op::Concat(parts.to_vec(), axis))
            }
        }
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(r, len, out, Op::SliceCols(x, start))
    }

    /// Row-major flatten to 1×(r·c).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).to_vec();
        self.push(1, r * c, out, Op::Flatten(x))
    }

    /// Embedding-row lookup: output row i is row `indices[i]` of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if indices.is_empty() {
            return Err(Error::Contract("gather needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather", format!("row {bad} out of {r}")));
        }
        let t = self.value(table);
        let out = indices.iter().flat_map(|&i| t[i * c..(i + 1) * c].iter().copied()).collect();
        self.push(indices.len(), c, out, Op::Gather(table, indices.to_vec()))
    }

    /// Per-row cosine distance `1 − cos(a_i, b_i)` → r×1, with the zero-norm guard.
    pub fn cosine_distance_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("cosine_distance_rows", a, b));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .chunks(c)
            .zip(self.value(b).chunks(c))
            .map(|(x, y)| {
                let (dot, nx, ny) = dot_norms(x, y);
                if nx * ny < COSINE_EPS {
                    1.0
                } else {
                    1.0 - dot / (nx * ny)
                }
            })
            .collect();
        self.push(r, 1, out, Op::CosineDistanceRows(a, b))
    }

    /// `−weight · ln(max(probs[gold], floor))` for a 1×c probability row.
    pub fn weighted_nll(&mut self, probs: Var, gold: usize, weight: f64) -> Result<Var> {
        let (r, c) = self.shape(probs);
        if r != 1 || gold >= c {
            return Err(Error::dim("weighted_nll", format!("gold {gold} for {r}x{c} probabilities")));
        }
        let p = self.value(probs)[gold].max(PROB_FLOOR);
        self.push(1, 1, vec![-weight * p.ln()], Op::WeightedNll { probs, gold, weight })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, visiting each recorded node once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut param_grads: BTreeMap<usize, ParamGrad> = BTreeMap::new();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, contrib: Vec<f64>| {
                if self.nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], contrib);
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => {
                    param_grads.entry(*id).or_insert_with(|| ParamGrad::Dense(vec![0.0; g.len()])).add_dense(&g);
                }
                Op::MatMul(a, b) => {
                    let (p, q) = self.shape(*a);
                    let (_, r) = self.shape(*b);
                    if self.nodes[a.0].needs_grad {
                        // dA = G · Bᵀ
                        let bt = transpose_raw(self.value(*b), q, r);
                        send(&mut grads, *a, matmul_raw(&g, &bt, p, r, q));
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = Aᵀ · G
                        let at = transpose_raw(self.value(*a), p, q);
                        send(&mut grads, *b, matmul_raw(&at, &g, q, p, r));
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::AddRow(x, bias) => {
                    let c = node.cols;
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    send(&mut grads, *bias, db);
                    send(&mut grads, *x, g);
                }
                Op::ScaleRows(x, s) => {
                    let c = node.cols;
                    let sv = self.value(*s);
                    let xv = self.value(*x);
                    let dx = g.chunks(c).zip(sv).flat_map(|(row, &k)| row.iter().map(move |v| v * k)).collect();
                    let ds = g
                        .chunks(c)
                        .zip(xv.chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    send(&mut grads, *x, dx);
                    send(&mut grads, *s, ds);
                }
                Op::ScaleBy(x, s) => {
                    let k = self.value(*s)[0];
                    let ds = g.iter().zip(self.value(*x)).map(|(a, b)| a * b).sum();
                    send(&mut grads, *x, g.iter().map(|v| v * k).collect());
                    send(&mut grads, *s, vec![ds]);
                }
                Op::Scale(x, k) => {
                    send(&mut grads, *x, g.iter().map(|v| v * k).collect());
                }
                Op::AddScalar(x) => {
                    send(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let y = self.value(Var(idx));
                    send(&mut grads, *x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Sigmoid(x) => {
                    let y = self.value(Var(idx));
                    send(&mut grads, *x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::SoftmaxRows(x) => {
                    let c = node.cols;
                    let y = self.value(Var(idx));
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Transpose(x) => {
                    send(&mut grads, *x, transpose_raw(&g, node.rows, node.cols));
                }
                Op::SumRows(x) => {
                    let (r, _) = self.shape(*x);
                    send(&mut grads, *x, g.repeat(r));
                }
                Op::SumCols(x) => {
                    let (_, c) = self.shape(*x);
                    send(&mut grads, *x, g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect());
                }
                Op::SumAll(x) => {
                    let (r, c) = self.shape(*x);
                    send(&mut grads, *x, vec![g[0]; r * c]);
                }
                Op::Concat(parts, axis) => match axis {
                    Axis::Rows => {
                        let mut offset = 0;
                        for &p in parts {
                            let n = self.value(p).len();
                            send(&mut grads, p, g[offset..offset + n].to_vec());
                            offset += n;
                        }
                    }
                    Axis::Cols => {
                        let total = node.cols;
                        let mut col = 0;
                        for &p in parts {
                            let (r, c) = self.shape(p);
                            let mut dp = Vec::with_capacity(r * c);
                            for i in 0..r {
                                dp.extend_from_slice(&g[i * total + col..i * total + col + c]);
                            }
                            send(&mut grads, p, dp);
                            col += c;
                        }
                    }
                },
                Op::SliceRows(x, start) => {
                    let (r, c) = self.shape(*x);
                    let mut dx = vec![0.0; r * c];
                    dx[start * c..start * c + g.len()].copy_from_slice(&g);
                    send(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = self.shape(*x);
                    let len = node.cols;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Flatten(x) => {
                    send(&mut grads, *x, g);
                }
                Op::Gather(table, indices) => {
                    let c = node.cols;
                    if let Op::Param(id) = self.nodes[table.0].op {
                        let entry = param_grads.entry(id).or_insert_with(|| ParamGrad::Rows(BTreeMap::new()));
                        for (row, &i) in g.chunks(c).zip(indices) {
                            entry.add_row(i, c, row);
                        }
                    } else {
                        let (r, _) = self.shape(*table);
                        let mut dt = vec![0.0; r * c];
                        for (row, &i) in g.chunks(c).zip(indices) {
                            dt[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        send(&mut grads, *table, dt);
                    }
                }
                Op::CosineDistanceRows(a, b) => {
                    let c = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Vec::with_capacity(av.len());
                    let mut db = Vec::with_capacity(bv.len());
                    for ((x, y), &gi) in av.chunks(c).zip(bv.chunks(c)).zip(&g) {
                        let (dot, nx, ny) = dot_norms(x, y);
                        if nx * ny < COSINE_EPS {
                            da.extend(std::iter::repeat_n(0.0, c));
                            db.extend(std::iter::repeat_n(0.0, c));
                            continue;
                        }
                        let inv = 1.0 / (nx * ny);
                        // d(1 − cos)/dx = −(y/(|x||y|) − cos · x/|x|²)
                        let cos = dot * inv;
                        da.extend(x.iter().zip(y).map(|(xi, yi)| -gi * (yi * inv - cos * xi / (nx * nx))));
                        db.extend(x.iter().zip(y).map(|(xi, yi)| -gi * (xi * inv - cos * yi / (ny * ny))));
                    }
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::WeightedNll { probs, gold, weight } => {
                    let p = self.value(*probs)[*gold];
                    let mut dp = vec![0.0; self.value(*probs).len()];
                    if p > PROB_FLOOR {
                        dp[*gold] = -g[0] * weight / p;
                    }
                    send(&mut grads, *probs, dp);
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: self.nodes[i].op.name() });
                }
            }
        }
        for g in param_grads.values() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients {
            leaves: grads,
            params: param_grads,
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
        None => *slot = Some(contrib),
    }
}

/// Gradient for one parameter: dense, or row-sparse when it only fed lookups.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

impl ParamGrad {
    fn add_dense(&mut self, g: &[f64]) {
        match self {
            ParamGrad::Dense(d) => d.iter_mut().zip(g).for_each(|(d, v)| *d += v),
            ParamGrad::Rows(rows) => {
                let c = rows.values().next().map_or(1, Vec::len);
                let mut dense = g.to_vec();
                for (&i, row) in rows.iter() {
                    dense[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                *self = ParamGrad::Dense(dense);
            }
        }
    }

    fn add_row(&mut self, i: usize, c: usize, row: &[f64]) {
        match self {
            ParamGrad::Dense(d) => d[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(d, v)| *d += v),
            ParamGrad::Rows(rows) => rows
                .entry(i)
                .or_insert_with(|| vec![0.0; c])
                .iter_mut()
                .zip(row)
                .for_each(|(d, v)| *d += v),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            ParamGrad::Dense(d) => d.iter().all(|v| v.is_finite()),
            ParamGrad::Rows(rows) => rows.values().flatten().all(|v| v.is_finite()),
        }
    }

    /// Adds `scale ·` this gradient into a dense buffer of the parameter's size.
    pub fn add_into(&self, dst: &mut [f64], scale: f64) {
        match self {
            ParamGrad::Dense(d) => dst.iter_mut().zip(d).for_each(|(o, v)| *o += scale * v),
            ParamGrad::Rows(rows) => {
                let c = rows.values().next().map_or(1, Vec::len);
                for (&i, row) in rows {
                    dst[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(o, v)| *o += scale * v);
                }
            }
        }
    }

    pub fn to_dense(&self, numel: usize) -> Vec<f64> {
        let mut out = vec![0.0; numel];
        self.add_into(&mut out, 1.0);
        out
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    params: BTreeMap<usize, ParamGrad>,
}

impl Gradients {
    /// Gradient w.r.t. a gradient-tracking leaf recorded with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Result<&[f64]> {
        self.leaves
            .get(v.0)
            .and_then(Option::as_deref)
            .ok_or(Error::AbsentGradient)
    }

    /// Gradient w.r.t. a parameter by store id; `None` when it did not reach the loss.
    pub fn param(&self, id: usize) -> Option<&ParamGrad> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &ParamGrad)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }
}

impl ParamStore {
    /// Adds `scale · grad` into each touched parameter's gradient slot.
    pub fn accumulate_grads(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            g.add_into(self.by_id_mut(id).grad_mut(), scale);
        }
    }
}

// ── raw kernels ────────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aik * b);
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: usize, cols: usize, v: Vec<f64>) -> Var {
        tape.leaf(&Tensor::matrix(rows, cols, v).unwrap().with_requires_grad(true)).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut t = Tape::default();
        let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[2.0, 3.0, 4.0, 5.0]);

        let a = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = t.constant(2, 1, vec![3.0, 4.0]).unwrap();
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::default();
        let a = t.zeros(2, 3).unwrap();
        let b = t.zeros(2, 3).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::default();
        let x = t.constant(3, 3, vec![0.0, 0.0, 0.0, 1000.0, 1000.0, 0.0, 2f64.ln(), 0.0, f64::MIN / 2.0]).unwrap();
        // third row uses a very negative third logit; first two entries carry the mass
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for j in 0..3 {
            assert!((v[j] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 0.5).abs() < 1e-15 && (v[4] - 0.5).abs() < 1e-15);
        assert!((v[6] - 2.0 / 3.0).abs() < 1e-15 && (v[7] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn square_and_fan_out() {
        let mut t = Tape::default();
        let x = leaf(&mut t, 1, 1, vec![3.0]);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);

        let mut t = Tape::default();
        let x = leaf(&mut t, 1, 1, vec![1.0]);
        let y = t.add(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut t = Tape::default();
        let x = leaf(&mut t, 1, 2, vec![1.0, 2.0]);
        let c = t.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let y = t.mul(x, c).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(matches!(g.wrt(c), Err(Error::AbsentGradient)));
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut t = Tape::default();
        let x = t.constant(1, 1, vec![1e300]).unwrap();
        let err = t.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn gather_into_param_is_row_sparse() {
        let mut store = ParamStore::new();
        store.insert("emb", Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap()).unwrap();
        let mut t = Tape::new(&store);
        let e = t.param("emb").unwrap();
        let rows = t.gather(e, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(rows), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = t.sum_all(rows).unwrap();
        let g = t.backward(s).unwrap();
        match g.param(0).unwrap() {
            ParamGrad::Rows(rows) => {
                assert_eq!(rows.len(), 2);
                assert_eq!(rows[&2], vec![2.0, 2.0]);
                assert_eq!(rows[&0], vec![1.0, 1.0]);
            }
            other => panic!("expected row-sparse gradient, got {other:?}"),
        }
    }

    #[test]
    fn cosine_guard_and_extremes() {
        let mut t = Tape::default();
        let a = t.constant(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = t.constant(3, 2, vec![2.0, 0.0, 0.0, 3.0, 1.0, 1.0]).unwrap();
        let r = t.cosine_distance_rows(a, b).unwrap();
        assert_eq!(t.value(r), &[0.0, 1.0, 1.0]);
    }
}
