use super::{GradMap, ParamId, ParamStore, Tensor};
use crate::error::{Result, WegenError};

static DETACHED_STORE: ParamStore = ParamStore::new();

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    AddRow { x: Var, bias: Var },
    MulRow { x: Var, scale: Var },
    Unary { x: Var, kind: Unary },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, kernels: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order of the DAG and the backward pass is
/// one reverse sweep that visits each node once.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl Graph<'static> {
    /// A graph not tied to any parameter store.
    pub fn detached() -> Self {
        Graph::new(&DETACHED_STORE)
    }
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(WegenError::shape(op, other, &[0, 0])),
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = acc.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node;
    /// frozen parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let trainable = self.store.is_trainable(id);
        let v = self.push(value, Op::Leaf, trainable);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_rank2("matmul", ta)?;
        let (k2, n) = require_rank2("matmul", tb)?;
        if k != k2 {
            return Err(WegenError::shape("matmul", ta.shape(), tb.shape()));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(WegenError::shape(op, ta.shape(), tb.shape()));
        }
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(t, Op::Affine { x, scale }, rg)
    }

    fn row_broadcast_check(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (m, n) = require_rank2(op, self.value(x))?;
        if self.value(v).numel() != n {
            return Err(WegenError::shape(op, self.shape(x), self.shape(v)));
        }
        Ok((m, n))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast_check("add_row", x, bias)?;
        let (xd, bd) = (self.value(x).data(), self.value(bias).data());
        let out = (0..m * n).map(|i| xd[i] + bd[i % n]).collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow { x, bias }, rg))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast_check("mul_row", x, scale)?;
        let (xd, sd) = (self.value(x).data(), self.value(scale).data());
        let out = (0..m * n).map(|i| xd[i] * sd[i % n]).collect();
        let rg = self.rg(&[x, scale]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MulRow { x, scale }, rg))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = match kind {
            Unary::Sigmoid => tx.map(sigmoid),
            Unary::Tanh => tx.map(f64::tanh),
            Unary::Relu => tx.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Exp => tx.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = tx.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(WegenError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                tx.map(f64::ln)
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Unary { x, kind }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x).expect("tanh is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    /// Shift-stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(WegenError::InvalidAxis {
                op: "softmax",
                axis,
                rank: tx.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(tx.shape(), axis);
        let xd = tx.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xd[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row (last dimension) to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(WegenError::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let n = tx.cols();
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(WegenError::shape("layer_norm", tx.shape(), self.shape(p)));
            }
        }
        let rows = tx.numel() / n.max(1);
        let (xd, gd, bd) = (tx.data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = gd[j] * h + bd[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Length-preserving 1-D convolution with zero padding.
    /// `x: [len × d_in]`, `kernels: [width × d_in × d_out]`, odd `width`.
    pub fn conv1d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernels));
        let (len, d_in) = require_rank2("conv1d", tx)?;
        let &[width, k_in, d_out] = tk.shape() else {
            return Err(WegenError::shape("conv1d", tx.shape(), tk.shape()));
        };
        if k_in != d_in {
            return Err(WegenError::shape("conv1d", tx.shape(), tk.shape()));
        }
        if width % 2 == 0 {
            return Err(WegenError::InvalidArgument(format!(
                "conv1d kernel width must be odd, got {width}"
            )));
        }
        let half = width / 2;
        let (xd, kd) = (tx.data(), tk.data());
        let mut out = vec![0.0; len * d_out];
        for t in 0..len {
            let orow = &mut out[t * d_out..(t + 1) * d_out];
            for j in 0..width {
                let Some(s) = (t + j).checked_sub(half).filter(|&s| s < len) else {
                    continue;
                };
                for i in 0..d_in {
                    let xv = xd[s * d_in + i];
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kd[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let rg = self.rg(&[x, kernels]);
        Ok(self.push(Tensor::new(&[len, d_out], out)?, Op::Conv1d { x, kernels }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(WegenError::Empty("concat parts"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(WegenError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(WegenError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(WegenError::InvalidAxis {
                op: "slice",
                axis,
                rank: tx.rank(),
            });
        }
        if start + len > tx.shape()[axis] {
            return Err(WegenError::InvalidArgument(format!(
                "slice {start}..{} out of bounds for axis {axis} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let (outer, full, inner) = split_at_axis(tx.shape(), axis);
        let xd = tx.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&xd[from..from + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, 0, i, 1)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = require_rank2("transpose", tx)?;
        let xd = tx.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), rg))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    /// Column means of an `m×n` matrix, as `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = require_rank2("mean_rows", tx)?;
        if m == 0 {
            return Err(WegenError::Empty("mean_rows over zero rows"));
        }
        let xd = tx.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xd[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[1, n], out)?, Op::MeanRows(x), rg))
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, dim) = require_rank2("gather_rows", tt)?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(WegenError::TokenOutOfRange { id, size: rows });
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), dim], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Gradients of `loss` with respect to every trainable parameter it
    /// reaches.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let grads = self.sweep(loss)?;
        let mut map = GradMap::new();
        for (id, slot) in self.param_nodes.iter().enumerate() {
            let Some(v) = slot else { continue };
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            if let Some(g) = &grads[v.0] {
                map.insert(ParamId(id), Tensor::new(self.shape(*v), g.clone())?);
            }
        }
        Ok(map)
    }

    /// Gradients of `loss` with respect to arbitrary nodes; zeros for nodes
    /// the loss does not reach.
    pub fn grad_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.sweep(loss)?;
        wrt.iter()
            .map(|v| {
                let shape = self.shape(*v);
                match &grads[v.0] {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Ok(Tensor::zeros(shape)),
                }
            })
            .collect()
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(WegenError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(grads)
    }

    fn backprop_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let bd = val(*b);
                    add_into(&mut grads[a.0], m * k, |ga| {
                        for i in 0..m {
                            let dyr = &dy[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                ga[i * k + p] += dyr.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(*b) {
                    let ad = val(*a);
                    add_into(&mut grads[b.0], k * n, |gb| {
                        for i in 0..m {
                            let dyr = &dy[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (g, &d) in gb[p * n..(p + 1) * n].iter_mut().zip(dyr) {
                                    *g += av * d;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    add_into(&mut grads[a.0], dy.len(), |g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], dy.len(), |g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d)
                    });
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if wants(this) {
                        let od = val(other);
                        add_into(&mut grads[this.0], dy.len(), |g| {
                            for ((g, d), o) in g.iter_mut().zip(dy).zip(od) {
                                *g += d * o;
                            }
                        });
                    }
                }
            }
            Op::Affine { x, scale } => {
                if wants(*x) {
                    add_into(&mut grads[x.0], dy.len(), |g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += scale * d)
                    });
                }
            }
            Op::AddRow { x, bias } => {
                let n = numel(*bias);
                if wants(*x) {
                    add_into(&mut grads[x.0], dy.len(), |g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)
                    });
                }
                if wants(*bias) {
                    add_into(&mut grads[bias.0], n, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % n] += d;
                        }
                    });
                }
            }
            Op::MulRow { x, scale } => {
                let n = numel(*scale);
                if wants(*x) {
                    let sd = val(*scale);
                    add_into(&mut grads[x.0], dy.len(), |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i] += d * sd[i % n];
                        }
                    });
                }
                if wants(*scale) {
                    let xd = val(*x);
                    add_into(&mut grads[scale.0], n, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % n] += d * xd[i];
                        }
                    });
                }
            }
            Op::Unary { x, kind } => {
                if wants(*x) {
                    let y = node.value.data();
                    let xd = val(*x);
                    add_into(&mut grads[x.0], dy.len(), |g| {
                        for i in 0..dy.len() {
                            let local = match kind {
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Tanh => 1.0 - y[i] * y[i],
                                Unary::Relu => {
                                    if xd[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Exp => y[i],
                                Unary::Log => 1.0 / xd[i],
                            };
                            g[i] += dy[i] * local;
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_at_axis(node.value.shape(), *axis);
                    add_into(&mut grads[x.0], dy.len(), |g| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |k: usize| (o * len + k) * inner + i;
                                let dot: f64 = (0..len).map(|k| dy[idx(k)] * y[idx(k)]).sum();
                                for k in 0..len {
                                    g[idx(k)] += y[idx(k)] * (dy[idx(k)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = numel(*gain);
                let rows = inv_std.len();
                if wants(*gain) {
                    add_into(&mut grads[gain.0], n, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % n] += d * xhat[i];
                        }
                    });
                }
                if wants(*bias) {
                    add_into(&mut grads[bias.0], n, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % n] += d;
                        }
                    });
                }
                if wants(*x) {
                    let gd = val(*gain);
                    add_into(&mut grads[x.0], dy.len(), |g| {
                        let mut dxhat = vec![0.0; n];
                        for r in 0..rows {
                            for j in 0..n {
                                dxhat[j] = dy[r * n + j] * gd[j];
                            }
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = (0..n).map(|j| dxhat[j] * xhat[r * n + j]).sum();
                            let scale = inv_std[r] / n as f64;
                            for j in 0..n {
                                g[r * n + j] +=
                                    scale * (n as f64 * dxhat[j] - sum_d - xhat[r * n + j] * sum_dx);
                            }
                        }
                    });
                }
            }
            Op::Conv1d { x, kernels } => {
                let (len, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (width, d_out) = (self.shape(*kernels)[0], self.shape(*kernels)[2]);
                let half = width / 2;
                let (xd, kd) = (val(*x), val(*kernels));
                let taps = |t: usize, j: usize| (t + j).checked_sub(half).filter(|&s| s < len);
                if wants(*x) {
                    add_into(&mut grads[x.0], len * d_in, |g| {
                        for t in 0..len {
                            let dyr = &dy[t * d_out..(t + 1) * d_out];
                            for j in 0..width {
                                let Some(s) = taps(t, j) else { continue };
                                for i in 0..d_in {
                                    let krow = &kd[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                                    g[s * d_in + i] += krow.iter().zip(dyr).map(|(k, d)| k * d).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                if wants(*kernels) {
                    add_into(&mut grads[kernels.0], width * d_in * d_out, |g| {
                        for t in 0..len {
                            let dyr = &dy[t * d_out..(t + 1) * d_out];
                            for j in 0..width {
                                let Some(s) = taps(t, j) else { continue };
                                for i in 0..d_in {
                                    let xv = xd[s * d_in + i];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let grow = &mut g[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                                    for (gk, d) in grow.iter_mut().zip(dyr) {
                                        *gk += xv * d;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if wants(p) {
                        add_into(&mut grads[p.0], outer * len * inner, |g| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                for k in 0..len * inner {
                                    g[dst + k] += dy[src + k];
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if wants(*x) {
                    let (outer, full, inner) = split_at_axis(self.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    add_into(&mut grads[x.0], outer * full * inner, |g| {
                        for o in 0..outer {
                            let dst = (o * full + start) * inner;
                            let src = o * len * inner;
                            for k in 0..len * inner {
                                g[dst + k] += dy[src + k];
                            }
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    add_into(&mut grads[x.0], m * n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += dy[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], numel(*x), |g| g.iter_mut().for_each(|g| *g += dy[0]));
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    add_into(&mut grads[x.0], m * n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += dy[j] / m as f64;
                            }
                        }
                    });
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let dim = self.shape(*table)[1];
                    add_into(&mut grads[table.0], numel(*table), |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..dim {
                                g[id * dim + j] += dy[r * dim + j];
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], dy.len(), |g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)
                    });
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
