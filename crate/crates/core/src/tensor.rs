//! Dense f64 tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! are methods on the tape and return [`Var`] handles; [`Tape::backward`]
//! consumes the tape and walks it once in reverse to produce [`Gradients`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Lower clamp applied to the argument of [`Tape::log`].
pub const LOG_CLAMP: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} must be non-empty and positive")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a `rows.len() × width` matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::dim("ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), width, data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading (batch) dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[self.shape.len() - 1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.numel() / self.rows();
        &self.data[i * w..(i + 1) * w]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(Error::dim("gradient length differs from tensor length"));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Identifies a parameter tensor: the owning registry and its slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub registry: u64,
    pub index: usize,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Square(Var),
    Huber(Var, f64),
    Concat(Var, Var, usize),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Huber(..) => "huber",
            Op::Concat(..) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamKey>,
}

/// Records a forward computation for one reverse pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op: op.to_string() })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha * a · b + beta * c` for row-major `c` of shape m×n, with
/// arbitrary strides on `a` (m×k) and `b` (k×n).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the slices cover every index addressed by the given shapes and
    // strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        Ok(&self.nodes[v.index])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(op.name(), &value.data)?;
        let var = Var {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(var)
    }

    /// Records an input that gradients are tracked for.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Records an input that is treated as a constant.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Records a parameter. Loading the same key twice returns the same
    /// variable, so each parameter has exactly one leaf per tape.
    pub fn param(&mut self, key: ParamKey, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let v = self.push(t.detached(), Op::Leaf, t.requires_grad())?;
        self.nodes[v.index].param = Some(key);
        self.params.insert(key, v);
        Ok(v)
    }

    /// Copy of `v` with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.node(v)?.value.detached();
        self.push(t, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = self.node(x)?;
        let data = n.value.data.iter().map(|&v| f(v)).collect();
        let value = Tensor::new(n.value.shape.clone(), data)?;
        let ng = n.needs_grad;
        self.push(value, op, ng)
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.shape != nb.value.shape {
            return Err(Error::dim(format!(
                "{}: shapes {:?} and {:?} differ",
                op.name(),
                na.value.shape,
                nb.value.shape
            )));
        }
        let data = na
            .value
            .data
            .iter()
            .zip(&nb.value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(na.value.shape.clone(), data)?;
        let ng = na.needs_grad || nb.needs_grad;
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (&na.value.shape, &nb.value.shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &na.value.data,
            (k as isize, 1),
            &nb.value.data,
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let ng = na.needs_grad || nb.needs_grad;
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` bias to every row of a `batch × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x)?, self.node(bias)?);
        let cols = nb.value.numel();
        if nx.value.shape.len() != 2 || nx.value.shape[1] != cols {
            return Err(Error::dim(format!(
                "add_bias of {:?} and {:?}",
                nx.value.shape, nb.value.shape
            )));
        }
        let mut data = nx.value.data.clone();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(&nb.value.data).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(nx.value.shape.clone(), data)?;
        let ng = nx.needs_grad || nb.needs_grad;
        self.push(value, Op::AddBias(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), stable_sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Natural log of `max(x, LOG_CLAMP)`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), |v| v.max(LOG_CLAMP).ln())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Elementwise Huber penalty: `r²/2` for `|r| <= delta`, else
    /// `delta * (|r| - delta/2)`.
    pub fn huber(&mut self, r: Var, delta: f64) -> Result<Var> {
        if delta.is_nan() || delta <= 0.0 {
            return Err(Error::contract(format!("huber delta must be positive, got {delta}")));
        }
        self.unary(r, Op::Huber(r, delta), |v| {
            if v.abs() <= delta {
                0.5 * v * v
            } else {
                delta * (v.abs() - 0.5 * delta)
            }
        })
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (&na.value.shape, &nb.value.shape);
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::dim(format!("concat of {sa:?} and {sb:?} along axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let chunk_a = na.value.numel() / outer;
        let chunk_b = nb.value.numel() / outer;
        let mut data = Vec::with_capacity(na.value.numel() + nb.value.numel());
        for o in 0..outer {
            data.extend_from_slice(&na.value.data[o * chunk_a..(o + 1) * chunk_a]);
            data.extend_from_slice(&nb.value.data[o * chunk_b..(o + 1) * chunk_b]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let ng = na.needs_grad || nb.needs_grad;
        self.push(Tensor::new(shape, data)?, Op::Concat(a, b, axis), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.data.iter().sum();
        let ng = n.needs_grad;
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s: f64 = n.value.data.iter().sum::<f64>() / n.value.numel() as f64;
        let ng = n.needs_grad;
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                root.value.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.index] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
            if !nodes[v.index].needs_grad {
                return;
            }
            match &mut adj[v.index] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                slot @ None => *slot = Some(g),
            }
        }

        let nodes = &self.nodes;
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(up) = adj[i].take() else { continue };
            check_finite(&format!("backward of {} (node {i})", node.op.name()), &up)?;
            let val = |v: Var| &nodes[v.index].value;
            let ng = |v: Var| nodes[v.index].needs_grad;
            match node.op {
                Op::Leaf => {
                    adj[i] = Some(up);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                    if ng(a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &up, (n as isize, 1), &vb.data, (1, n as isize), 0.0, &mut da);
                        acc(&mut adj, nodes, a, da);
                    }
                    if ng(b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &va.data, (1, k as isize), &up, (n as isize, 1), 0.0, &mut db);
                        acc(&mut adj, nodes, b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, nodes, a, up.clone());
                    acc(&mut adj, nodes, b, up);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, nodes, b, up.iter().map(|g| -g).collect());
                    acc(&mut adj, nodes, a, up);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    if ng(a) {
                        acc(&mut adj, nodes, a, up.iter().zip(&vb.data).map(|(g, y)| g * y).collect());
                    }
                    if ng(b) {
                        acc(&mut adj, nodes, b, up.iter().zip(&va.data).map(|(g, x)| g * x).collect());
                    }
                }
                Op::AddBias(x, bias) => {
                    let cols = val(bias).numel();
                    if ng(bias) {
                        let mut db = vec![0.0; cols];
                        for row in up.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        acc(&mut adj, nodes, bias, db);
                    }
                    acc(&mut adj, nodes, x, up);
                }
                Op::Scale(x, c) => acc(&mut adj, nodes, x, up.iter().map(|g| g * c).collect()),
                Op::AddScalar(x) => acc(&mut adj, nodes, x, up),
                Op::Relu(x) => {
                    let g = up
                        .iter()
                        .zip(&val(x).data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(&mut adj, nodes, x, g);
                }
                Op::Sigmoid(x) => {
                    let g = up
                        .iter()
                        .zip(&node.value.data)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    acc(&mut adj, nodes, x, g);
                }
                Op::Tanh(x) => {
                    let g = up
                        .iter()
                        .zip(&node.value.data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    acc(&mut adj, nodes, x, g);
                }
                Op::Log(x) => {
                    let g = up
                        .iter()
                        .zip(&val(x).data)
                        .map(|(g, &v)| if v >= LOG_CLAMP { g / v } else { 0.0 })
                        .collect();
                    acc(&mut adj, nodes, x, g);
                }
                Op::Square(x) => {
                    let g = up.iter().zip(&val(x).data).map(|(g, v)| 2.0 * g * v).collect();
                    acc(&mut adj, nodes, x, g);
                }
                Op::Huber(r, delta) => {
                    let g = up
                        .iter()
                        .zip(&val(r).data)
                        .map(|(g, &v)| if v.abs() <= delta { g * v } else { g * delta * v.signum() })
                        .collect();
                    acc(&mut adj, nodes, r, g);
                }
                Op::Concat(a, b, axis) => {
                    let (va, vb) = (val(a), val(b));
                    let outer: usize = va.shape[..axis].iter().product();
                    let ca = va.numel() / outer;
                    let cb = vb.numel() / outer;
                    let mut ga = Vec::with_capacity(va.numel());
                    let mut gb = Vec::with_capacity(vb.numel());
                    for chunk in up.chunks(ca + cb) {
                        ga.extend_from_slice(&chunk[..ca]);
                        gb.extend_from_slice(&chunk[ca..]);
                    }
                    acc(&mut adj, nodes, a, ga);
                    acc(&mut adj, nodes, b, gb);
                }
                Op::Sum(x) => acc(&mut adj, nodes, x, vec![up[0]; val(x).numel()]),
                Op::Mean(x) => {
                    let n = val(x).numel();
                    acc(&mut adj, nodes, x, vec![up[0] / n as f64; n]);
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(&k, &v)| (k, v.index))
            .collect::<HashMap<_, _>>();
        Ok(Gradients {
            tape: self.id,
            grads: adj,
            params,
        })
    }
}

/// Result of a reverse pass: adjoints of every leaf that tracks gradients.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamKey, usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, or `None` when no
    /// differentiable path connects them.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Parameters that were loaded onto the tape, with their gradient if
    /// one reached them.
    pub fn params(&self) -> impl Iterator<Item = (ParamKey, Option<&[f64]>)> + '_ {
        self.params
            .iter()
            .map(|(&k, &i)| (k, self.grads[i].as_deref()))
    }

    pub fn param(&self, key: ParamKey) -> Option<&[f64]> {
        self.params.get(&key).and_then(|&i| self.grads[i].as_deref())
    }

    pub fn was_loaded(&self, key: ParamKey) -> bool {
        self.params.contains_key(&key)
    }
}
