//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is applied, caching the forward
//! value on the node. Nodes are appended in evaluation order, so the node
//! list is already topologically sorted and [`Graph::backward`] walks it in
//! reverse. Graphs are built fresh for every evaluation; there is no API to
//! mutate a recorded node.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Values for the named leaf slots of a graph.
pub type Bindings = HashMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Constant,
    MatMul,
    /// Elementwise add, or bias add when the right operand is a row vector.
    Add,
    Sub,
    Mul,
    /// `scale · x + shift`
    Affine { scale: f64, shift: f64 },
    Sigmoid,
    Silu,
    Log,
    /// `log(sigmoid(x))`, evaluated without forming `sigmoid(x)`.
    LogSigmoid,
    Sum,
    Mean,
    SquaredNorm,
    /// Column-wise concatenation of two matrices with equal row counts.
    Concat,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid => "sigmoid",
            Op::Silu => "silu",
            Op::Log => "log",
            Op::LogSigmoid => "log_sigmoid",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SquaredNorm => "squared_norm",
            Op::Concat => "concat",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: [Option<NodeId>; 2],
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    bindings: Option<Bindings>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose leaves are resolved by name through [`Graph::input`].
    pub fn with_bindings(bindings: Bindings) -> Self {
        Self {
            bindings: Some(bindings),
            ..Self::default()
        }
    }

    /// Looks up a bound slot, registering it as a leaf on first use.
    pub fn input(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let value = self
            .bindings
            .as_ref()
            .and_then(|b| b.get(name))
            .cloned()
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))?;
        Ok(self.leaf(name, value))
    }

    /// Registers a named leaf directly. Re-registering a name returns the
    /// existing node.
    pub fn leaf(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf, [None, None], value);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, [None, None], value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: [Option<NodeId>; 2], value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, inputs: [Option<NodeId>; 2], shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let value = Tensor::new_finite(shape, data, op.name())?;
        Ok(self.push(op, inputs, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = mat_dims(av.shape(), true);
        let (k2, n) = mat_dims(bv.shape(), false);
        if k != k2 || av.ndim() > 2 || bv.ndim() > 2 || av.ndim() == 0 || bv.ndim() == 0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = gemm(av.data(), bv.data(), m, k, n, false, false);
        let shape = match (av.ndim(), bv.ndim()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![],
        };
        self.push_checked(Op::MatMul, [Some(a), Some(b)], shape, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect()
        } else if is_bias_for(av.shape(), bv.shape()) {
            let c = av.cols();
            av.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv.data()[i % c])
                .collect()
        } else {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let shape = av.shape().to_vec();
        self.push_checked(Op::Add, [Some(a), Some(b)], shape, data)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push_checked(Op::Sub, [Some(a), Some(b)], v.shape().to_vec(), v.to_vec())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push_checked(Op::Mul, [Some(a), Some(b)], v.shape().to_vec(), v.to_vec())
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push_checked(Op::Affine { scale, shift }, [Some(a), None], v.shape().to_vec(), v.to_vec())
    }

    pub fn scale(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        self.affine(a, scale, 0.0)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a, sigmoid)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Silu, a, |x| x * sigmoid(x))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::LogSigmoid, a, log_sigmoid)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = self.value(a).map(f);
        self.push_checked(op, [Some(a), None], v.shape().to_vec(), v.to_vec())
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push_checked(Op::Sum, [Some(a), None], vec![], vec![s])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let s = v.sum() / v.len() as f64;
        self.push_checked(Op::Mean, [Some(a), None], vec![], vec![s])
    }

    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).squared_norm();
        self.push_checked(Op::SquaredNorm, [Some(a), None], vec![], vec![s])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.rows() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        self.push_checked(Op::Concat, [Some(a), Some(b)], vec![n, p + q], data)
    }

    /// Reverse-mode gradients of the scalar `output` with respect to the
    /// named leaves. A leaf that does not influence the output receives a
    /// zero gradient.
    pub fn backward(&self, output: NodeId, wrt: &[&str]) -> Result<HashMap<String, Tensor>> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = *self
                .leaves
                .get(*name)
                .ok_or_else(|| Error::UnknownLeaf(name.to_string()))?;
            targets.push((name.to_string(), id));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut result = HashMap::with_capacity(targets.len());
        for (name, id) in targets {
            let shape = self.value(id).shape().to_vec();
            let g = match grads.get(id.0).cloned().flatten() {
                Some(g) => Tensor::new_finite(shape, g, "backward")?,
                None => Tensor::zeros(&shape),
            };
            result.insert(name, g);
        }
        Ok(result)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let input = |k: usize| node.inputs[k].expect("op input");
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = mat_dims(av.shape(), true);
                let (_, n) = mat_dims(bv.shape(), false);
                // dA = G·Bᵀ (m×n · n×k), dB = Aᵀ·G (k×m · m×n)
                let da = gemm(g, bv.data(), m, n, k, false, true);
                let db = gemm(av.data(), g, k, m, n, true, false);
                accumulate(grads, a, &da);
                accumulate(grads, b, &db);
            }
            Op::Add => {
                let (a, b) = (input(0), input(1));
                accumulate(grads, a, g);
                let bv = self.value(b);
                if bv.len() == g.len() {
                    accumulate(grads, b, g);
                } else {
                    let c = bv.len();
                    let mut db = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        db[i % c] += v;
                    }
                    accumulate(grads, b, &db);
                }
            }
            Op::Sub => {
                accumulate(grads, input(0), g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, input(1), &neg);
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                accumulate(grads, a, &da);
                accumulate(grads, b, &db);
            }
            Op::Affine { scale, .. } => {
                let da: Vec<f64> = g.iter().map(|v| v * scale).collect();
                accumulate(grads, input(0), &da);
            }
            Op::Sigmoid => {
                let y = node.value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(grads, input(0), &da);
            }
            Op::Silu => {
                let x = self.value(input(0)).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, input(0), &da);
            }
            Op::Log => {
                let x = self.value(input(0)).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                accumulate(grads, input(0), &da);
            }
            Op::LogSigmoid => {
                let x = self.value(input(0)).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(g, &x)| g * sigmoid(-x)).collect();
                accumulate(grads, input(0), &da);
            }
            Op::Sum => {
                let n = self.value(input(0)).len();
                accumulate(grads, input(0), &vec![g[0]; n]);
            }
            Op::Mean => {
                let n = self.value(input(0)).len();
                accumulate(grads, input(0), &vec![g[0] / n as f64; n]);
            }
            Op::SquaredNorm => {
                let x = self.value(input(0)).data();
                let da: Vec<f64> = x.iter().map(|x| 2.0 * x * g[0]).collect();
                accumulate(grads, input(0), &da);
            }
            Op::Concat => {
                let (a, b) = (input(0), input(1));
                let (p, q) = (self.value(a).cols(), self.value(b).cols());
                let n = self.value(a).rows();
                let mut da = Vec::with_capacity(n * p);
                let mut db = Vec::with_capacity(n * q);
                for i in 0..n {
                    let row = &g[i * (p + q)..(i + 1) * (p + q)];
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                accumulate(grads, a, &da);
                accumulate(grads, b, &db);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Matrix view of a tensor: a vector is a row on the left of a product and a
/// column on the right.
fn mat_dims(shape: &[usize], left: bool) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 if left => (1, shape[0]),
        1 => (shape[0], 1),
        _ => (1, 1),
    }
}

fn is_bias_for(a: &[usize], b: &[usize]) -> bool {
    if a.len() != 2 {
        return false;
    }
    match b {
        [c] => *c == a[1],
        [1, c] => *c == a[1],
        _ => false,
    }
}

/// Builds a graph over `bindings` and returns the value of its output node.
pub fn evaluate(
    bindings: &Bindings,
    build: impl FnOnce(&mut Graph) -> Result<NodeId>,
) -> Result<Tensor> {
    let mut g = Graph::with_bindings(bindings.clone());
    let out = build(&mut g)?;
    Ok(g.value(out).clone())
}

/// Builds a graph over `bindings` and returns gradients of its scalar output
/// with respect to the named leaves.
pub fn backward(
    bindings: &Bindings,
    build: impl FnOnce(&mut Graph) -> Result<NodeId>,
    wrt: &[&str],
) -> Result<HashMap<String, Tensor>> {
    let mut g = Graph::with_bindings(bindings.clone());
    let out = build(&mut g)?;
    g.backward(out, wrt)
}

/// Largest relative disagreement between the autodiff gradient of
/// `scalar_fn` at `x` and a central finite difference with the given step.
pub fn grad_check<F>(scalar_fn: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |v: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf("x", v.clone());
        let out = scalar_fn(&mut g, xid)?;
        let y = g.value(out);
        if !y.is_scalar() {
            return Err(Error::NonScalarOutput(y.shape().to_vec()));
        }
        if !y.item().is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(y.item())
    };

    let mut g = Graph::new();
    let xid = g.leaf("x", x.clone());
    let out = scalar_fn(&mut g, xid)?;
    let ad = g.backward(out, &["x"])?.remove("x").expect("x gradient");

    let mut worst: f64 = 0.0;
    let mut buf = x.to_vec();
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + step;
        let plus = eval(&Tensor::new(x.shape().to_vec(), buf.clone())?)?;
        buf[i] = orig - step;
        let minus = eval(&Tensor::new(x.shape().to_vec(), buf.clone())?)?;
        buf[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let rel = (ad.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
