//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes can only reference earlier nodes, so the
//! recording order is already a topological order and [`Tape::backward`] just
//! walks it in reverse. Gradients add up across fan-out.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Hadamard(Var, Var),
    Scale(Var, f64),
    Grl(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    XLogX(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward/backward pass.
///
/// A tape is confined to one thread; build a fresh one for every step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    gelu_fault: bool,
}

/// Result of [`Tape::backward`]: gradients of every leaf and parameter node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds every parameter gradient into the matching `grad` slot of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, var) in &self.params {
            if let Some(g) = self.get(*var) {
                store.tensor_mut(*id).accumulate_grad(g);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `C = beta * C + op(A) * op(B)` with `op(A)` of shape m x k and `op(B)` k x n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides above address exactly those ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Numerically stable softmax of one slice, written into `out`.
pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn log_softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Probability clamp used inside binary cross-entropy logs.
pub const BCE_EPS: f64 = 1e-7;

/// Largest f64 below 1.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the GELU backward rule wrong on purpose. Only used as a negative
    /// control for gradient checking.
    #[doc(hidden)]
    pub fn inject_gelu_backward_fault(&mut self) {
        self.gelu_fault = true;
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn build(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op)
    }

    /// Records a constant input. Its gradient is still available after backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    /// Records (once per tape) the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.tensor(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid parameter");
        let v = self.push(value, Op::Param);
        self.params.insert(id, v);
        v
    }

    /// Matrix product. 2-D operands multiply directly; 3-D operands are a batch of
    /// products over the leading axis. With `trans_b` the second operand is used
    /// transposed (its last two axes swapped).
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, kb, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, sa[0], sa[1], kb, n)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], sa[1], sa[2], kb, n)
            }
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    false,
                    &bd[i * k * n..],
                    trans_b,
                    0.0,
                    &mut out[i * m * n..],
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.build(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.build(shape, data, Op::Add(a, b)))
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.build(shape, data, Op::AddRow { x, bias }))
    }

    /// `x @ w + b` on a 2-D input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("hadamard", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.build(shape, data, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.build(shape, data, Op::Scale(x, factor))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Grl(x, lambda))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut data = vec![0.0; self.value(x).numel()];
        for (src, dst) in self.data(x).chunks(d).zip(data.chunks_mut(d)) {
            softmax_slice(src, dst);
        }
        let shape = self.shape(x).to_vec();
        self.build(shape, data, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut data = vec![0.0; self.value(x).numel()];
        for (src, dst) in self.data(x).chunks(d).zip(data.chunks_mut(d)) {
            log_softmax_slice(src, dst);
        }
        let shape = self.shape(x).to_vec();
        self.build(shape, data, Op::LogSoftmax(x))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).numel() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let g = self.data(gain);
            let b = self.data(bias);
            for (r, row) in self.data(x).chunks(d).enumerate() {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.build(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu_value(v)).collect();
        let shape = self.shape(x).to_vec();
        self.build(shape, data, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| {
                let y = if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                };
                // Kept strictly inside (0, 1) where f64 would round to an endpoint.
                y.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.build(shape, data, Op::Sigmoid(x))
    }

    /// Natural log. Inputs must be positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|v| **v <= 0.0) {
            return Err(Error::Validation(format!("log of non-positive value {bad}")));
        }
        let data = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.build(shape, data, Op::Log(x)))
    }

    /// `x ln x` elementwise with `0 ln 0 = 0`. Inputs must be non-negative.
    pub fn xlogx(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|v| **v < 0.0) {
            return Err(Error::Validation(format!("x ln x of negative value {bad}")));
        }
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v == 0.0 { 0.0 } else { v * v.ln() })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.build(shape, data, Op::XLogX(x)))
    }

    /// `out[i] = x[index[i]]` (flat indices), reshaped to `shape`. Repeated
    /// indices broadcast; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let src = self.data(x);
        let bound = src.len();
        if let Some(&bad) = index.iter().find(|&&i| i >= bound) {
            return Err(Error::Index {
                what: "gather source",
                index: bad,
                bound,
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(self.build(shape, data, Op::Gather { x, index }))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start > end || end > s[0] {
            return Err(Error::shape("rows", &s, &[start, end]));
        }
        let cols = s[1];
        self.gather(x, (start * cols..end * cols).collect(), vec![end - start, cols])
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let mut shape = sa;
        shape[0] += sb[0];
        Ok(self.build(shape, data, Op::Concat(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.build(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.build(vec![], vec![s], Op::Mean(x))
    }

    /// Mean over the first axis of a 2-D tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("mean_rows", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; cols];
        for row in self.data(x).chunks(cols) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        Ok(self.build(vec![cols], out, Op::MeanRows(x)))
    }

    /// Mean over the batch of `-ln softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: classes,
            });
        }
        let mut probs = vec![0.0; s[0] * classes];
        let mut logp = vec![0.0; classes];
        let mut loss = 0.0;
        for (i, row) in self.data(logits).chunks(classes).enumerate() {
            softmax_slice(row, &mut probs[i * classes..(i + 1) * classes]);
            log_softmax_slice(row, &mut logp);
            loss -= logp[labels[i]];
        }
        loss /= labels.len() as f64;
        Ok(self.build(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `targets`.
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the logs.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        if self.value(p).numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape("binary_cross_entropy", self.shape(p), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss = self
            .data(p)
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.build(
            vec![],
            vec![loss],
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul {
                    a,
                    b,
                    trans_b,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let ad = self.data(*a);
                    let bd = self.data(*b);
                    {
                        let ga = slot(&mut grads, *a, ad.len());
                        for t in 0..*batch {
                            let gt = &g[t * m * n..];
                            let bt = &bd[t * k * n..];
                            // dA = G B^T, or G B when B was used transposed.
                            gemm(m, n, k, gt, false, bt, !trans_b, 1.0, &mut ga[t * m * k..]);
                        }
                    }
                    {
                        let gb = slot(&mut grads, *b, bd.len());
                        for t in 0..*batch {
                            let gt = &g[t * m * n..];
                            let at = &ad[t * m * k..];
                            if *trans_b {
                                gemm(n, m, k, gt, true, at, false, 1.0, &mut gb[t * k * n..]);
                            } else {
                                gemm(k, m, n, at, true, gt, false, 1.0, &mut gb[t * k * n..]);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::AddRow { x, bias } => {
                    add_into(slot(&mut grads, *x, g.len()), &g);
                    let d = self.value(*bias).numel();
                    let gb = slot(&mut grads, *bias, d);
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
                Op::Hadamard(a, b) => {
                    let ad = self.data(*a);
                    let bd = self.data(*b);
                    let ga = slot(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
                Op::Scale(x, f) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * f;
                    }
                }
                Op::Grl(x, lambda) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        gx[j] += -lambda * g[j];
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((ys, gs), out) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((ys, gs), out) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let total: f64 = gs.iter().sum();
                        for j in 0..d {
                            out[j] += gs[j] - ys[j].exp() * total;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = node.value.last_dim();
                    let gd = self.data(*gain).to_vec();
                    {
                        let gg = slot(&mut grads, *gain, d);
                        for (gs, hs) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gs[j] * hs[j];
                            }
                        }
                    }
                    {
                        let gbias = slot(&mut grads, *bias, d);
                        for gs in g.chunks(d) {
                            add_into(gbias, gs);
                        }
                    }
                    let gx = slot(&mut grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, ((gs, hs), out)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gs[j] * gd[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hs).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hs[j] * mean_dh_h);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xd = self.data(*x);
                    let fault = self.gelu_fault;
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        let mut dv = gelu_derivative(xd[j]);
                        if fault {
                            dv *= 1.05;
                        }
                        gx[j] += g[j] * dv;
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
                Op::Log(x) => {
                    let xd = self.data(*x);
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] / xd[j];
                    }
                }
                Op::XLogX(x) => {
                    let xd = self.data(*x);
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        // d/dx x ln x = ln x + 1; clamp at the origin to stay finite.
                        let v = xd[j].max(f64::MIN_POSITIVE);
                        gx[j] += g[j] * (v.ln() + 1.0);
                    }
                }
                Op::Gather { x, index } => {
                    let n = self.value(*x).numel();
                    let gx = slot(&mut grads, *x, n);
                    for (j, &src) in index.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).numel();
                    add_into(slot(&mut grads, *a, na), &g[..na]);
                    let nb = self.value(*b).numel();
                    add_into(slot(&mut grads, *b, nb), &g[na..]);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    slot(&mut grads, *x, n).iter_mut().for_each(|v| *v += g[0]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    let s = g[0] / n as f64;
                    slot(&mut grads, *x, n).iter_mut().for_each(|v| *v += s);
                }
                Op::MeanRows(x) => {
                    let s = self.shape(*x);
                    let (rows, cols) = (s[0], s[1]);
                    let gx = slot(&mut grads, *x, rows * cols);
                    for row in gx.chunks_mut(cols) {
                        for j in 0..cols {
                            row[j] += g[j] / rows as f64;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = self.value(*logits).last_dim();
                    let scale = g[0] / labels.len() as f64;
                    let gx = slot(&mut grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gx[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
                Op::Bce { p, targets } => {
                    let pd = self.data(*p);
                    let scale = g[0] / targets.len() as f64;
                    let gx = slot(&mut grads, *p, targets.len());
                    for j in 0..targets.len() {
                        let pv = pd[j];
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                            continue;
                        }
                        let y = targets[j];
                        gx[j] += scale * (-(y / pv) + (1.0 - y) / (1.0 - pv));
                    }
                }
            }
            grads[i] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { grads, params })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}
