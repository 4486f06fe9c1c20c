//! Arena tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. Node indices are
//! assigned in execution order, so walking the arena backwards is a valid
//! reverse topological order and visits each node exactly once.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, split_axis};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;
pub const BCE_CLAMP: f32 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Loss reduction over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    MeanPool {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    L2NormRows(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Bce {
        p: Var,
        targets: Vec<f32>,
        reduction: Reduction,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward pass and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`. Variables that received no
    /// gradient contribute zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` fed to any ReLU on the tape (infinity without ReLUs).
    /// Finite differences are only meaningful when this exceeds the step.
    pub fn relu_margin(&self) -> f32 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flatten()
            .fold(f32::INFINITY, |m, v| m.min(v.abs()))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose trainability follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold valid tensors")
    }

    // ---- forward operations ------------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched matmul: `[B×m×k] · [B×k×n]`, or `[B×m×k] · [B×n×k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for bi in 0..batch {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            let cb = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f32, f32) -> f32,
    ) -> Result<(Vec<usize>, Vec<f32>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb.iter().product::<usize>() != n || sb.len() > 2 || (sb.len() == 2 && sb[0] != 1) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let bv = self.value(bias);
        let out: Vec<f32> = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        let shape = sx.to_vec();
        Ok(self.push(shape, out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax axis out of range"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mut mx = f32::NEG_INFINITY;
                for i in 0..n {
                    mx = mx.max(xv[idx(i)]);
                }
                let mut sum = 0.0;
                for i in 0..n {
                    let e = libm::expf(xv[idx(i)] - mx);
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[idx(i)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n < 2 {
            return Err(Error::invalid("layer_norm needs at least 2 features per row"));
        }
        if self.shape(gain).iter().product::<usize>() != n || self.shape(bias).iter().product::<usize>() != n {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rs = 1.0 / libm::sqrtf(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for i in 0..n {
                let h = (row[i] - mean) * rs;
                xhat[r * n + i] = h;
                out[r * n + i] = h * gv[i] + bv[i];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("mean_pool axis out of range"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv[(o * n + i) * inner..(o * n + i + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / n as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::MeanPool { x, axis }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let np = self.shape(p)[axis];
                let block = np * inner;
                out.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Euclidean norm of each row along the last axis.
    pub fn l2_norm_rowwise(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let out: Vec<f32> = self
            .value(x)
            .chunks_exact(n)
            .map(|r| libm::sqrtf(r.iter().map(|v| v * v).sum()))
            .collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        self.push(out_shape, out, Op::L2NormRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f32>() / v.len() as f32;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let (v, rg) = (self.value(x).to_vec(), self.rg(x));
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    /// Binary cross-entropy of probabilities `p` against `targets`, with
    /// `p` clamped to `[1e-7, 1 - 1e-7]` before the logarithms.
    pub fn bce(&mut self, p: Var, targets: &[f32], reduction: Reduction) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(Error::shape("bce", self.shape(p), &[targets.len()]));
        }
        if pv.is_empty() {
            return Err(Error::invalid("bce over an empty batch"));
        }
        let mut total = 0.0f32;
        for (&pi, &c) in pv.iter().zip(targets) {
            total += bce_term(pi, c);
        }
        if reduction == Reduction::Mean {
            total /= pv.len() as f32;
        }
        let rg = self.rg(p);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::Bce {
                p,
                targets: targets.to_vec(),
                reduction,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::invalid("backward requires a scalar loss"));
        }
        if !ln.value[0].is_finite() {
            return Err(Error::invalid("loss is not finite"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |da| gemm_nt(g, bv, da, m, n, k));
                acc(*b, &mut |db| gemm_tn(av, g, db, m, k, n));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |da| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let db = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // dA = dC · B
                            gemm_nn(gb, bb, db, m, n, k);
                        } else {
                            // dA = dC · Bᵀ
                            gemm_nt(gb, bb, db, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |dbuf| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let db = &mut dbuf[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB[n×k] = dCᵀ · A
                            gemm_tn(gb, ab, db, m, n, k);
                        } else {
                            // dB[k×n] = Aᵀ · dC
                            gemm_tn(ab, gb, db, m, k, n);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| {
                    let n = d.len();
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y * s));
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let mut dot = 0.0;
                            for i in 0..n {
                                dot += g[idx(i)] * y[idx(i)];
                            }
                            for i in 0..n {
                                d[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *node.shape.last().unwrap();
                let gv = &self.nodes[gain.0].value;
                acc(*x, &mut |d| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let row = r * n..(r + 1) * n;
                        let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for i in 0..n {
                            let dh = gr[i] * gv[i];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[i];
                        }
                        mean_dh /= n as f32;
                        mean_dh_h /= n as f32;
                        for i in 0..n {
                            let dh = gr[i] * gv[i];
                            d[r * n + i] += rs * (dh - mean_dh - hr[i] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for i in 0..n {
                            d[i] += gr[i] * hr[i];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in g.chunks_exact(n) {
                        d.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MeanPool { x, axis } => {
                let (outer, n, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                let inv = 1.0 / n as f32;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for i in 0..n {
                            let dst = &mut d[(o * n + i) * inner..(o * n + i + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y * inv);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let np = self.nodes[p.0].shape[*axis];
                    let block = np * inner;
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let start = o * total * inner + offset * inner;
                            let src = &g[start..start + block];
                            d[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += np;
                }
            }
            Op::L2NormRows(x) => {
                let xv = &self.nodes[x.0].value;
                let n = *self.nodes[x.0].shape.last().unwrap();
                let norms = &node.value;
                acc(*x, &mut |d| {
                    for (r, &nr) in norms.iter().enumerate() {
                        // subgradient 0 at the origin
                        if nr == 0.0 {
                            continue;
                        }
                        let s = g[r] / nr;
                        for i in 0..n {
                            d[r * n + i] += s * xv[r * n + i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                acc(*x, &mut |d| {
                    let s = g[0] / d.len() as f32;
                    d.iter_mut().for_each(|v| *v += s);
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Bce { p, targets, reduction } => {
                let pv = &self.nodes[p.0].value;
                let scale = match reduction {
                    Reduction::Sum => g[0],
                    Reduction::Mean => g[0] / pv.len() as f32,
                };
                acc(*p, &mut |d| {
                    for i in 0..d.len() {
                        let q = pv[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        let c = targets[i];
                        d[i] += scale * (-(c / q) + (1.0 - c) / (1.0 - q));
                    }
                });
            }
        }
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::expf(-v))
    } else {
        let e = libm::expf(v);
        e / (1.0 + e)
    }
}

/// Per-sample binary cross-entropy with the standard probability clamp.
pub fn bce_term(p: f32, c: f32) -> f32 {
    let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(c * libm::logf(q) + (1.0 - c) * libm::logf(1.0 - q))
}
