use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    TransposeLastTwo(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Dropout {
        a: Var,
        mask: Vec<f32>,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Huber {
        a: Var,
        b: Var,
        delta: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Nodes are appended in evaluation
/// order, so the record is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

fn split_last_two(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    (numel(&shape[..r - 2]), shape[r - 2], shape[r - 1])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient after [`Tape::backward`]; every trainable leaf has one, zero when
    /// the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.shape(v).to_vec();
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(shape, g).expect("grad matches shape"))
    }

    // ----- primitives -------------------------------------------------------

    /// `[.., m, k] · [.., k, n]` with equal leading dims, or any `[.., m, k]`
    /// times a shared `[k, n]` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (batch, m, k) = split_last_two(&sa);
        let (_, k2, n) = split_last_two(&sb);
        let shared_b = sb.len() == 2;
        if k != k2 || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0f32; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if shared_b {
                gemm(batch * m, k, n, av, (k, 1), bv, (n, 1), &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        (k, 1),
                        &bv[i * k * n..(i + 1) * k * n],
                        (n, 1),
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last dimension of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} does not match last dim of {:?}", self.shape(bias), self.shape(a)),
            ));
        }
        let bv = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(v, Op::AddBias(a, bias), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose_last_two", format!("rank >= 2 required, got {s:?}")));
        }
        let (batch, r, c) = split_last_two(&s);
        let v = transpose(self.value(a).data(), batch, r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, v)?, Op::TransposeLastTwo(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_last_dim", "no operands".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        if self.shape(*first).is_empty() {
            return Err(shape_err("concat_last_dim", "scalars cannot be concatenated".into()));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err(
                    "concat_last_dim",
                    format!("leading dims of {s:?} do not match {lead:?}"),
                ));
            }
            total += s[lead.len()];
        }
        let rows = numel(&lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                let w = v.last_dim();
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} is invalid for {s:?}"),
            ));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { a, axis, start, end }, rg))
    }

    pub fn softmax_last_dim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(shape_err("softmax_last_dim", "scalar input".into()));
        }
        let d = x.last_dim();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| (e / sum) as f32));
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Softmax(a), rg))
    }

    /// Normalizes each last-dim row to zero mean and unit variance, then applies
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(x).is_empty() || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?} with gamma {:?} and beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v as f64 - mean) * r;
                xhat.push(h);
                out.push((h * g[j] as f64 + b[j] as f64) as f32);
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x as f64).0 as f32).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Inverted dropout with a mask drawn from `seed`. Identity when `train` is
    /// false or `p` is zero.
    pub fn dropout(&mut self, a: Var, p: f32, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Dropout { a, mask }, rg))
    }

    /// Replaces elements where `mask` is true by `value`; those elements pass no
    /// gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f32) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(shape_err(
                "masked_fill",
                format!("mask of {} entries for input {:?}", mask.len(), self.shape(a)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            v,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// `x · W + b` for a `[.., d_in]` input, `[d_in, d_out]` weight and `[d_out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: f64 = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Mean(a), rg)
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel().max(1) as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s as f32), Op::Mse(a, b), rg))
    }

    /// Mean Huber penalty: `e²/2` for `|e| ≤ δ`, else `δ(|e| − δ/2)`.
    pub fn huber(&mut self, a: Var, b: Var, delta: f32) -> Result<Var> {
        self.same_shape("huber", a, b)?;
        if !(delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
        }
        let d = delta as f64;
        let n = self.value(a).numel().max(1) as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let e = (x as f64 - y as f64).abs();
                if e <= d {
                    0.5 * e * e
                } else {
                    d * (e - 0.5 * d)
                }
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s as f32), Op::Huber { a, b, delta }, rg))
    }

    // ----- reverse pass -----------------------------------------------------

    /// Accumulates `∂loss/∂v` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_with(loss, Tensor::full(self.shape(loss), 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return Err(shape_err(
                "backward",
                format!("seed {:?} does not match output {:?}", seed.shape(), self.shape(out)),
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if self.nodes[out.0].requires_grad {
            self.grads[out.0] = Some(seed.into_data());
        }
        for i in (0..=out.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for i in 0..self.nodes.len() {
            let n = &self.nodes[i];
            if matches!(n.op, Op::Leaf) && n.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; n.value.numel()]);
            }
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v` (zero-initialized on first use);
    /// skipped when `v` needs no gradient.
    fn with_grad(&mut self, v: Var, f: impl FnOnce(&mut [f32], &[Node])) {
        let nodes = &self.nodes;
        if !nodes[v.0].requires_grad {
            return;
        }
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
        f(g, nodes);
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                self.with_grad(a, |ga, nodes| {
                    let bv = nodes[b.0].value.data();
                    if shared_b {
                        gemm(batch * m, n, k, g, (n, 1), bv, (1, n), ga, true);
                    } else {
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                (n, 1),
                                &bv[t * k * n..(t + 1) * k * n],
                                (1, n),
                                &mut ga[t * m * k..(t + 1) * m * k],
                                true,
                            );
                        }
                    }
                });
                self.with_grad(b, |gb, nodes| {
                    let av = nodes[a.0].value.data();
                    if shared_b {
                        gemm(k, batch * m, n, av, (1, k), g, (n, 1), gb, true);
                    } else {
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                (1, k),
                                &g[t * m * n..(t + 1) * m * n],
                                (n, 1),
                                &mut gb[t * k * n..(t + 1) * k * n],
                                true,
                            );
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.with_grad(a, |ga, _| axpy(ga, g, 1.0));
                self.with_grad(b, |gb, _| axpy(gb, g, 1.0));
            }
            &Op::AddBias(a, bias) => {
                self.with_grad(a, |ga, _| axpy(ga, g, 1.0));
                self.with_grad(bias, |gb, _| {
                    let d = gb.len();
                    let mut acc = vec![0.0f64; d];
                    for row in g.chunks(d) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v as f64;
                        }
                    }
                    for (dst, s) in gb.iter_mut().zip(acc) {
                        *dst = (*dst as f64 + s) as f32;
                    }
                });
            }
            &Op::Sub(a, b) => {
                self.with_grad(a, |ga, _| axpy(ga, g, 1.0));
                self.with_grad(b, |gb, _| axpy(gb, g, -1.0));
            }
            &Op::Mul(a, b) => {
                self.with_grad(a, |ga, nodes| {
                    for ((dst, &u), &y) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *dst += u * y;
                    }
                });
                self.with_grad(b, |gb, nodes| {
                    for ((dst, &u), &x) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *dst += u * x;
                    }
                });
            }
            &Op::Scale(a, s) => self.with_grad(a, |ga, _| axpy(ga, g, s)),
            &Op::TransposeLastTwo(a) => {
                self.with_grad(a, |ga, nodes| {
                    // g has the transposed shape [.., c, r]; map it back to [.., r, c].
                    let (batch, r, c) = split_last_two(nodes[a.0].value.shape());
                    let back = transpose(g, batch, c, r);
                    axpy(ga, &back, 1.0);
                });
            }
            &Op::Reshape(a) => self.with_grad(a, |ga, _| axpy(ga, g, 1.0)),
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    self.with_grad(*p, |gp, _| {
                        for (r, dst) in gp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            axpy(dst, src, 1.0);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice { a, axis, start, end } => {
                self.with_grad(a, |ga, nodes| {
                    let s = nodes[a.0].value.shape();
                    let inner = numel(&s[axis + 1..]);
                    let width = (end - start) * inner;
                    for (o, src) in g.chunks(width.max(1)).enumerate().take(numel(&s[..axis])) {
                        let base = o * s[axis] * inner + start * inner;
                        axpy(&mut ga[base..base + width], src, 1.0);
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let d = self.nodes[i].value.last_dim();
                self.with_grad(a, |ga, _| {
                    for ((dst, yr), gr) in ga.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(&p, &u)| p as f64 * u as f64).sum();
                        for ((o, &p), &u) in dst.iter_mut().zip(yr).zip(gr) {
                            *o = (*o as f64 + p as f64 * (u as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                self.with_grad(*gamma, |gg, _| {
                    let mut acc = vec![0.0f64; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((s, &u), &h) in acc.iter_mut().zip(gr).zip(hr) {
                            *s += u as f64 * h;
                        }
                    }
                    for (dst, s) in gg.iter_mut().zip(acc) {
                        *dst = (*dst as f64 + s) as f32;
                    }
                });
                self.with_grad(*beta, |gb, _| {
                    let mut acc = vec![0.0f64; d];
                    for gr in g.chunks(d) {
                        for (s, &u) in acc.iter_mut().zip(gr) {
                            *s += u as f64;
                        }
                    }
                    for (dst, s) in gb.iter_mut().zip(acc) {
                        *dst = (*dst as f64 + s) as f32;
                    }
                });
                self.with_grad(*x, |gx, nodes| {
                    let gam = nodes[gamma.0].value.data();
                    for (r, ((dst, gr), hr)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(&u, &w)| u as f64 * w as f64).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, &dv), &h) in dst.iter_mut().zip(&dh).zip(hr) {
                            *o = (*o as f64 + rstd[r] * (dv - mean_dh - h * mean_dh_h)) as f32;
                        }
                    }
                });
            }
            &Op::Gelu(a) => {
                self.with_grad(a, |ga, nodes| {
                    for ((dst, &u), &x) in ga.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *dst = (*dst as f64 + u as f64 * gelu(x as f64).1) as f32;
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.with_grad(*a, |ga, _| {
                    for ((dst, &u), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *dst += u * m;
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                self.with_grad(*a, |ga, _| {
                    for ((dst, &u), &m) in ga.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *dst += u;
                        }
                    }
                });
            }
            &Op::Sum(a) => self.with_grad(a, |ga, _| ga.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(a) => self.with_grad(a, |ga, _| {
                let s = (g[0] as f64 / ga.len().max(1) as f64) as f32;
                ga.iter_mut().for_each(|v| *v += s)
            }),
            &Op::Mse(a, b) => {
                let coef = 2.0 * g[0] as f64 / self.value(a).numel().max(1) as f64;
                let diff: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| coef * (x as f64 - y as f64))
                    .collect();
                self.with_grad(a, |ga, _| add_f64(ga, &diff, 1.0));
                self.with_grad(b, |gb, _| add_f64(gb, &diff, -1.0));
            }
            &Op::Huber { a, b, delta } => {
                let coef = g[0] as f64 / self.value(a).numel().max(1) as f64;
                let d = delta as f64;
                let diff: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| coef * (x as f64 - y as f64).clamp(-d, d))
                    .collect();
                self.with_grad(a, |ga, _| add_f64(ga, &diff, 1.0));
                self.with_grad(b, |gb, _| add_f64(gb, &diff, -1.0));
            }
        }
        self.nodes[i].op = op;
    }
}

fn axpy(dst: &mut [f32], src: &[f32], s: f32) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn add_f64(dst: &mut [f32], src: &[f64], s: f64) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (*d as f64 + s * v) as f32;
    }
}

fn transpose(src: &[f32], batch: usize, r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for b in 0..batch {
        let (s, d) = (&src[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c]);
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU value and derivative.
fn gelu(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax_last_dim(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let want = naive_matmul(a.data(), b.data(), 2, 3, 2);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(c), [2, 2]);
        for (x, y) in tape.value(c).data().iter().zip(want) {
            assert!((*x as f64 - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_and_shared_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb, vw) = (tape.constant(a.clone()), tape.constant(b.clone()), tape.constant(w.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.matmul(va, vw).unwrap();
        assert_eq!(tape.shape(c), [2, 3, 5]);
        for i in 0..2 {
            let want = naive_matmul(&a.data()[i * 12..], &b.data()[i * 20..], 3, 4, 5);
            let want_s = naive_matmul(&a.data()[i * 12..], w.data(), 3, 4, 5);
            for j in 0..15 {
                assert!((tape.value(c).data()[i * 15 + j] as f64 - want[j]).abs() < 1e-5);
                assert!((tape.value(s).data()[i * 15 + j] as f64 - want_s[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul") && err.to_string().contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
        let bias = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.add_bias(a, bias), Err(Error::Shape { op: "add_bias", .. })));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let xx = tape.mul(x, x).unwrap();
        let loss = tape.sum(xx);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), [6.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 1.0, 1.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { op: "backward", .. })));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 16], 3.0, &mut rng));
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "{mean} {var}");
        }
    }

    #[test]
    fn masked_positions_get_zero_probability() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[0.1, 0.5, -0.3, 2.0, 1.0, 0.0]));
        let mask = [false, true, false, false, false, true];
        let filled = tape.masked_fill(x, &mask, f32::NEG_INFINITY).unwrap();
        let p = tape.softmax_last_dim(filled).unwrap();
        let pv = tape.value(p).data().to_vec();
        assert_eq!((pv[1], pv[5]), (0.0, 0.0));
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().is_finite());
    }

    #[test]
    fn huber_and_mse_at_constant_offset() {
        let mut tape = Tape::new();
        let y = tape.constant(t(&[2, 2], &[0.0, 1.0, -1.0, 3.0]));
        let yhat = tape.constant(t(&[2, 2], &[2.0, 3.0, 1.0, 5.0]));
        let mse = tape.mse(yhat, y).unwrap();
        let huber = tape.huber(yhat, y, 1.0).unwrap();
        assert_eq!(tape.value(mse).item(), 4.0);
        assert_eq!(tape.value(huber).item(), 1.5);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]));
        let l = tape.slice(x, 1, 0, 1).unwrap();
        let r = tape.slice(x, 1, 1, 4).unwrap();
        let back = tape.concat_last_dim(&[l, r]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let rows = tape.slice(x, 0, 1, 2).unwrap();
        assert_eq!(tape.value(rows).data(), [4., 5., 6., 7.]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5, 7], 1.0, &mut rng));
        let eval = tape.dropout(x, 0.3, false, 9).unwrap();
        let p0 = tape.dropout(x, 0.0, true, 9).unwrap();
        assert_eq!(tape.value(eval), tape.value(x));
        assert_eq!(tape.value(p0), tape.value(x));
        let a = tape.dropout(x, 0.5, true, 9).unwrap();
        let b = tape.dropout(x, 0.5, true, 9).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_ne!(tape.value(a), tape.value(x));
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0).0, 0.0);
        // tanh-approximate GELU(1) = 0.5 (1 + tanh(sqrt(2/pi) 1.044715))
        let want = 0.5 * (1.0 + (GELU_C * 1.044715f64).tanh());
        assert!((gelu(1.0).0 - want).abs() < 1e-15);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.7, 3.0] {
            let fd = (gelu(x + h).0 - gelu(x - h).0) / (2.0 * h);
            assert!((fd - gelu(x).1).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000, spread in 0.1f32..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[rows, cols], spread, &mut rng));
            let y = tape.softmax_last_dim(x).unwrap();
            for row in tape.value(y).data().chunks(cols) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_oracle_random_shapes(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let want = naive_matmul(a.data(), b.data(), m, k, n);
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a), tape.constant(b));
            let c = tape.matmul(va, vb).unwrap();
            for (x, y) in tape.value(c).data().iter().zip(want) {
                prop_assert!((*x as f64 - y).abs() < 1e-5);
            }
        }

        #[test]
        fn dropout_eval_is_identity(p in 0.0f32..0.95, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
            let y = tape.dropout(x, p, false, seed).unwrap();
            prop_assert_eq!(tape.value(y), tape.value(x));
        }
    }
}
