use rand::Rng;

use super::kernels::{gelu, gelu_grad, gemm, softmax_row};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum MatMulLayout {
    /// `b` is a plain matrix shared by every batch entry of `a`.
    SharedRhs,
    /// `a` is a plain matrix shared by every batch entry of `b`.
    SharedLhs,
    /// Equal batch dimensions, paired entry by entry.
    Paired,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul {
        a: Var,
        b: Var,
        layout: MatMulLayout,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    TransposeLast2 {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    SwapAxes12(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectPosition {
        x: Var,
        pos: usize,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mse {
        a: Var,
        b: Var,
        row_valid: Option<Vec<bool>>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A define-by-run gradient tape.
///
/// Single-threaded by contract: a graph is built, differentiated once and
/// then dropped. Values are never mutated after being recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ------------------------------------------------------------------
    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!(
                "add: shapes {} and {} differ",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!(
                "mul: shapes {} and {} differ",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// `x[..., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "add_bias: bias {} does not match last dimension of {}",
                shape_str(self.shape(bias)),
                shape_str(self.shape(x))
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|x| x * factor).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| gelu(x)).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Gelu(x))
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without recording.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Dropout { x, mask }))
    }

    // ------------------------------------------------------------------
    // linear algebra and layout

    /// Batched matrix product `a[.., m, k] · b[.., k, n]`.
    ///
    /// Batch dimensions must either match exactly or be absent on one side,
    /// in which case that operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || {
            Error::dim(format!(
                "matmul: incompatible shapes {} and {}",
                shape_str(&sa),
                shape_str(&sb)
            ))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (layout, batch, mut out_shape) = if bb.is_empty() {
            (MatMulLayout::SharedRhs, ba.iter().product(), ba.to_vec())
        } else if ba.is_empty() {
            (MatMulLayout::SharedLhs, bb.iter().product(), bb.to_vec())
        } else if ba == bb {
            (MatMulLayout::Paired, ba.iter().product(), ba.to_vec())
        } else {
            return Err(err());
        };
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            match layout {
                MatMulLayout::SharedRhs => gemm(batch * m, k, n, av, false, bv, false, &mut out, false),
                MatMulLayout::SharedLhs => {
                    for i in 0..batch {
                        gemm(
                            m,
                            k,
                            n,
                            av,
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            false,
                            &mut out[i * m * n..(i + 1) * m * n],
                            false,
                        );
                    }
                }
                MatMulLayout::Paired => {
                    for i in 0..batch {
                        gemm(
                            m,
                            k,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            false,
                            &mut out[i * m * n..(i + 1) * m * n],
                            false,
                        );
                    }
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::MatMul {
                a,
                b,
                layout,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim(format!(
                "transpose_last2 needs rank >= 2, got {}",
                shape_str(&s)
            )));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let src = self.value(x).data();
        let out = transpose_blocks(src, batch, rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::TransposeLast2 { x, batch, rows, cols },
        ))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`, the head split/merge permutation.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "swap_axes12 needs rank 4, got {}",
                shape_str(&s)
            )));
        }
        let out = swap12(self.value(x).data(), s[0], s[1], s[2], s[3]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?,
            rg,
            Op::SwapAxes12(x),
        ))
    }

    // ------------------------------------------------------------------
    // normalisation

    /// Softmax over the last dimension, stabilised by max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last (key) axis of `scores[b, .., q, k]` where keys
    /// with `key_valid[b*k + j] == false` receive probability exactly 0.
    pub fn masked_softmax(&mut self, scores: Var, key_valid: &[bool]) -> Result<Var> {
        let s = self.shape(scores);
        if s.len() < 2 || key_valid.len() != s[0] * s[s.len() - 1] {
            return Err(Error::dim(format!(
                "masked_softmax: key mask of length {} does not fit scores {}",
                key_valid.len(),
                shape_str(s)
            )));
        }
        self.softmax_impl(scores, Some(key_valid))
    }

    fn softmax_impl(&mut self, x: Var, key_valid: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if v.numel() == 0 || d == 0 || v.ndim() == 0 {
            return Err(Error::dim(format!(
                "softmax of empty tensor {}",
                shape_str(v.shape())
            )));
        }
        let rows_per_batch = v.numel() / v.shape()[0] / d;
        let mut data = v.data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            let mask = key_valid.map(|m| {
                let b = r / rows_per_batch;
                &m[b * d..(b + 1) * d]
            });
            softmax_row(row, mask);
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Softmax(x)))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layernorm: gain {} / bias {} must match last dimension of {}",
                shape_str(self.shape(gain)),
                shape_str(self.shape(bias)),
                shape_str(self.shape(x))
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bv[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    // ------------------------------------------------------------------
    // indexing and reductions

    /// Row lookup: `table[V, d]` gathered at `ids`, reshaped to
    /// `lead_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::dim(format!(
                "embedding table must be 2-D, got {}",
                shape_str(ts)
            )));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if lead_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim(format!(
                "embedding: {} ids do not fill shape {}",
                ids.len(),
                shape_str(lead_shape)
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `x[b, l, d] -> x[:, pos, :]` of shape `[b, d]`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pos >= s[1] {
            return Err(Error::dim(format!(
                "select_position {pos} on shape {}",
                shape_str(&s)
            )));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let off = (i * l + pos) * d;
            data.extend_from_slice(&xv[off..off + d]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![b, d], data)?, rg, Op::SelectPosition { x, pos }))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::dim(format!(
                "mean_axis {axis} on shape {}",
                shape_str(&s)
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    // ------------------------------------------------------------------
    // losses

    /// Mean squared difference over valid entries.
    ///
    /// `row_valid`, when given, has one flag per row of the leading shape
    /// (all dimensions but the last). With no valid entry the result is 0.
    pub fn mse(&mut self, a: Var, b: Var, row_valid: Option<&[bool]>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!(
                "mse: shapes {} and {} differ",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let f = self.value(a).last_dim();
        let rows = if f == 0 { 0 } else { self.value(a).numel() / f };
        if let Some(m) = row_valid {
            if m.len() != rows {
                return Err(Error::dim(format!(
                    "mse: valid mask of length {} for {rows} rows of {}",
                    m.len(),
                    shape_str(sa)
                )));
            }
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut total = 0.0;
        let mut valid_rows = 0;
        for r in 0..rows {
            if row_valid.is_none_or(|m| m[r]) {
                valid_rows += 1;
                for j in r * f..(r + 1) * f {
                    let d = av[j] - bv[j];
                    total += d * d;
                }
            }
        }
        let count = valid_rows * f;
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Mse {
                a,
                b,
                row_valid: row_valid.map(<[bool]>::to_vec),
                count,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::dim(format!(
                "cross_entropy: logits {} with {} labels",
                shape_str(&s),
                labels.len()
            )));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{classes}"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut nll = 0.0;
        for (i, row) in lv.chunks(classes).enumerate() {
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            // the max term contributes exactly 1; ln_1p keeps the rest precise
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            let log_norm = rest.ln_1p();
            let lse = max + log_norm;
            nll += (max - row[labels[i]]) + log_norm;
            for (p, v) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(nll / batch as f64),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Back-propagates from a scalar `root`, accumulating into every
    /// gradient-requiring node it reaches.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim(format!(
                "backward from non-scalar {}",
                shape_str(self.shape(root))
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, delta) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.rg(*bias) {
                    let d = self.value(*bias).numel();
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Scale(x, f) => {
                if self.rg(*x) {
                    out.push((*x, g.iter().map(|v| v * f).collect()));
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).numel()]));
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    out.push((*x, g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect()));
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    out.push((*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()));
                }
            }
            Op::MatMul {
                a,
                b,
                layout,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n, batch) = (*m, *k, *n, *batch);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                match layout {
                    MatMulLayout::SharedRhs => {
                        if self.rg(*a) {
                            let mut ga = vec![0.0; batch * m * k];
                            gemm(batch * m, n, k, g, false, bv, true, &mut ga, false);
                            out.push((*a, ga));
                        }
                        if self.rg(*b) {
                            let mut gb = vec![0.0; k * n];
                            gemm(k, batch * m, n, av, true, g, false, &mut gb, false);
                            out.push((*b, gb));
                        }
                    }
                    MatMulLayout::SharedLhs => {
                        if self.rg(*a) {
                            let mut ga = vec![0.0; m * k];
                            for i in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..(i + 1) * m * n],
                                    false,
                                    &bv[i * k * n..(i + 1) * k * n],
                                    true,
                                    &mut ga,
                                    true,
                                );
                            }
                            out.push((*a, ga));
                        }
                        if self.rg(*b) {
                            let mut gb = vec![0.0; batch * k * n];
                            for i in 0..batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    av,
                                    true,
                                    &g[i * m * n..(i + 1) * m * n],
                                    false,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                    false,
                                );
                            }
                            out.push((*b, gb));
                        }
                    }
                    MatMulLayout::Paired => {
                        if self.rg(*a) {
                            let mut ga = vec![0.0; batch * m * k];
                            for i in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..(i + 1) * m * n],
                                    false,
                                    &bv[i * k * n..(i + 1) * k * n],
                                    true,
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                    false,
                                );
                            }
                            out.push((*a, ga));
                        }
                        if self.rg(*b) {
                            let mut gb = vec![0.0; batch * k * n];
                            for i in 0..batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &av[i * m * k..(i + 1) * m * k],
                                    true,
                                    &g[i * m * n..(i + 1) * m * n],
                                    false,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                    false,
                                );
                            }
                            out.push((*b, gb));
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::TransposeLast2 { x, batch, rows, cols } => {
                if self.rg(*x) {
                    // the output is batch × cols × rows
                    out.push((*x, transpose_blocks(g, *batch, *cols, *rows)));
                }
            }
            Op::SwapAxes12(x) => {
                if self.rg(*x) {
                    let s = node.value.shape();
                    out.push((*x, swap12(g, s[0], s[1], s[2], s[3])));
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), dst) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.rg(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    out.push((*gain, gg));
                }
                if self.rg(*bias) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, gb));
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((gr, xr), dst)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dst[j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let d = self.value(*table).last_dim();
                    let mut gt = vec![0.0; self.value(*table).numel()];
                    for (t, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[t * d..(t + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((*table, gt));
                }
            }
            Op::SelectPosition { x, pos } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (b, l, d) = (s[0], s[1], s[2]);
                    let mut gx = vec![0.0; b * l * d];
                    for i in 0..b {
                        let off = (i * l + pos) * d;
                        gx[off..off + d].copy_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    out.push((*x, gx));
                }
            }
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                if self.rg(*x) {
                    let inv = 1.0 / *len as f64;
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..*len {
                            let off = (o * len + a) * inner;
                            gx[off..off + inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d = s * inv);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Mse {
                a,
                b,
                row_valid,
                count,
            } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let f = self.value(*a).last_dim();
                let mut ga = vec![0.0; av.len()];
                if *count > 0 {
                    let c = 2.0 * g[0] / *count as f64;
                    for (r, (dst, (ar, br))) in ga
                        .chunks_mut(f)
                        .zip(av.chunks(f).zip(bv.chunks(f)))
                        .enumerate()
                    {
                        if row_valid.as_ref().is_none_or(|m| m[r]) {
                            for j in 0..f {
                                dst[j] = c * (ar[j] - br[j]);
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    out.push((*b, ga.iter().map(|v| -v).collect()));
                }
                if self.rg(*a) {
                    out.push((*a, ga));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.rg(*logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = g[0] / batch as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        gl[i * classes + y] -= scale;
                    }
                    out.push((*logits, gl));
                }
            }
        }
        out
    }
}

fn transpose_blocks(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

fn swap12(src: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn matmul_batch_layouts_agree() {
        // paired vs shared-rhs give the same product when the rhs repeats
        let mut g = Graph::new();
        let a_data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let w: Vec<f64> = (0..6).map(|v| 1.0 - v as f64).collect();
        let a = g.constant(Tensor::new(vec![2, 2, 3], a_data).unwrap());
        let shared = g.constant(Tensor::new(vec![3, 2], w.clone()).unwrap());
        let mut rep = w.clone();
        rep.extend(&w);
        let paired = g.constant(Tensor::new(vec![2, 3, 2], rep).unwrap());
        let c1 = g.matmul(a, shared).unwrap();
        let c2 = g.matmul(a, paired).unwrap();
        assert_eq!(g.value(c1), g.value(c2));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 2], vec![0.0, 0.0, 1000.0, 1000.0, 0.0, 3f64.ln()]).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!(close(v[4], 0.25, 1e-15) && close(v[5], 0.75, 1e-15));
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax_lastdim(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn masked_softmax_zeroes_pad_keys() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 50.0, 0.3, 0.1, -4.0]).unwrap());
        let y = g.masked_softmax(x, &[true, true, false]).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!(close(v[0] + v[1], 1.0, 1e-12));
    }

    #[test]
    fn layernorm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::from_rows(&[&[5.0, 5.0, 5.0]]));
        let y = g.layernorm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x2 = g.constant(Tensor::from_rows(&[&[1.0, 3.0]]));
        let y2 = g.layernorm(x2, one2, zero2, 1e-5).unwrap();
        let v = g.value(y2).data();
        assert!(close(v[0], -1.0, 1e-4) && close(v[1], 1.0, 1e-4));

        let gain0 = g.constant(Tensor::zeros(&[2]));
        let bias = g.constant(Tensor::new(vec![2], vec![0.7, -2.0]).unwrap());
        let x3 = g.constant(Tensor::from_rows(&[&[9.0, -3.0], &[0.1, 0.2]]));
        let y3 = g.layernorm(x3, gain0, bias, 1e-5).unwrap();
        assert_eq!(g.value(y3).data(), &[0.7, -2.0, 0.7, -2.0]);
    }

    #[test]
    fn layernorm_rejects_wrong_gain() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::zeros(&[2]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.layernorm(x, gain, bias, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let l = g.mse(a, b, None).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        let same = g.mse(b, b, None).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let a2 = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b2 = g.constant(Tensor::zeros(&[2, 2]));
        let none = g.mse(a2, b2, Some(&[false, false])).unwrap();
        assert_eq!(g.value(none).item(), 0.0);
        g.backward(none).unwrap();
        assert_eq!(g.grad(a2).unwrap(), &[0.0; 4]);

        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.mse(a, c, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let eq = g.constant(Tensor::from_rows(&[&[0.3, 0.3]]));
        let l = g.cross_entropy(eq, &[1]).unwrap();
        assert!(close(g.value(l).item(), std::f64::consts::LN_2, 1e-15));

        let sharp = g.constant(Tensor::from_rows(&[&[10.0, -10.0]]));
        let l = g.cross_entropy(sharp, &[0]).unwrap();
        // ln(1 + e^-20)
        assert!(close(g.value(l).item(), (-20f64).exp().ln_1p(), 1e-20));
        assert!(close(g.value(l).item(), 2.06e-9, 1e-11));

        let zeros = g.constant(Tensor::zeros(&[4, 2]));
        let l = g.cross_entropy(zeros, &[0, 1, 1, 0]).unwrap();
        assert!(close(g.value(l).item(), std::f64::consts::LN_2, 1e-15));

        assert!(matches!(g.cross_entropy(zeros, &[0, 2, 1, 0]), Err(Error::Validation(_))));
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::new();
        let t = g.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.embedding(t, &[0, 3], &[1, 2]), Err(Error::Validation(_))));
    }

    #[test]
    fn backward_populates_reachable_leaves() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::zeros(&[2]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        assert!(g.grad(unused).is_none());
    }
}
