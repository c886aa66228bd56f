//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse
//! and returns the gradient of every node that depends on a leaf created
//! with `requires_grad = true`.
//!
//! Besides the elementwise and matrix primitives, a handful of fused
//! kernels (multi-head attention, layer normalization, im2col, the two
//! classification losses) carry hand-written backward passes; they are
//! covered by finite-difference tests at the bottom of this file.

use std::cell::{Ref, RefCell};

use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    NormalizeRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<f64> },
    Im2Col { x: Var, geom: ConvGeometry },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    TileRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    MeanRowGroups(Var, usize),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor, norm: f64 },
    SigmoidFocal { logits: Var, targets: Tensor, alpha: f64, gamma: f64, norm: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Spatial layout of an NHWC feature map flattened to `(B*H*W) x C` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(out_row, out_col, in_row)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_row = (b * oh + oy) * ow + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let in_row = (b * self.height + iy as usize) * self.width + ix as usize;
                            f(out_row, (ky * self.kernel + kx) * self.channels, in_row);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-element sigmoid focal loss and its derivative with respect to the logit.
pub(crate) fn focal_term(x: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    // p_t is the probability assigned to the target label.
    let (pt, log_pt, alpha_t, sign) = if y > 0.5 {
        (sigmoid(x), -softplus(-x), alpha, 1.0)
    } else {
        (sigmoid(-x), -softplus(x), 1.0 - alpha, -1.0)
    };
    let one_minus = 1.0 - pt;
    let mod_factor = one_minus.powf(gamma);
    let loss = -alpha_t * mod_factor * log_pt;
    let bracket = one_minus * mod_factor - gamma * mod_factor * pt * log_pt;
    (loss, -sign * alpha_t * bracket)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar node");
        t.data()[0]
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            zip_map(&nodes[a.0].value, &nodes[b.0].value, f)
        };
        self.push(value, op, self.rg(&[a, b]))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, self.rg(&[a]))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::max, Op::Maximum(a, b))
    }

    /// `a (m x n) + b (1 x n)`, broadcasting `b` over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, bias) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(bias.shape(), (1, x.cols()), "add_row bias shape");
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bb;
                }
            }
            out
        };
        self.push(value, Op::AddRow(a, b), self.rg(&[a, b]))
    }

    pub fn scale(&self, a: Var, f: f64) -> Var {
        self.unary(a, |x| x * f, Op::Scale(a, f))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(value, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    /// `a (m x k) * b (n x k)^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.cols(), y.cols(), "matmul_nt inner dimension mismatch");
            let mut out = Tensor::zeros(x.rows(), y.rows());
            let n = y.rows();
            gemm(
                x.rows(),
                x.cols(),
                n,
                1.0,
                MatRef::row_major(x.data(), x.cols()),
                MatRef::row_major(y.data(), y.cols()).t(),
                0.0,
                MatMut::row_major(out.data_mut(), n),
            );
            out
        };
        self.push(value, Op::MatMulNT(a, b), self.rg(&[a, b]))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let value = {
            let mut t = self.value(a).clone();
            for r in 0..t.rows() {
                let row = t.row_mut(r);
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
                row.iter_mut().for_each(|x| *x /= n);
            }
            t
        };
        self.push(value, Op::NormalizeRows(a), self.rg(&[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 x D`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (t, g, b) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let d = t.cols();
            assert_eq!(g.shape(), (1, d));
            assert_eq!(b.shape(), (1, d));
            let mut xhat = vec![0.0; t.len()];
            let mut rstd = vec![0.0; t.rows()];
            let mut out = Tensor::zeros(t.rows(), d);
            for r in 0..t.rows() {
                let row = t.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                let o = out.row_mut(r);
                for c in 0..d {
                    let h = (row[c] - mean) * rs;
                    xhat[r * d + c] = h;
                    o[c] = h * g.data()[c] + b.data()[c];
                }
            }
            (out, xhat, rstd)
        };
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, self.rg(&[x, gamma, beta]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch*Lq) x D`, `k` and `v` are `(batch*Lk) x D`; each batch
    /// element attends only within its own rows. Heads split `D` into
    /// contiguous chunks.
    pub fn attention(&self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let (qt, kt, vt) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let d = qt.cols();
            assert!(heads > 0 && d % heads == 0, "attention width {d} not divisible by {heads} heads");
            assert_eq!(kt.cols(), d);
            assert_eq!(vt.cols(), d);
            assert_eq!(kt.rows(), vt.rows());
            assert!(qt.rows() % batch == 0 && kt.rows() % batch == 0, "attention rows not divisible by batch");
            let (lq, lk, dh) = (qt.rows() / batch, kt.rows() / batch, d / heads);
            let scale = 1.0 / (dh as f64).sqrt();
            let mut probs = vec![0.0; batch * heads * lq * lk];
            let mut out = Tensor::zeros(qt.rows(), d);
            for b in 0..batch {
                for h in 0..heads {
                    let p_off = (b * heads + h) * lq * lk;
                    let p = &mut probs[p_off..p_off + lq * lk];
                    gemm(
                        lq,
                        dh,
                        lk,
                        scale,
                        MatRef::at(qt.data(), b * lq * d + h * dh, d, 1),
                        MatRef::at(kt.data(), b * lk * d + h * dh, d, 1).t(),
                        0.0,
                        MatMut::row_major(p, lk),
                    );
                    for row in p.chunks_mut(lk) {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut s = 0.0;
                        for x in row.iter_mut() {
                            *x = (*x - m).exp();
                            s += *x;
                        }
                        row.iter_mut().for_each(|x| *x /= s);
                    }
                    gemm(
                        lq,
                        lk,
                        dh,
                        1.0,
                        MatRef::row_major(p, lk),
                        MatRef::at(vt.data(), b * lk * d + h * dh, d, 1),
                        0.0,
                        MatMut::at(out.data_mut(), b * lq * d + h * dh, d, 1),
                    );
                }
            }
            (out, probs)
        };
        self.push(value, Op::Attention { q, k, v, batch, heads, probs }, self.rg(&[q, k, v]))
    }

    /// Unfolds convolution patches: `(B*H*W) x C` to `(B*H'*W') x (k*k*C)`.
    pub fn im2col(&self, x: Var, geom: ConvGeometry) -> Var {
        let value = {
            let t = self.value(x);
            assert_eq!(t.shape(), (geom.batch * geom.height * geom.width, geom.channels), "im2col input shape");
            let rows = geom.batch * geom.out_height() * geom.out_width();
            let mut out = Tensor::zeros(rows, geom.patch_len());
            let c = geom.channels;
            let pl = geom.patch_len();
            let src = t.data();
            let dst = out.data_mut();
            geom.for_each_tap(|orow, col, irow| {
                dst[orow * pl + col..orow * pl + col + c].copy_from_slice(&src[irow * c..irow * c + c]);
            });
            out
        };
        self.push(value, Op::Im2Col { x, geom }, self.rg(&[x]))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let t = self.value(a);
            assert!(start + len <= t.cols(), "slice_cols out of range");
            let mut out = Tensor::zeros(t.rows(), len);
            for r in 0..t.rows() {
                out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
            }
            out
        };
        self.push(value, Op::SliceCols(a, start), self.rg(&[a]))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let t = self.value(a);
            assert!(start + len <= t.rows(), "slice_rows out of range");
            t.slice_rows(start, len)
        };
        self.push(value, Op::SliceRows(a, start), self.rg(&[a]))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(t.cols(), cols, "concat_rows column mismatch");
                data.extend_from_slice(t.data());
                rows += t.rows();
            }
            Tensor::from_vec(rows, cols, data)
        };
        self.push(value, Op::ConcatRows(parts.to_vec()), self.rg(parts))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            let mut off = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                }
                off += t.cols();
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()), self.rg(parts))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let value = {
            let t = self.value(a);
            let mut data = Vec::with_capacity(idx.len() * t.cols());
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_vec(idx.len(), t.cols(), data)
        };
        self.push(value, Op::GatherRows(a, idx.to_vec()), self.rg(&[a]))
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&self, a: Var, times: usize) -> Var {
        let value = {
            let t = self.value(a);
            let mut data = Vec::with_capacity(t.len() * times);
            for _ in 0..times {
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(t.rows() * times, t.cols(), data)
        };
        self.push(value, Op::TileRows(a, times), self.rg(&[a]))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        self.push(value, Op::Reshape(a), self.rg(&[a]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Averages consecutive blocks of `group` rows: `(G*group) x D` to `G x D`.
    pub fn mean_row_groups(&self, a: Var, group: usize) -> Var {
        let value = {
            let t = self.value(a);
            assert!(group > 0 && t.rows() % group == 0, "mean_row_groups: rows not divisible by group");
            let g = t.rows() / group;
            let mut out = Tensor::zeros(g, t.cols());
            for r in 0..t.rows() {
                let o = out.row_mut(r / group);
                for (x, y) in o.iter_mut().zip(t.row(r)) {
                    *x += y / group as f64;
                }
            }
            out
        };
        self.push(value, Op::MeanRowGroups(a, group), self.rg(&[a]))
    }

    /// `sum_i weights[i] * -log softmax(logits_i)[targets[i]] / norm`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize], weights: &[f64], norm: f64) -> Var {
        let (value, probs) = {
            let t = self.value(logits);
            assert_eq!(t.rows(), targets.len());
            assert_eq!(t.rows(), weights.len());
            let mut probs = Tensor::zeros(t.rows(), t.cols());
            let mut loss = 0.0;
            for r in 0..t.rows() {
                let row = t.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
                loss += weights[r] * (lse - row[targets[r]]);
            }
            (Tensor::scalar(loss / norm), probs)
        };
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
            norm,
        };
        self.push(value, op, self.rg(&[logits]))
    }

    /// Summed sigmoid focal loss against a `{0,1}` target matrix, divided by `norm`.
    pub fn sigmoid_focal(&self, logits: Var, targets: &Tensor, alpha: f64, gamma: f64, norm: f64) -> Var {
        let value = {
            let t = self.value(logits);
            assert_eq!(t.shape(), targets.shape(), "focal target shape");
            let s: f64 =
                t.data().iter().zip(targets.data()).map(|(&x, &y)| focal_term(x, y, alpha, gamma).0).sum();
            Tensor::scalar(s / norm)
        };
        let op = Op::SigmoidFocal { logits, targets: targets.clone(), alpha, gamma, norm };
        self.push(value, op, self.rg(&[logits]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(*b, g.clone());
                    }
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(*b, g.map(|x| -x));
                    }
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, zip_map(&g, val(*b), |x, y| x * y));
                    }
                    if needs(*b) {
                        acc(*b, zip_map(&g, val(*a), |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    if needs(*a) {
                        acc(*a, zip_map(&g, val(*b), |x, y| x / y));
                    }
                    if needs(*b) {
                        let out = &node.value;
                        let t = zip_map(&zip_map(&g, out, |x, o| -x * o), val(*b), |x, y| x / y);
                        acc(*b, t);
                    }
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let is_min = matches!(node.op, Op::Minimum(..));
                    let (va, vb) = (val(*a), val(*b));
                    let pick_a = |x: f64, y: f64| if is_min { x <= y } else { x >= y };
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    let mut gb = Tensor::zeros(g.rows(), g.cols());
                    for j in 0..g.len() {
                        if pick_a(va.data()[j], vb.data()[j]) {
                            ga.data_mut()[j] = g.data()[j];
                        } else {
                            gb.data_mut()[j] = g.data()[j];
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddRow(a, b) => {
                    if needs(*b) {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (x, y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                        acc(*b, gb);
                    }
                    acc(*a, g);
                }
                Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, g.reshape(r, c));
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    if needs(*a) {
                        // dA = G * B^T
                        let mut ga = Tensor::zeros(x.rows(), x.cols());
                        gemm(
                            g.rows(),
                            g.cols(),
                            y.rows(),
                            1.0,
                            MatRef::row_major(g.data(), g.cols()),
                            MatRef::row_major(y.data(), y.cols()).t(),
                            0.0,
                            MatMut::row_major(ga.data_mut(), x.cols()),
                        );
                        acc(*a, ga);
                    }
                    if needs(*b) {
                        // dB = A^T * G
                        let mut gb = Tensor::zeros(y.rows(), y.cols());
                        gemm(
                            x.cols(),
                            x.rows(),
                            g.cols(),
                            1.0,
                            MatRef::row_major(x.data(), x.cols()).t(),
                            MatRef::row_major(g.data(), g.cols()),
                            0.0,
                            MatMut::row_major(gb.data_mut(), y.cols()),
                        );
                        acc(*b, gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    if needs(*a) {
                        // dA = G * B
                        acc(*a, g.matmul(y));
                    }
                    if needs(*b) {
                        // dB = G^T * A
                        let mut gb = Tensor::zeros(y.rows(), y.cols());
                        gemm(
                            g.cols(),
                            g.rows(),
                            x.cols(),
                            1.0,
                            MatRef::row_major(g.data(), g.cols()).t(),
                            MatRef::row_major(x.data(), x.cols()),
                            0.0,
                            MatMut::row_major(gb.data_mut(), y.cols()),
                        );
                        acc(*b, gb);
                    }
                }
                Op::Relu(a) => acc(*a, zip_map(&g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, &node.value, |x, s| x * s * (1.0 - s))),
                Op::Abs(a) => acc(*a, zip_map(&g, val(*a), |x, y| x * y.signum() * f64::from(u8::from(y != 0.0)))),
                Op::Square(a) => acc(*a, zip_map(&g, val(*a), |x, y| 2.0 * x * y)),
                Op::NormalizeRows(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut gx = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, yy), gg) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = (gg - yy * dot) / n;
                        }
                    }
                    acc(*a, gx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = g.cols();
                    let gam = val(*gamma).data();
                    if needs(*gamma) || needs(*beta) {
                        let mut gg = Tensor::zeros(1, d);
                        let mut gbeta = Tensor::zeros(1, d);
                        for r in 0..g.rows() {
                            for c in 0..d {
                                gg.data_mut()[c] += g.get(r, c) * xhat[r * d + c];
                                gbeta.data_mut()[c] += g.get(r, c);
                            }
                        }
                        acc(*gamma, gg);
                        acc(*beta, gbeta);
                    }
                    if needs(*x) {
                        let mut gx = Tensor::zeros(g.rows(), d);
                        for r in 0..g.rows() {
                            let gr = g.row(r);
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for c in 0..d {
                                let dxh = gr[c] * gam[c];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh[c];
                            }
                            mean_dxh /= d as f64;
                            mean_dxh_xh /= d as f64;
                            let o = gx.row_mut(r);
                            for c in 0..d {
                                o[c] = rstd[r] * (gr[c] * gam[c] - mean_dxh - xh[c] * mean_dxh_xh);
                            }
                        }
                        acc(*x, gx);
                    }
                }
                Op::Attention { q, k, v, batch, heads, probs } => {
                    let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                    let (batch, heads) = (*batch, *heads);
                    let d = qt.cols();
                    let (lq, lk, dh) = (qt.rows() / batch, kt.rows() / batch, d / heads);
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(qt.rows(), d);
                    let mut gk = Tensor::zeros(kt.rows(), d);
                    let mut gv = Tensor::zeros(vt.rows(), d);
                    let mut dp = vec![0.0; lq * lk];
                    for b in 0..batch {
                        for h in 0..heads {
                            let p_off = (b * heads + h) * lq * lk;
                            let p = &probs[p_off..p_off + lq * lk];
                            let q_off = b * lq * d + h * dh;
                            let k_off = b * lk * d + h * dh;
                            // dP = dO * V^T
                            gemm(
                                lq,
                                dh,
                                lk,
                                1.0,
                                MatRef::at(g.data(), q_off, d, 1),
                                MatRef::at(vt.data(), k_off, d, 1).t(),
                                0.0,
                                MatMut::row_major(&mut dp, lk),
                            );
                            // dV = P^T * dO
                            gemm(
                                lk,
                                lq,
                                dh,
                                1.0,
                                MatRef::row_major(p, lk).t(),
                                MatRef::at(g.data(), q_off, d, 1),
                                0.0,
                                MatMut::at(gv.data_mut(), k_off, d, 1),
                            );
                            // dS = P * (dP - rowsum(dP * P))
                            for r in 0..lq {
                                let pr = &p[r * lk..(r + 1) * lk];
                                let dr = &mut dp[r * lk..(r + 1) * lk];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for (x, pp) in dr.iter_mut().zip(pr) {
                                    *x = pp * (*x - dot);
                                }
                            }
                            // dQ = dS * K * scale ; dK = dS^T * Q * scale
                            gemm(
                                lq,
                                lk,
                                dh,
                                scale,
                                MatRef::row_major(&dp, lk),
                                MatRef::at(kt.data(), k_off, d, 1),
                                0.0,
                                MatMut::at(gq.data_mut(), q_off, d, 1),
                            );
                            gemm(
                                lk,
                                lq,
                                dh,
                                scale,
                                MatRef::row_major(&dp, lk).t(),
                                MatRef::at(qt.data(), q_off, d, 1),
                                0.0,
                                MatMut::at(gk.data_mut(), k_off, d, 1),
                            );
                        }
                    }
                    acc(*q, gq);
                    acc(*k, gk);
                    acc(*v, gv);
                }
                Op::Im2Col { x, geom } => {
                    let c = geom.channels;
                    let pl = geom.patch_len();
                    let mut gx = Tensor::zeros(geom.batch * geom.height * geom.width, c);
                    {
                        let src = g.data();
                        let dst = gx.data_mut();
                        geom.for_each_tap(|orow, col, irow| {
                            for j in 0..c {
                                dst[irow * c + j] += src[orow * pl + col + j];
                            }
                        });
                    }
                    acc(*x, gx);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                    }
                    acc(*a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    acc(*a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let rows = val(*p).rows();
                        if needs(*p) {
                            acc(*p, g.slice_rows(off, rows));
                        }
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = val(*p).cols();
                        if needs(*p) {
                            let mut gp = Tensor::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            acc(*p, gp);
                        }
                        off += cols;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (j, &i) in idx.iter().enumerate() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(j)) {
                            *x += y;
                        }
                    }
                    acc(*a, ga);
                }
                Op::TileRows(a, times) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for t in 0..*times {
                        for (x, y) in ga.data_mut().iter_mut().zip(&g.data()[t * r * c..(t + 1) * r * c]) {
                            *x += y;
                        }
                    }
                    acc(*a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::full(r, c, g.data()[0]));
                }
                Op::MeanRowGroups(a, group) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        for (x, y) in ga.row_mut(row).iter_mut().zip(g.row(row / group)) {
                            *x = y / *group as f64;
                        }
                    }
                    acc(*a, ga);
                }
                Op::SoftmaxCrossEntropy { logits, targets, weights, probs, norm } => {
                    let s = g.data()[0] / norm;
                    let mut gl = probs.clone();
                    for r in 0..gl.rows() {
                        let w = weights[r] * s;
                        let row = gl.row_mut(r);
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= w);
                    }
                    acc(*logits, gl);
                }
                Op::SigmoidFocal { logits, targets, alpha, gamma, norm } => {
                    let s = g.data()[0] / norm;
                    let x = val(*logits);
                    let gl = zip_map(x, targets, |xx, yy| s * focal_term(xx, yy, *alpha, *gamma).1);
                    acc(*logits, gl);
                }
            }
        }
        Grads(grads)
    }
}
