//! Minimal reverse-mode autodiff over flat row-major tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and whatever it needs for the backward pass. Ops are coarse (linear,
//! fused multi-head attention, layer norm, conv2d) so a transformer forward
//! pass stays in the low hundreds of nodes. Everything is single threaded
//! and deterministic; GEMMs go through `ndarray`'s `general_mat_mul`.
//!
//! Shape errors inside the tape are programming errors and panic. Callers
//! that accept user data (the model, the loss assembly) validate shapes
//! before building the graph.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};
use num_traits::{Float, FromPrimitive};

/// Scalar type usable on the tape. Training runs in `f32`, gradient
/// verification in `f64`.
pub trait Real:
    Float
    + LinalgScalar
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![F::zero(); shape.iter().product()])
    }

    pub fn scalar(x: F) -> Self {
        Self::new(&[], vec![x])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| G::of(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

/// Row-major GEMM: `c = op(a) * op(b) + beta * c` with `op(a)` of shape
/// `[m, k]` and `op(b)` of shape `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    beta: F,
    c: &mut [F],
) {
    let av = if trans_a {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let bv = if trans_b {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(F::one(), &av, &bv, beta, &mut cv);
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a square-kernel NHWC convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Calls `f(col_row, col_offset, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let c = self.in_ch;
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let col = (ky * self.kernel + kx) * c;
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize) * c;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }
}

enum Op<F> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Silu(Var),
    Gelu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        inp: usize,
        out: usize,
    },
    LayerNorm {
        x: Var,
        dim: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        len: usize,
        heads: usize,
        probs: Vec<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    GatherRows {
        x: Var,
        cols: usize,
        index: Vec<usize>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
    },
    SliceCols {
        x: Var,
        total: usize,
        start: usize,
        len: usize,
    },
    MeanMid {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Mse {
        x: Var,
        target: Vec<F>,
    },
    Bce {
        x: Var,
        target: Vec<F>,
    },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Computation tape.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + tile(b)`, where `b` repeats to fill `a`.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.len();
        assert!(n > 0 && ta.len() % n == 0, "add_tiled: {} not a multiple of {}", ta.len(), n);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % n])
            .collect();
        let t = Tensor::new(ta.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::AddTiled(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect());
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: F) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x + c).collect());
        let ng = self.ng(a);
        self.push(t, Op::Offset(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * sigmoid(x)).collect());
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| gelu_fwd(x)).collect());
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let tw = self.value(w);
        assert_eq!(tw.shape().len(), 2, "linear weight must be 2-d");
        let (inp, out) = (tw.shape()[0], tw.shape()[1]);
        let tx = self.value(x);
        let xs = tx.shape();
        assert_eq!(*xs.last().expect("linear on scalar"), inp, "linear input width");
        let rows = tx.len() / inp;
        let mut data = vec![F::zero(); rows * out];
        if let Some(b) = b {
            let tb = self.value(b).data();
            assert_eq!(tb.len(), out);
            for r in data.chunks_mut(out) {
                r.copy_from_slice(tb);
            }
        }
        gemm(rows, inp, out, tx.data(), false, tw.data(), false, F::one(), &mut data);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&shape, data), Op::Linear { x, w, b, inp, out }, ng)
    }

    /// Layer norm over the last axis without an affine transform.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let dim = *tx.shape().last().unwrap();
        let eps = F::of(eps);
        let n = F::of(dim as f64);
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::with_capacity(tx.len() / dim);
        for row in tx.data().chunks(dim) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let t = Tensor::new(tx.shape(), xhat.clone());
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, dim, xhat, rstd }, ng)
    }

    /// Bidirectional multi-head self-attention. `qkv` is `[batch*len, 3*d]`
    /// with each row laid out as `[q | k | v]`; returns `[batch*len, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, len: usize, heads: usize) -> Var {
        let t = self.value(qkv);
        let d3 = *t.shape().last().unwrap();
        assert_eq!(d3 % 3, 0);
        let d = d3 / 3;
        assert_eq!(d % heads, 0, "hidden width not divisible by heads");
        assert_eq!(t.len(), batch * len * d3);
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let src = t.data();
        let mut out = vec![F::zero(); batch * len * d];
        let mut probs = vec![F::zero(); batch * heads * len * len];
        let mut q = vec![F::zero(); len * dh];
        let mut k = vec![F::zero(); len * dh];
        let mut v = vec![F::zero(); len * dh];
        let mut o = vec![F::zero(); len * dh];
        for b in 0..batch {
            for h in 0..heads {
                split_heads(src, b, h, len, d, dh, &mut q, &mut k, &mut v);
                let p = &mut probs[((b * heads + h) * len * len)..((b * heads + h + 1) * len * len)];
                gemm(len, dh, len, &q, false, &k, true, F::zero(), p);
                for row in p.chunks_mut(len) {
                    let mx = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x * scale));
                    let mut s = F::zero();
                    for x in row.iter_mut() {
                        *x = (*x * scale - mx).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x = *x / s;
                    }
                }
                gemm(len, len, dh, p, false, &v, false, F::zero(), &mut o);
                for i in 0..len {
                    let dst = (b * len + i) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
                }
            }
        }
        let ng = self.ng(qkv);
        self.push(
            Tensor::new(&[batch * len, d], out),
            Op::Attention {
                qkv,
                batch,
                len,
                heads,
                probs,
            },
            ng,
        )
    }

    /// NHWC convolution. `x` is `[B, H, W, C]`, `w` is `[k*k*C, O]` with rows
    /// ordered `(ky, kx, c)`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let tx = self.value(x);
        assert_eq!(
            tx.len(),
            geom.batch * geom.height * geom.width * geom.in_ch,
            "conv2d input size"
        );
        let tw = self.value(w);
        assert_eq!(tw.shape(), &[geom.patch_len(), geom.out_ch], "conv2d weight shape");
        let (rows, plen) = (geom.rows(), geom.patch_len());
        let mut cols = vec![F::zero(); rows * plen];
        let c = geom.in_ch;
        let xd = tx.data();
        geom.for_each_tap(|row, col, src| {
            cols[row * plen + col..row * plen + col + c].copy_from_slice(&xd[src..src + c]);
        });
        let mut out = vec![F::zero(); rows * geom.out_ch];
        let tb = self.value(b).data();
        for r in out.chunks_mut(geom.out_ch) {
            r.copy_from_slice(tb);
        }
        gemm(rows, plen, geom.out_ch, &cols, false, tw.data(), false, F::one(), &mut out);
        let shape = [geom.batch, geom.out_height(), geom.out_width(), geom.out_ch];
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(&shape, out), Op::Conv2d { x, w, b, geom, cols }, ng)
    }

    /// `out[i] = x[index[i]]` over the flattened input.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Var {
        let tx = self.value(x).data();
        let data = index.iter().map(|&i| tx[i]).collect();
        let t = Tensor::new(shape, data);
        let ng = self.ng(x);
        self.push(t, Op::Gather { x, index }, ng)
    }

    /// Selects rows of `x` viewed as `[rows, cols]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let tx = self.value(x);
        let cols = *tx.shape().last().unwrap();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in &index {
            data.extend_from_slice(&tx.data()[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(&[index.len(), cols], data);
        let ng = self.ng(x);
        self.push(t, Op::GatherRows { x, cols, index }, ng)
    }

    /// Concatenates parts viewed as `[outer, inner_i]` along the inner axis.
    pub fn concat(&mut self, parts: &[Var], outer: usize) -> Var {
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let n = self.value(p).len();
                assert_eq!(n % outer, 0, "concat part not divisible by outer");
                n / outer
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let parts = parts.iter().copied().zip(widths).collect();
        self.push(Tensor::new(&[outer, total], data), Op::Concat { parts, outer }, ng)
    }

    /// Columns `start..start+len` of `x` viewed as `[outer, total]`.
    pub fn slice_cols(&mut self, x: Var, total: usize, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.len() % total, 0);
        assert!(start + len <= total);
        let outer = tx.len() / total;
        let mut data = Vec::with_capacity(outer * len);
        for o in 0..outer {
            data.extend_from_slice(&tx.data()[o * total + start..o * total + start + len]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(&[outer, len], data),
            Op::SliceCols {
                x,
                total,
                start,
                len,
            },
            ng,
        )
    }

    /// Mean over the middle axis of `x` viewed as `[outer, mid, inner]`.
    pub fn mean_mid(&mut self, x: Var, outer: usize, mid: usize, inner: usize) -> Var {
        let tx = self.value(x).data();
        assert_eq!(tx.len(), outer * mid * inner);
        let inv = F::one() / F::of(mid as f64);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &tx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in &mut data {
            *d *= inv;
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(&[outer, inner], data),
            Op::MeanMid {
                x,
                outer,
                mid,
                inner,
            },
            ng,
        )
    }

    /// Mean squared error against a constant target; returns a scalar.
    pub fn mse(&mut self, x: Var, target: &[F]) -> Var {
        let tx = self.value(x).data();
        assert_eq!(tx.len(), target.len(), "mse shape mismatch");
        let n = F::of(tx.len() as f64);
        let s = tx
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<F>();
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(s / n),
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// Mean binary cross entropy of logits `x` against `{0,1}` targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &[F]) -> Var {
        let tx = self.value(x).data();
        assert_eq!(tx.len(), target.len(), "bce shape mismatch");
        let n = F::of(tx.len() as f64);
        let s = tx.iter().zip(target).map(|(&z, &y)| bce_term(z, y)).sum::<F>();
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(s / n),
            Op::Bce {
                x,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let mut s = F::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum expects scalars");
            s += self.value(v).item() * w;
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) | Op::Offset(x) => self.accum(grads, *x, |d| add_into(d, g)),
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| add_into(d, g));
                self.accum(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| add_into(d, g));
                self.accum(grads, *b, |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.accum(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddTiled(a, b) => {
                self.accum(grads, *a, |d| add_into(d, g));
                self.accum(grads, *b, |d| {
                    let n = d.len();
                    for (i, &g) in g.iter().enumerate() {
                        d[i % n] += g;
                    }
                });
            }
            Op::Scale(a, c) => self.accum(grads, *a, |d| {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d += g * *c;
                }
            }),
            Op::Silu(a) => {
                let va = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        let s = sigmoid(x);
                        *d += g * s * (F::one() + x * (F::one() - s));
                    }
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * gelu_grad(x);
                    }
                });
            }
            Op::Linear { x, w, b, inp, out } => {
                let (inp, out) = (*inp, *out);
                let rows = g.len() / out;
                let vx = self.value(*x).data();
                let vw = self.value(*w).data();
                self.accum(grads, *x, |d| gemm(rows, out, inp, g, false, vw, true, F::one(), d));
                self.accum(grads, *w, |d| gemm(inp, rows, out, vx, true, g, false, F::one(), d));
                if let Some(b) = b {
                    self.accum(grads, *b, |d| {
                        for r in g.chunks(out) {
                            add_into(d, r);
                        }
                    });
                }
            }
            Op::LayerNorm { x, dim, xhat, rstd } => {
                let n = F::of(*dim as f64);
                self.accum(grads, *x, |d| {
                    for (r, ((dr, gr), xr)) in d
                        .chunks_mut(*dim)
                        .zip(g.chunks(*dim))
                        .zip(xhat.chunks(*dim))
                        .enumerate()
                    {
                        let mg = gr.iter().copied().sum::<F>() / n;
                        let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<F>() / n;
                        for ((d, &gi), &xi) in dr.iter_mut().zip(gr).zip(xr) {
                            *d += rstd[r] * (gi - mg - xi * mgx);
                        }
                    }
                });
            }
            Op::Attention {
                qkv,
                batch,
                len,
                heads,
                probs,
            } => {
                let (batch, len, heads) = (*batch, *len, *heads);
                let src = self.value(*qkv).data();
                let d = src.len() / (batch * len * 3);
                let dh = d / heads;
                let scale = F::one() / F::of(dh as f64).sqrt();
                self.accum(grads, *qkv, |dst| {
                    let mut q = vec![F::zero(); len * dh];
                    let mut k = vec![F::zero(); len * dh];
                    let mut v = vec![F::zero(); len * dh];
                    let mut go = vec![F::zero(); len * dh];
                    let mut dp = vec![F::zero(); len * len];
                    let mut dq = vec![F::zero(); len * dh];
                    let mut dk = vec![F::zero(); len * dh];
                    let mut dv = vec![F::zero(); len * dh];
                    for b in 0..batch {
                        for h in 0..heads {
                            split_heads(src, b, h, len, d, dh, &mut q, &mut k, &mut v);
                            for i in 0..len {
                                let s = (b * len + i) * d + h * dh;
                                go[i * dh..(i + 1) * dh].copy_from_slice(&g[s..s + dh]);
                            }
                            let p = &probs[((b * heads + h) * len * len)..((b * heads + h + 1) * len * len)];
                            gemm(len, len, dh, p, true, &go, false, F::zero(), &mut dv);
                            gemm(len, dh, len, &go, false, &v, true, F::zero(), &mut dp);
                            for (dr, pr) in dp.chunks_mut(len).zip(p.chunks(len)) {
                                let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<F>();
                                for (x, &pv) in dr.iter_mut().zip(pr) {
                                    *x = pv * (*x - dot) * scale;
                                }
                            }
                            gemm(len, len, dh, &dp, false, &k, false, F::zero(), &mut dq);
                            gemm(len, len, dh, &dp, true, &q, false, F::zero(), &mut dk);
                            for i in 0..len {
                                let row = (b * len + i) * 3 * d;
                                let (qo, ko, vo) = (row + h * dh, row + d + h * dh, row + 2 * d + h * dh);
                                add_into(&mut dst[qo..qo + dh], &dq[i * dh..(i + 1) * dh]);
                                add_into(&mut dst[ko..ko + dh], &dk[i * dh..(i + 1) * dh]);
                                add_into(&mut dst[vo..vo + dh], &dv[i * dh..(i + 1) * dh]);
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows, plen, oc) = (geom.rows(), geom.patch_len(), geom.out_ch);
                let vw = self.value(*w).data();
                self.accum(grads, *w, |d| gemm(plen, rows, oc, cols, true, g, false, F::one(), d));
                self.accum(grads, *b, |d| {
                    for r in g.chunks(oc) {
                        add_into(d, r);
                    }
                });
                if self.ng(*x) {
                    let mut dcols = vec![F::zero(); rows * plen];
                    gemm(rows, oc, plen, g, false, vw, true, F::zero(), &mut dcols);
                    let c = geom.in_ch;
                    self.accum(grads, *x, |d| {
                        geom.for_each_tap(|row, col, src| {
                            add_into(&mut d[src..src + c], &dcols[row * plen + col..row * plen + col + c]);
                        });
                    });
                }
            }
            Op::Gather { x, index } => self.accum(grads, *x, |d| {
                for (&i, &gv) in index.iter().zip(g) {
                    d[i] += gv;
                }
            }),
            Op::GatherRows { x, cols, index } => self.accum(grads, *x, |d| {
                for (r, &src) in index.iter().enumerate() {
                    add_into(&mut d[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }),
            Op::Concat { parts, outer } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    self.accum(grads, p, |d| {
                        for o in 0..*outer {
                            add_into(&mut d[o * w..(o + 1) * w], &g[o * total + off..o * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols {
                x,
                total,
                start,
                len,
            } => self.accum(grads, *x, |d| {
                for (o, gr) in g.chunks(*len).enumerate() {
                    add_into(&mut d[o * total + start..o * total + start + len], gr);
                }
            }),
            Op::MeanMid {
                x,
                outer,
                mid,
                inner,
            } => {
                let inv = F::one() / F::of(*mid as f64);
                self.accum(grads, *x, |d| {
                    for o in 0..*outer {
                        for m in 0..*mid {
                            let dst = &mut d[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (dv, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *dv += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::Mse { x, target } => {
                let vx = self.value(*x).data();
                let c = g[0] * F::of(2.0) / F::of(vx.len() as f64);
                self.accum(grads, *x, |d| {
                    for ((d, &a), &t) in d.iter_mut().zip(vx).zip(target) {
                        *d += c * (a - t);
                    }
                });
            }
            Op::Bce { x, target } => {
                let vx = self.value(*x).data();
                let c = g[0] / F::of(vx.len() as f64);
                self.accum(grads, *x, |d| {
                    for ((d, &z), &y) in d.iter_mut().zip(vx).zip(target) {
                        *d += c * (sigmoid(z) - y);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accum(grads, v, |d| d[0] += g[0] * w);
                }
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn split_heads<F: Real>(
    src: &[F],
    b: usize,
    h: usize,
    len: usize,
    d: usize,
    dh: usize,
    q: &mut [F],
    k: &mut [F],
    v: &mut [F],
) {
    for i in 0..len {
        let row = (b * len + i) * 3 * d;
        q[i * dh..(i + 1) * dh].copy_from_slice(&src[row + h * dh..row + (h + 1) * dh]);
        k[i * dh..(i + 1) * dh].copy_from_slice(&src[row + d + h * dh..row + d + (h + 1) * dh]);
        v[i * dh..(i + 1) * dh].copy_from_slice(&src[row + 2 * d + h * dh..row + 2 * d + (h + 1) * dh]);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<F: Real>(x: F) -> F {
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * dinner
}

/// Numerically stable `BCE(sigmoid(z), y)`.
pub fn bce_term<F: Real>(z: F, y: F) -> F {
    z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d(loss)/d(input) of a single-input graph builder against
    /// central differences.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |xs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[k].len()]);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
                let err = (numeric - analytic[i]).abs() / (numeric.abs() + analytic[i].abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} elem {i}: numeric {numeric} analytic {}", analytic[i]);
            }
        }
    }

    /// Reduces any node to a scalar with random weights so every output
    /// element contributes a distinct gradient.
    fn probe(g: &mut Graph<f64>, v: Var) -> Var {
        let n = g.value(v).len();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        g.mse(v, &t)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let c = rand_tensor(&mut rng, &[4]);
        check(vec![a, b, c], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[1]);
            let t = g.add_tiled(s, v[2]);
            let e = g.silu(t);
            let f = g.gelu(e);
            let o = g.offset(f, 1.0);
            let k = g.scale(o, 0.7);
            let r = g.add(k, v[0]);
            probe(g, r)
        });
    }

    #[test]
    fn linear_and_layer_norm_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[5, 6]);
        let w = rand_tensor(&mut rng, &[6, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        check(vec![x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let n = g.layer_norm(y, 1e-6);
            probe(g, n)
        });
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qkv = rand_tensor(&mut rng, &[2 * 5, 3 * 8]);
        check(vec![qkv], |g, v| {
            let a = g.attention(v[0], 2, 5, 2);
            probe(g, a)
        });
    }

    #[test]
    fn conv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeom {
            batch: 2,
            height: 5,
            width: 6,
            in_ch: 3,
            out_ch: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = rand_tensor(&mut rng, &[2, 5, 6, 3]);
        let w = rand_tensor(&mut rng, &[27, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        check(vec![x, w, b], move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], geom);
            let p = g.mean_mid(y, 2, geom.out_height() * geom.out_width(), 4);
            probe(g, p)
        });
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeom {
            batch: 1,
            height: 4,
            width: 4,
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let x = rand_tensor(&mut rng, &[1, 4, 4, 2]);
        let w = rand_tensor(&mut rng, &[18, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(vx, vw, vb, geom);
        for oy in 0..4 {
            for ox in 0..4 {
                for o in 0..3 {
                    let mut s = b.data()[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as i32 + ky - 1, ox as i32 + kx - 1);
                            if !(0..4).contains(&iy) || !(0..4).contains(&ix) {
                                continue;
                            }
                            for c in 0..2 {
                                let xi = ((iy * 4 + ix) * 2 + c) as usize;
                                let wi = (((ky * 3 + kx) * 2 + c) as usize) * 3 + o;
                                s += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    let got = g.value(y).data()[(oy * 4 + ox) * 3 + o];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[2, 6]);
        let b = rand_tensor(&mut rng, &[2, 4]);
        check(vec![a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]], 2);
            let s = g.slice_cols(c, 10, 3, 5);
            let r = g.gather_rows(s, vec![1, 0, 1]);
            let p = g.gather(r, vec![14, 0, 3, 3, 7], &[5]);
            let q = g.reshape(p, &[5, 1]);
            let m = probe(g, q);
            let bce = g.bce_with_logits(c, &[1.0; 20].iter().enumerate().map(|(i, _)| (i % 2) as f64).collect::<Vec<_>>());
            g.weighted_sum(&[(m, 0.3), (bce, 1.7)])
        });
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!(bce_term(30.0f64, 1.0) < 1e-12);
        assert!(bce_term(-30.0f64, 0.0) < 1e-12);
        assert!((bce_term(0.0f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_term(-800.0f64, 1.0).is_finite());
    }

    #[test]
    fn gemm_transposes() {
        // [2,3] x [3,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as [3,2]
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0f64; 4];
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);
    }
}
