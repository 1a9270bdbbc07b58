//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] borrows the parameter store for the duration of one forward
//! pass; parameter values are read in place. Every op appends a node, and
//! [`Graph::backward`] walks the tape in reverse. A graph is single-threaded;
//! separate graphs over the same store may run concurrently.

use std::borrow::Cow;
use std::collections::HashMap;

use super::bilinear;
use super::{sigmoid, Array, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Convolution geometry over an HWC (row = pixel, column = channel) feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
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
        self.kernel * self.kernel * self.in_channels
    }

    /// For each output pixel and kernel tap, the source pixel (if in range).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        for oy in 0..ho {
            for ox in 0..wo {
                let row = oy * wo + ox;
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
                        let tap = ky * self.kernel + kx;
                        f(row, tap, iy as usize * self.width + ix as usize);
                    }
                }
            }
        }
    }
}

/// Level table for multi-scale sampling: `(height, width, first token)` per level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelTable {
    pub levels: Vec<(usize, usize, usize)>,
}

impl LevelTable {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let mut start = 0;
        let levels = shapes
            .iter()
            .map(|&(h, w)| {
                let l = (h, w, start);
                start += h * w;
                l
            })
            .collect();
        Self { levels }
    }

    pub fn num_tokens(&self) -> usize {
        self.levels.iter().map(|&(h, w, _)| h * w).sum()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Clone, Debug)]
struct DeformGeom {
    levels: LevelTable,
    heads: usize,
    points: usize,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Logit(Var, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Bilinear {
        map: Var,
        point: Var,
    },
    Deform {
        value: Var,
        refs: Var,
        offsets: Var,
        weights: Var,
        geom: DeformGeom,
    },
    Focal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

struct Node<'s> {
    value: Cow<'s, Array>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node<'s>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Array> {
        self.grads[var.0].as_ref()
    }

    /// Gradient per parameter touched by the graph, in parameter-id order.
    pub fn param_grads(&self) -> Vec<(ParamId, &Array)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|&(id, _)| id);
        out
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g);
        }
    }
}

pub(crate) fn gemm(
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    // a is m×k (stored k×m when transposed), b is k×n (stored n×k when transposed).
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths checked above; strides describe in-bounds row-major layouts.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Elementwise sigmoid focal loss and its derivative with respect to the logit.
pub fn focal_terms(logit: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let log_p = -softplus(-logit);
    let log_1p = -softplus(logit);
    let pos = if target > 0.0 {
        let q = (1.0 - p).powf(gamma);
        (
            -alpha * q * log_p,
            alpha * q * (gamma * p * log_p - (1.0 - p)),
        )
    } else {
        (0.0, 0.0)
    };
    let neg = if target < 1.0 {
        let q = p.powf(gamma);
        (
            -(1.0 - alpha) * q * log_1p,
            (1.0 - alpha) * q * (p - gamma * (1.0 - p) * log_1p),
        )
    } else {
        (0.0, 0.0)
    };
    (
        target * pos.0 + (1.0 - target) * neg.0,
        target * pos.1 + (1.0 - target) * neg.1,
    )
}

impl<'s> Graph<'s> {
    /// A graph whose `param` calls read from `store`.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A graph with no parameter store (inputs and constants only).
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf; its gradient is available through [`Gradients::wrt`].
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        self.same_shape(a, b, what);
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Array::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "min", f64::min, Op::Min(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "max", f64::max, Op::Max(a, b))
    }

    /// `x[n, m] + row[m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (n, m) = self.value(x).dims2();
        assert_eq!(self.value(row).len(), m, "add_row: width mismatch");
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (d, b) in data[i * m..(i + 1) * m].iter_mut().zip(r) {
                *d += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(Array::from_parts(vec![n, m], data), Op::AddRow(x, row), rg)
    }

    /// `x[n, m] * row[m]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (n, m) = self.value(x).dims2();
        assert_eq!(self.value(row).len(), m, "mul_row: width mismatch");
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (d, b) in data[i * m..(i + 1) * m].iter_mut().zip(r) {
                *d *= b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(Array::from_parts(vec![n, m], data), Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            m,
            k,
            n,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            m,
            k,
            n,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::from_parts(vec![m, n], out), Op::MatMulNT(a, b), rg)
    }

    /// `x · w + b` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Inverse sigmoid `ln(x / (1 - x))` with `x` clamped to `[eps, 1 - eps]`.
    pub fn logit(&mut self, a: Var, eps: f64) -> Var {
        self.unary(
            a,
            move |x| {
                let x = x.clamp(eps, 1.0 - eps);
                (x / (1.0 - x)).ln()
            },
            Op::Logit(a, eps),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range");
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len)
                    .map(|j| src[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Array::from_parts(shape, out),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (n, m) = self.value(x).dims2();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let xh = (row[j] - mean) * is;
                normalized[i * m + j] = xh;
                out[i * m + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Array::from_parts(vec![n, m], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Columns `start..start + len` of a 2-D array.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.value(x).dims2();
        assert!(start + len <= m, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(x);
        self.push(
            Array::from_parts(vec![n, len], out),
            Op::SliceCols { x, start },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, n, "concat_cols: row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Array::from_parts(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            assert_eq!(c, m, "concat_rows: column mismatch");
            out.extend_from_slice(self.value(p).data());
            n += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Array::from_parts(vec![n, m], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Selects rows (repeats allowed) of a 2-D array.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (_, m) = self.value(x).dims2();
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let rg = self.rg(x);
        self.push(
            Array::from_parts(vec![rows.len(), m], out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// 2-D convolution over an HWC map `[height * width, in_channels]`.
    /// `weight` is `[kernel * kernel * in_channels, out_channels]`, taps ordered `(ky, kx, c)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        assert_eq!(
            self.shape(input),
            &[geom.height * geom.width, geom.in_channels],
            "conv2d: input does not match geometry"
        );
        let (pl, cout) = self.value(weight).dims2();
        assert_eq!(pl, geom.patch_len(), "conv2d: weight patch length");
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let c = geom.in_channels;
        let src = self.value(input).data();
        let mut cols = vec![0.0; ho * wo * pl];
        geom.for_each_tap(|row, tap, pix| {
            cols[row * pl + tap * c..row * pl + (tap + 1) * c]
                .copy_from_slice(&src[pix * c..(pix + 1) * c]);
        });
        let mut out = vec![0.0; ho * wo * cout];
        gemm(
            &cols,
            false,
            self.value(weight).data(),
            false,
            &mut out,
            ho * wo,
            pl,
            cout,
            0.0,
        );
        let b = self.value(bias).data();
        for r in 0..ho * wo {
            for (o, bb) in out[r * cout..(r + 1) * cout].iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            Array::from_parts(vec![ho * wo, cout], out),
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Bilinear sample of a `[C, H, W]` map at a normalized point `[x, y]`, zero-padded.
    pub fn bilinear_sample(&mut self, map: Var, point: Var) -> Result<Var> {
        let shape = self.shape(map).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "bilinear_sample needs C×H×W, got {shape:?}"
            )));
        }
        let pt = self.value(point).data();
        if pt.len() != 2 {
            return Err(Error::Shape(
                "bilinear_sample point must have 2 components".into(),
            ));
        }
        if !pt.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("sample point {pt:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (corners, n) = bilinear::corners(pt[0], pt[1], h, w);
        let m = self.value(map).data();
        let out: Vec<f64> = (0..c)
            .map(|ch| {
                corners[..n]
                    .iter()
                    .map(|k| k.weight * m[ch * h * w + k.cell])
                    .sum()
            })
            .collect();
        let rg = self.rg(map) || self.rg(point);
        Ok(self.push(
            Array::from_parts(vec![c], out),
            Op::Bilinear { map, point },
            rg,
        ))
    }

    /// Multi-scale deformable sampling.
    ///
    /// * `value`: `[tokens, heads * head_dim]`, levels laid out per `levels`.
    /// * `refs`: `[queries, 2]` normalized reference points.
    /// * `offsets`: `[queries, heads * L * points * 2]`, in pixels of each level.
    /// * `weights`: `[queries, heads * L * points]`, already normalized.
    ///
    /// Returns `[queries, heads * head_dim]` where each head's slice is the weighted
    /// sum of its samples.
    pub fn deform_sample(
        &mut self,
        value: Var,
        refs: Var,
        offsets: Var,
        weights: Var,
        levels: &LevelTable,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let (tokens, channels) = self.value(value).dims2();
        let (nq, two) = self.value(refs).dims2();
        let nl = levels.len();
        let samples = heads * nl * points;
        if two != 2 || tokens != levels.num_tokens() || channels % heads != 0 {
            return Err(Error::Shape(
                "deform_sample: inconsistent value/refs/levels".into(),
            ));
        }
        if self.shape(offsets) != [nq, samples * 2] || self.shape(weights) != [nq, samples] {
            return Err(Error::Shape("deform_sample: offsets/weights shape".into()));
        }
        let r = self.value(refs).data();
        if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "reference points must lie in [0,1]²".into(),
            ));
        }
        let geom = DeformGeom {
            levels: levels.clone(),
            heads,
            points,
        };
        let dh = channels / heads;
        let v = self.value(value).data();
        let off = self.value(offsets).data();
        let wt = self.value(weights).data();
        let mut out = vec![0.0; nq * channels];
        for q in 0..nq {
            for m in 0..heads {
                let o = &mut out[q * channels + m * dh..q * channels + (m + 1) * dh];
                for (l, &(h, w, start)) in levels.levels.iter().enumerate() {
                    for k in 0..points {
                        let s = (m * nl + l) * points + k;
                        let a = wt[q * samples + s];
                        let x = r[q * 2] + off[q * samples * 2 + s * 2] / w as f64;
                        let y = r[q * 2 + 1] + off[q * samples * 2 + s * 2 + 1] / h as f64;
                        if !x.is_finite() || !y.is_finite() {
                            return Err(Error::NonFinite("deformable sampling location".into()));
                        }
                        let (cs, n) = bilinear::corners(x, y, h, w);
                        for c in &cs[..n] {
                            let src = &v[(start + c.cell) * channels + m * dh..][..dh];
                            let f = a * c.weight;
                            for (oo, vv) in o.iter_mut().zip(src) {
                                *oo += f * vv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(value) || self.rg(refs) || self.rg(offsets) || self.rg(weights);
        Ok(self.push(
            Array::from_parts(vec![nq, channels], out),
            Op::Deform {
                value,
                refs,
                offsets,
                weights,
                geom,
            },
            rg,
        ))
    }

    /// Elementwise sigmoid focal loss against constant `targets` in `[0, 1]`.
    pub fn focal_loss(&mut self, logits: Var, targets: &Array, alpha: f64, gamma: f64) -> Var {
        assert_eq!(
            self.shape(logits),
            targets.shape(),
            "focal_loss: target shape"
        );
        let x = self.value(logits).data();
        let out = x
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| focal_terms(l, t, alpha, gamma).0)
            .collect();
        let shape = self.shape(logits).to_vec();
        let rg = self.rg(logits);
        self.push(
            Array::from_parts(shape, out),
            Op::Focal {
                logits,
                targets: targets.data().to_vec(),
                alpha,
                gamma,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::from_parts(self.shape(loss).to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Array>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let map_g = |f: &dyn Fn(usize) -> f64| {
            Array::from_parts(g.shape().to_vec(), (0..gd.len()).map(f).collect())
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, map_g(&|k| gd[k] * vb[k]));
                self.acc(grads, *b, map_g(&|k| gd[k] * va[k]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, map_g(&|k| gd[k] / vb[k]));
                self.acc(grads, *b, map_g(&|k| -gd[k] * va[k] / (vb[k] * vb[k])));
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick_a = |k: usize| {
                    if is_min {
                        va[k] <= vb[k]
                    } else {
                        va[k] >= vb[k]
                    }
                };
                self.acc(grads, *a, map_g(&|k| if pick_a(k) { gd[k] } else { 0.0 }));
                self.acc(grads, *b, map_g(&|k| if pick_a(k) { 0.0 } else { gd[k] }));
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.clone());
                let (n, m) = g.dims2();
                self.acc_with(grads, *row, |r| {
                    for i in 0..n {
                        for j in 0..m {
                            r[j] += gd[i * m + j];
                        }
                    }
                });
            }
            Op::MulRow(x, row) => {
                let (n, m) = g.dims2();
                let vr = self.value(*row).data();
                let vx = self.value(*x).data();
                self.acc(grads, *x, map_g(&|k| gd[k] * vr[k % m]));
                self.acc_with(grads, *row, |r| {
                    for i in 0..n {
                        for j in 0..m {
                            r[j] += gd[i * m + j] * vx[i * m + j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Array::from_parts(shape, gd.to_vec()));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        gd,
                        false,
                        self.value(*b).data(),
                        true,
                        &mut da,
                        m,
                        n,
                        k,
                        0.0,
                    );
                    self.acc(grads, *a, Array::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        self.value(*a).data(),
                        true,
                        gd,
                        false,
                        &mut db,
                        k,
                        m,
                        n,
                        0.0,
                    );
                    self.acc(grads, *b, Array::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        gd,
                        false,
                        self.value(*b).data(),
                        false,
                        &mut da,
                        m,
                        n,
                        k,
                        0.0,
                    );
                    self.acc(grads, *a, Array::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(
                        gd,
                        true,
                        self.value(*a).data(),
                        false,
                        &mut db,
                        n,
                        m,
                        k,
                        0.0,
                    );
                    self.acc(grads, *b, Array::from_parts(vec![n, k], db));
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, map_g(&|k| if va[k] > 0.0 { gd[k] } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc(grads, *a, map_g(&|k| gd[k] * y[k] * (1.0 - y[k])));
            }
            Op::Exp(a) => {
                let y = out.data();
                self.acc(grads, *a, map_g(&|k| gd[k] * y[k]));
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, map_g(&|k| gd[k] / va[k]));
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                // sign(0) taken as +1 (right derivative).
                self.acc(
                    grads,
                    *a,
                    map_g(&|k| if va[k] >= 0.0 { gd[k] } else { -gd[k] }),
                );
            }
            Op::Logit(a, eps) => {
                let va = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    map_g(&|k| {
                        let x = va[k];
                        if x < *eps || x > 1.0 - eps {
                            0.0
                        } else {
                            gd[k] / (x * (1.0 - x))
                        }
                    }),
                );
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                self.acc_with(grads, *x, |dx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                dx[at(j)] += y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (n, m) = g.dims2();
                let gv = self.value(*gain).data();
                self.acc_with(grads, *x, |dx| {
                    for i in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..m {
                            let d = gd[i * m + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * normalized[i * m + j];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for j in 0..m {
                            let d = gd[i * m + j] * gv[j];
                            dx[i * m + j] +=
                                inv_std[i] * (d - mean_d - normalized[i * m + j] * mean_dx);
                        }
                    }
                });
                self.acc_with(grads, *gain, |dg| {
                    for i in 0..n {
                        for j in 0..m {
                            dg[j] += gd[i * m + j] * normalized[i * m + j];
                        }
                    }
                });
                self.acc_with(grads, *bias, |db| {
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += gd[i * m + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Array::full(&shape, gd[0]));
            }
            Op::SliceCols { x, start } => {
                let (n, len) = g.dims2();
                let m = self.value(*x).dims2().1;
                self.acc_with(grads, *x, |dx| {
                    for i in 0..n {
                        for j in 0..len {
                            dx[i * m + start + j] += gd[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (n, total) = g.dims2();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    self.acc_with(grads, p, |dp| {
                        for i in 0..n {
                            for j in 0..w {
                                dp[i * w + j] += gd[i * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_with(grads, p, |dp| {
                        for (d, s) in dp.iter_mut().zip(&gd[off..off + len]) {
                            *d += s;
                        }
                    });
                    off += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let m = g.dims2().1;
                self.acc_with(grads, *x, |dx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..m {
                            dx[r * m + j] += gd[i * m + j];
                        }
                    }
                });
            }
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (rows, cout) = g.dims2();
                let pl = geom.patch_len();
                if self.rg(*weight) {
                    let mut dw = vec![0.0; pl * cout];
                    gemm(cols, true, gd, false, &mut dw, pl, rows, cout, 0.0);
                    self.acc(grads, *weight, Array::from_parts(vec![pl, cout], dw));
                }
                self.acc_with(grads, *bias, |db| {
                    for r in 0..rows {
                        for j in 0..cout {
                            db[j] += gd[r * cout + j];
                        }
                    }
                });
                if self.rg(*input) {
                    let mut dcols = vec![0.0; rows * pl];
                    gemm(
                        gd,
                        false,
                        self.value(*weight).data(),
                        true,
                        &mut dcols,
                        rows,
                        cout,
                        pl,
                        0.0,
                    );
                    let c = geom.in_channels;
                    self.acc_with(grads, *input, |dx| {
                        geom.for_each_tap(|row, tap, pix| {
                            let src = &dcols[row * pl + tap * c..row * pl + (tap + 1) * c];
                            for (d, s) in dx[pix * c..(pix + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        });
                    });
                }
            }
            Op::Bilinear { map, point } => {
                let shape = self.shape(*map).to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let pt = self.value(*point).data();
                let (corners, n) = bilinear::corners(pt[0], pt[1], h, w);
                let mv = self.value(*map).data();
                self.acc_with(grads, *map, |dm| {
                    for ch in 0..c {
                        for k in &corners[..n] {
                            dm[ch * h * w + k.cell] += k.weight * gd[ch];
                        }
                    }
                });
                self.acc_with(grads, *point, |dp| {
                    for ch in 0..c {
                        for k in &corners[..n] {
                            let v = mv[ch * h * w + k.cell];
                            dp[0] += gd[ch] * k.dx * v;
                            dp[1] += gd[ch] * k.dy * v;
                        }
                    }
                });
            }
            Op::Deform {
                value,
                refs,
                offsets,
                weights,
                geom,
            } => self.backprop_deform(g, *value, *refs, *offsets, *weights, geom, grads),
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let x = self.value(*logits).data();
                self.acc(
                    grads,
                    *logits,
                    map_g(&|k| gd[k] * focal_terms(x[k], targets[k], *alpha, *gamma).1),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_deform(
        &self,
        g: &Array,
        value: Var,
        refs: Var,
        offsets: Var,
        weights: Var,
        geom: &DeformGeom,
        grads: &mut [Option<Array>],
    ) {
        let gd = g.data();
        let (_, channels) = self.value(value).dims2();
        let nq = self.value(refs).dims2().0;
        let (heads, points) = (geom.heads, geom.points);
        let nl = geom.levels.len();
        let samples = heads * nl * points;
        let dh = channels / heads;
        let v = self.value(value).data();
        let r = self.value(refs).data();
        let off = self.value(offsets).data();
        let wt = self.value(weights).data();

        let mut dvalue = self.rg(value).then(|| vec![0.0; v.len()]);
        let mut dref = vec![0.0; r.len()];
        let mut doff = vec![0.0; off.len()];
        let mut dwt = vec![0.0; wt.len()];
        for q in 0..nq {
            for m in 0..heads {
                let go = &gd[q * channels + m * dh..q * channels + (m + 1) * dh];
                for (l, &(h, w, start)) in geom.levels.levels.iter().enumerate() {
                    for k in 0..points {
                        let s = (m * nl + l) * points + k;
                        let a = wt[q * samples + s];
                        let oi = q * samples * 2 + s * 2;
                        let x = r[q * 2] + off[oi] / w as f64;
                        let y = r[q * 2 + 1] + off[oi + 1] / h as f64;
                        let (cs, n) = bilinear::corners(x, y, h, w);
                        let mut sampled_dot = 0.0;
                        let mut dlx = 0.0;
                        let mut dly = 0.0;
                        for c in &cs[..n] {
                            let base = (start + c.cell) * channels + m * dh;
                            let dot: f64 =
                                go.iter().zip(&v[base..base + dh]).map(|(a, b)| a * b).sum();
                            sampled_dot += c.weight * dot;
                            dlx += c.dx * dot;
                            dly += c.dy * dot;
                            if let Some(dv) = dvalue.as_mut() {
                                let f = a * c.weight;
                                for (d, gg) in dv[base..base + dh].iter_mut().zip(go) {
                                    *d += f * gg;
                                }
                            }
                        }
                        dwt[q * samples + s] += sampled_dot;
                        dlx *= a;
                        dly *= a;
                        dref[q * 2] += dlx;
                        dref[q * 2 + 1] += dly;
                        doff[oi] += dlx / w as f64;
                        doff[oi + 1] += dly / h as f64;
                    }
                }
            }
        }
        if let Some(dv) = dvalue {
            self.acc(
                grads,
                value,
                Array::from_parts(self.shape(value).to_vec(), dv),
            );
        }
        self.acc(
            grads,
            refs,
            Array::from_parts(self.shape(refs).to_vec(), dref),
        );
        self.acc(
            grads,
            offsets,
            Array::from_parts(self.shape(offsets).to_vec(), doff),
        );
        self.acc(
            grads,
            weights,
            Array::from_parts(self.shape(weights).to_vec(), dwt),
        );
    }
}
