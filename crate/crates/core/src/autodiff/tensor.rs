//! Graph-recording tensor type and its operations.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::param::ParamInner;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct BackwardArgs<'a> {
    pub grad: &'a [f64],
    pub parents: &'a [Tensor],
    pub out: &'a [f64],
}

/// Per-parent gradient contributions; `None` for parents that do not need one.
type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    param: Option<Rc<ParamInner>>,
}

/// An immutable real-valued array participating in reverse-mode
/// differentiation. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn assert_finite(op: &str, data: &[f64]) {
    for &v in data {
        if !v.is_finite() {
            panic!("{op}: non-finite value in output");
        }
    }
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
        param: Option<Rc<ParamInner>>,
    ) -> Tensor {
        debug_assert_eq!(product(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
                param,
            }),
        }
    }

    /// A constant leaf that never receives gradients.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            product(shape),
            data.len(),
            "constant: shape {:?} does not match {} values",
            shape,
            data.len()
        );
        assert_finite("constant", &data);
        Tensor::new_inner(shape.to_vec(), data, false, Vec::new(), None, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1], vec![v])
    }

    /// A differentiable leaf not bound to any [`Parameter`] (used in tests
    /// and oracles).
    pub fn var(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(product(shape), data.len());
        assert_finite("var", &data);
        Tensor::new_inner(shape.to_vec(), data, true, Vec::new(), None, None)
    }

    pub(crate) fn param_leaf(param: Rc<ParamInner>) -> Tensor {
        let data = param.data.borrow().clone();
        let shape = param.shape.clone();
        let requires_grad = param.trainable.get();
        Tensor::new_inner(shape, data, requires_grad, Vec::new(), None, Some(param))
    }

    /// Node built from an op. `pub(crate)` so fused ops can live next to the
    /// code that owns their math (for example the softened patch diameter).
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        assert_finite(op, &data);
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Tensor::new_inner(shape, data, requires_grad, parents, backward, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value; panics unless the tensor holds exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Accumulated gradient of a leaf after `backward`, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    fn rows(&self) -> usize {
        assert_eq!(self.shape().len(), 2, "expected 2-d tensor, got {:?}", self.shape());
        self.shape()[0]
    }

    fn cols(&self) -> usize {
        assert_eq!(self.shape().len(), 2, "expected 2-d tensor, got {:?}", self.shape());
        self.shape()[1]
    }

    // ── elementwise binary ──────────────────────────────────────────────

    fn zip_op(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |args| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                let ga = args.parents[0].requires_grad().then(|| {
                    args.grad
                        .iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&x, &y))| g * dfa(x, y))
                        .collect()
                });
                let gb = args.parents[1].requires_grad().then(|| {
                    args.grad
                        .iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&x, &y))| g * dfb(x, y))
                        .collect()
                });
                vec![ga, gb]
            },
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_op(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_op(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_op(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Broadcast add of a row vector `[n]` onto every row of `[m, n]`.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(
            bias.shape(),
            &[n],
            "add_bias: shape mismatch {:?} vs {:?}",
            self.shape(),
            bias.shape()
        );
        let mut data = self.data().to_vec();
        let b = bias.data();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b[c];
            }
        }
        Tensor::from_op(
            "add_bias",
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            move |args| {
                let gx = args.parents[0]
                    .requires_grad()
                    .then(|| args.grad.to_vec());
                let gb = args.parents[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += args.grad[r * n + c];
                        }
                    }
                    gb
                });
                vec![gx, gb]
            },
        )
    }

    // ── elementwise unary ───────────────────────────────────────────────

    fn map_op(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // derivative as a function of (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |args| {
                let x = args.parents[0].data();
                let g = args
                    .grad
                    .iter()
                    .zip(x.iter().zip(args.out))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            },
        )
    }

    pub fn relu(&self) -> Tensor {
        // subgradient at 0 is 0, so an inactive hinge stays inactive
        self.map_op("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        self.map_op(
            "gelu",
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    pub fn exp(&self) -> Tensor {
        self.map_op("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.map_op("ln", |x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map_op("sqrt", |x| x.sqrt(), |_, y| 0.5 / y)
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        self.map_op("affine", move |x| a * x + b, move |_, _| a)
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.affine(a, 0.0)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    /// `max(x, c)` elementwise; gradient passes only where `x > c`.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        self.map_op(
            "clamp_min",
            move |x| x.max(c),
            move |x, _| if x > c { 1.0 } else { 0.0 },
        )
    }

    // ── matrix ops ──────────────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(
            k, k2,
            "matmul: incompatible shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let data = matmul_nn(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |args| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                let ga = args.parents[0]
                    .requires_grad()
                    .then(|| matmul_nt(args.grad, b, m, n, k));
                let gb = args.parents[1]
                    .requires_grad()
                    .then(|| matmul_tn(a, args.grad, m, k, n));
                vec![ga, gb]
            },
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        Tensor::from_op(
            "transpose",
            vec![n, m],
            data,
            vec![self.clone()],
            move |args| {
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        g[r * n + c] = args.grad[c * m + r];
                    }
                }
                vec![Some(g)]
            },
        )
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            product(shape),
            self.numel(),
            "reshape: cannot view {:?} as {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            |args| vec![Some(args.grad.to_vec())],
        )
    }

    /// Select rows of a 2-d tensor; duplicates allowed, gradient scatters.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let idx = indices.to_vec();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < m, "gather_rows: index {i} out of range for {m} rows");
            data.extend_from_slice(&self.data()[i * n..(i + 1) * n]);
        }
        Tensor::from_op(
            "gather_rows",
            vec![idx.len(), n],
            data,
            vec![self.clone()],
            move |args| {
                let mut g = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        g[i * n + c] += args.grad[r * n + c];
                    }
                }
                vec![Some(g)]
            },
        )
    }

    /// Select elements of a 1-d tensor; duplicates allowed, gradient
    /// scatters additively.
    pub fn gather_rows_1d(&self, indices: &[usize]) -> Tensor {
        assert_eq!(
            self.shape().len(),
            1,
            "gather_rows_1d: expected 1-d tensor, got {:?}",
            self.shape()
        );
        let n = self.numel();
        let idx = indices.to_vec();
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| {
                assert!(i < n, "gather_rows_1d: index {i} out of range for {n}");
                self.data()[i]
            })
            .collect();
        Tensor::from_op(
            "gather_rows_1d",
            vec![idx.len()],
            data,
            vec![self.clone()],
            move |args| {
                let mut g = vec![0.0; n];
                for (r, &i) in idx.iter().enumerate() {
                    g[i] += args.grad[r];
                }
                vec![Some(g)]
            },
        )
    }

    /// Contiguous column slice `[start, start + len)` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert!(start + len <= n, "slice_cols: {start}+{len} exceeds {n} columns");
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.data()[r * n + start..r * n + start + len]);
        }
        Tensor::from_op(
            "slice_cols",
            vec![m, len],
            data,
            vec![self.clone()],
            move |args| {
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..len {
                        g[r * n + start + c] = args.grad[r * len + c];
                    }
                }
                vec![Some(g)]
            },
        )
    }

    /// Repeat a `[1, n]` row `m` times into `[m, n]`.
    pub fn repeat_rows(&self, m: usize) -> Tensor {
        assert_eq!(self.rows(), 1, "repeat_rows: expected a single row");
        let n = self.cols();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(self.data());
        }
        Tensor::from_op(
            "repeat_rows",
            vec![m, n],
            data,
            vec![self.clone()],
            move |args| {
                let mut g = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        g[c] += args.grad[r * n + c];
                    }
                }
                vec![Some(g)]
            },
        )
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let n = parts[0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(
                p.cols(),
                n,
                "concat_rows: column mismatch {:?} vs [_, {}]",
                p.shape(),
                n
            );
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Tensor::from_op(
            "concat_rows",
            vec![rows, n],
            data,
            parts.to_vec(),
            move |args| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for (p, &sz) in args.parents.iter().zip(&sizes) {
                    out.push(
                        p.requires_grad()
                            .then(|| args.grad[off..off + sz].to_vec()),
                    );
                    off += sz;
                }
                out
            },
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let m = parts[0].rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(
                    p.rows(),
                    m,
                    "concat_cols: row mismatch {:?} vs [{}, _]",
                    p.shape(),
                    m
                );
                p.cols()
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let widths2 = widths.clone();
        Tensor::from_op(
            "concat_cols",
            vec![m, n],
            data,
            parts.to_vec(),
            move |args| {
                let mut out = Vec::with_capacity(widths2.len());
                let mut off = 0;
                for (p, &w) in args.parents.iter().zip(&widths2) {
                    out.push(p.requires_grad().then(|| {
                        let mut g = vec![0.0; m * w];
                        for r in 0..m {
                            g[r * w..(r + 1) * w]
                                .copy_from_slice(&args.grad[r * n + off..r * n + off + w]);
                        }
                        g
                    }));
                    off += w;
                }
                out
            },
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Columnwise max over rows of `[m, n]`, with the winning row index per
    /// column. Ties go to the lowest row; the gradient routes only there.
    pub fn max_axis0(&self) -> (Tensor, Vec<usize>) {
        let (m, n) = (self.rows(), self.cols());
        assert!(m >= 1, "max_axis0: empty input");
        let src = self.data();
        let mut vals = src[..n].to_vec();
        let mut arg = vec![0usize; n];
        for r in 1..m {
            for c in 0..n {
                let v = src[r * n + c];
                if v > vals[c] {
                    vals[c] = v;
                    arg[c] = r;
                }
            }
        }
        let arg2 = arg.clone();
        let t = Tensor::from_op(
            "max_axis0",
            vec![n],
            vals,
            vec![self.clone()],
            move |args| {
                let mut g = vec![0.0; m * n];
                for (c, &r) in arg2.iter().enumerate() {
                    g[r * n + c] = args.grad[c];
                }
                vec![Some(g)]
            },
        );
        (t, arg)
    }

    /// Columnwise mean over rows of `[m, n]` (the centroid for `[m, 3]`).
    pub fn mean_axis0(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut vals = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                vals[c] += src[r * n + c];
            }
        }
        for v in &mut vals {
            *v /= m as f64;
        }
        Tensor::from_op("mean_axis0", vec![n], vals, vec![self.clone()], move |args| {
            let inv = 1.0 / m as f64;
            let mut g = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    g[r * n + c] = args.grad[c] * inv;
                }
            }
            vec![Some(g)]
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let numel = self.numel();
        Tensor::from_op("sum_all", vec![1], vec![s], vec![self.clone()], move |args| {
            vec![Some(vec![args.grad[0]; numel])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let numel = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            "mean_all",
            vec![1],
            vec![s / numel as f64],
            vec![self.clone()],
            move |args| vec![Some(vec![args.grad[0] / numel as f64; numel])],
        )
    }

    // ── normalization and similarity ────────────────────────────────────

    /// Row-wise softmax; a 1-d tensor is treated as a single row.
    pub fn softmax(&self) -> Tensor {
        let (m, n) = match self.shape() {
            [n] => (1usize, *n),
            [m, n] => (*m, *n),
            s => panic!("softmax: expected 1-d or 2-d tensor, got {s:?}"),
        };
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..n {
                let e = (row[c] - mx).exp();
                data[r * n + c] = e;
                s += e;
            }
            for c in 0..n {
                data[r * n + c] /= s;
            }
        }
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |args| {
                let y = args.out;
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    let mut dot = 0.0;
                    for c in 0..n {
                        dot += args.grad[r * n + c] * y[r * n + c];
                    }
                    for c in 0..n {
                        g[r * n + c] = y[r * n + c] * (args.grad[r * n + c] - dot);
                    }
                }
                vec![Some(g)]
            },
        )
    }

    /// Layer normalization over the last axis of `[m, n]` with gain and bias
    /// vectors of shape `[n]`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(gamma.shape(), &[n], "layer_norm: gain shape {:?}", gamma.shape());
        assert_eq!(beta.shape(), &[n], "layer_norm: bias shape {:?}", beta.shape());
        let src = self.data();
        let g = gamma.data();
        let b = beta.data();
        let mut data = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_sigma = vec![0.0; m];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = inv;
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                xhat[r * n + c] = xh;
                data[r * n + c] = g[c] * xh + b[c];
            }
        }
        Tensor::from_op(
            "layer_norm",
            vec![m, n],
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |args| {
                let gamma_v = args.parents[1].data();
                let gx = args.parents[0].requires_grad().then(|| {
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xh = 0.0;
                        for c in 0..n {
                            let dyh = args.grad[r * n + c] * gamma_v[c];
                            mean_dy += dyh;
                            mean_dy_xh += dyh * xhat[r * n + c];
                        }
                        mean_dy /= n as f64;
                        mean_dy_xh /= n as f64;
                        for c in 0..n {
                            let dyh = args.grad[r * n + c] * gamma_v[c];
                            out[r * n + c] =
                                inv_sigma[r] * (dyh - mean_dy - xhat[r * n + c] * mean_dy_xh);
                        }
                    }
                    out
                });
                let gg = args.parents[1].requires_grad().then(|| {
                    let mut out = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            out[c] += args.grad[r * n + c] * xhat[r * n + c];
                        }
                    }
                    out
                });
                let gb = args.parents[2].requires_grad().then(|| {
                    let mut out = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            out[c] += args.grad[r * n + c];
                        }
                    }
                    out
                });
                vec![gx, gg, gb]
            },
        )
    }

    pub fn dot(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "dot: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let s: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Tensor::from_op(
            "dot",
            vec![1],
            vec![s],
            vec![self.clone(), other.clone()],
            |args| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                let g = args.grad[0];
                let ga = args.parents[0]
                    .requires_grad()
                    .then(|| b.iter().map(|&x| g * x).collect());
                let gb = args.parents[1]
                    .requires_grad()
                    .then(|| a.iter().map(|&x| g * x).collect());
                vec![ga, gb]
            },
        )
    }

    /// Euclidean norm as a scalar; the gradient at exactly zero is defined
    /// as zero.
    pub fn norm_l2(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&x| x * x).sum();
        let norm = s.sqrt();
        Tensor::from_op(
            "norm_l2",
            vec![1],
            vec![norm],
            vec![self.clone()],
            move |args| {
                let x = args.parents[0].data();
                let g = args.grad[0];
                let out = if norm == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    x.iter().map(|&v| g * v / norm).collect()
                };
                vec![Some(out)]
            },
        )
    }

    /// Cosine similarity of two equal-shape tensors viewed as flat vectors.
    pub fn cosine_sim(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "cosine_sim: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let a = self.data();
        let b = other.data();
        let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            panic!("cosine_sim: zero-norm input");
        }
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
        let c = dot / (na * nb);
        Tensor::from_op(
            "cosine_sim",
            vec![1],
            vec![c],
            vec![self.clone(), other.clone()],
            move |args| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                let g = args.grad[0];
                let ga = args.parents[0].requires_grad().then(|| {
                    a.iter()
                        .zip(b)
                        .map(|(&x, &y)| g * (y / (na * nb) - c * x / (na * na)))
                        .collect()
                });
                let gb = args.parents[1].requires_grad().then(|| {
                    a.iter()
                        .zip(b)
                        .map(|(&x, &y)| g * (x / (na * nb) - c * y / (nb * nb)))
                        .collect()
                });
                vec![ga, gb]
            },
        )
    }
}

// ── dense kernels ───────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

// ── backward pass ───────────────────────────────────────────────────────

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every reachable differentiable leaf (and its bound parameter);
/// repeated calls keep accumulating until the leaves are cleared.
pub fn backward(loss: &Tensor) {
    assert_eq!(
        loss.numel(),
        1,
        "backward: loss must be a scalar, got shape {:?}",
        loss.shape()
    );
    if !loss.requires_grad() {
        return;
    }

    // Collect the reachable differentiable subgraph. Node ids increase in
    // creation order, so descending id order is a valid reverse topological
    // order.
    let mut nodes: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if nodes.contains_key(&t.inner.id) {
            continue;
        }
        for p in &t.inner.parents {
            if p.requires_grad() {
                stack.push(p.clone());
            }
        }
        nodes.insert(t.inner.id, t);
    }
    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.inner.id, vec![1.0]);

    for id in order {
        let node = &nodes[&id];
        let Some(g) = grads.remove(&id) else { continue };
        if let Some(f) = &node.inner.backward {
            let args = BackwardArgs {
                grad: &g,
                parents: &node.inner.parents,
                out: &node.inner.data,
            };
            let contribs = f(&args);
            debug_assert_eq!(contribs.len(), node.inner.parents.len());
            for (parent, contrib) in node.inner.parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(c.len(), parent.numel());
                let slot = grads
                    .entry(parent.inner.id)
                    .or_insert_with(|| vec![0.0; parent.numel()]);
                for (s, v) in slot.iter_mut().zip(&c) {
                    *s += v;
                }
            }
        } else {
            // leaf: persist into the tensor accumulator and bound parameter
            let mut acc = node.inner.grad.borrow_mut();
            match acc.as_mut() {
                Some(a) => {
                    for (s, v) in a.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                None => *acc = Some(g.clone()),
            }
            if let Some(p) = &node.inner.param {
                p.accumulate_grad(&g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shapes_and_values() {
        let a = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::constant(&[3, 4], (0..12).map(|i| i as f64).collect());
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 4]);
        // row 0: [1,2,3] . cols of b
        assert_eq!(c.data()[0], 1.0 * 0.0 + 2.0 * 4.0 + 3.0 * 8.0);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::constant(&[2, 3], vec![0.0; 6]);
        let b = Tensor::constant(&[4, 4], vec![0.0; 16]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::constant(&[2], vec![0.0, 0.0]);
        let y = x.softmax();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn max_reduce_value_and_argmax() {
        let x = Tensor::constant(&[3, 1], vec![1.0, 9.0, 2.0]);
        let (v, arg) = x.max_axis0();
        assert_eq!(v.data(), &[9.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn max_axis0_tie_goes_to_lowest_row() {
        let x = Tensor::constant(&[3, 2], vec![5.0, 1.0, 5.0, 3.0, 2.0, 3.0]);
        let (_, arg) = x.max_axis0();
        assert_eq!(arg, vec![0, 1]);
    }

    #[test]
    fn backward_square() {
        let x = Tensor::var(&[1], vec![3.0]);
        let y = x.mul(&x);
        backward(&y);
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_constant_path_leaves_no_grads() {
        let x = Tensor::var(&[2], vec![1.0, 2.0]);
        let c = Tensor::constant(&[2], vec![3.0, 4.0]);
        let y = c.sum_all();
        backward(&y);
        assert!(x.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "backward: loss must be a scalar")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::var(&[2], vec![1.0, 2.0]);
        backward(&x.relu());
    }

    #[test]
    fn accumulation_equals_sum_of_single_uses() {
        // same tensor used twice vs the two uses separately
        let x = Tensor::var(&[3], vec![0.5, -1.5, 2.0]);
        let w = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]);
        let both = x.dot(&w).add(&x.mul(&x).sum_all());
        backward(&both);
        let g_both = x.grad().unwrap();

        let x1 = Tensor::var(&[3], vec![0.5, -1.5, 2.0]);
        backward(&x1.dot(&w));
        let x2 = Tensor::var(&[3], vec![0.5, -1.5, 2.0]);
        backward(&x2.mul(&x2).sum_all());
        let expect: Vec<f64> = x1
            .grad()
            .unwrap()
            .iter()
            .zip(x2.grad().unwrap())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(g_both, expect);
    }

    #[test]
    fn cosine_grad_orthogonal_to_input() {
        // at x == y the similarity is maximal; the gradient has no
        // component along x (here it is exactly zero)
        let x = Tensor::var(&[2], vec![1.0, 0.0]);
        let y = Tensor::constant(&[2], vec![1.0, 0.0]);
        let c = x.cosine_sim(&y);
        backward(&c);
        let g = x.grad().unwrap();
        let along: f64 = g.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!(along.abs() < 1e-12, "gradient has a radial component: {along}");

        // central finite difference, h = 1e-5
        let h = 1e-5;
        let cos = |a: &[f64]| {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            a[0] / na
        };
        for i in 0..2 {
            let mut plus = [1.0, 0.0];
            let mut minus = [1.0, 0.0];
            plus[i] += h;
            minus[i] -= h;
            let fd = (cos(&plus) - cos(&minus)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "fd {fd} vs analytic {}", g[i]);
        }
    }

    #[test]
    #[should_panic(expected = "cosine_sim: zero-norm input")]
    fn cosine_rejects_zero_norm() {
        let x = Tensor::constant(&[2], vec![0.0, 0.0]);
        let y = Tensor::constant(&[2], vec![1.0, 0.0]);
        let _ = x.cosine_sim(&y);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_output_is_rejected() {
        let x = Tensor::constant(&[1], vec![-1.0]);
        let _ = x.ln();
    }

    #[test]
    fn layer_norm_matches_manual() {
        let x = Tensor::constant(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::constant(&[4], vec![1.0; 4]);
        let b = Tensor::constant(&[4], vec![0.0; 4]);
        let y = x.layer_norm(&g, &b, 0.0);
        let mean = 2.5;
        let var: f64 = 1.25;
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|v| (v - mean) / var.sqrt())
            .collect();
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn determinism_bit_identical_forward_and_grad() {
        let run = || {
            let x = Tensor::var(&[2, 2], vec![0.3, -0.7, 1.1, 0.2]);
            let w = Tensor::constant(&[2, 2], vec![0.5, 0.1, -0.2, 0.9]);
            let y = x.matmul(&w).gelu().softmax().sum_all();
            backward(&y);
            (y.item().to_bits(), x.grad().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
