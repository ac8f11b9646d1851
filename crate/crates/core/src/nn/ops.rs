//! Differentiable tensor operations recorded on a [`Tape`].
//!
//! Every method computes its value eagerly and registers the matching
//! gradient closure. Shapes are validated with assertions: shape errors here
//! are internal bugs (model code constructs all graphs), not user input
//! errors. Expensive operations check [`Tape::needs_grad`] per parent so the
//! data half of, say, a first-layer convolution backward is never computed.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};

/// √(2/π), the constant of the tanh GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn as2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view().into_dimensionality::<Ix2>().expect("rank-2 tensor").to_owned()
}

fn as3(v: &ArrayD<f64>) -> Array3<f64> {
    v.view().into_dimensionality::<Ix3>().expect("rank-3 tensor").to_owned()
}

impl Tape {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
            &*va + &*vb
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                store.accumulate(tape, a, g.clone());
                store.accumulate(tape, b, g.clone());
            }),
        )
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
            &*va - &*vb
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                store.accumulate(tape, a, g.clone());
                store.accumulate(tape, b, -g);
            }),
        )
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
            &*va * &*vb
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let da = g * &*tape.value(b);
                let db = g * &*tape.value(a);
                store.accumulate(tape, a, da);
                store.accumulate(tape, b, db);
            }),
        )
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = &*self.value(a) * c;
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                store.accumulate(tape, a, g * c);
            }),
        )
    }

    /// Adds a `[D]` bias to the last axis of `x`.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let value = {
            let (vx, vb) = (self.value(x), self.value(b));
            let d = *vx.shape().last().expect("add_bias: scalar input");
            assert_eq!(vb.shape(), [d], "add_bias: bias shape mismatch");
            &*vx + &vb.view().into_dimensionality::<Ix1>().unwrap()
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                store.accumulate(tape, x, g.clone());
                let d = *g.shape().last().unwrap();
                let flat = g.view().into_shape_with_order((g.len() / d, d)).unwrap();
                store.accumulate(tape, b, flat.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Adds a `[C]` bias to the channel axis of a `[B × C × L]` tensor.
    pub fn add_bias_channel(&self, x: Var, b: Var) -> Var {
        let value = {
            let vx = as3(&self.value(x));
            let vb = self.value(b);
            assert_eq!(vb.shape(), [vx.dim().1], "add_bias_channel: bias shape");
            let vb1 = vb.view().into_dimensionality::<Ix1>().unwrap();
            let mut out = vx;
            for mut batch in out.outer_iter_mut() {
                for (mut row, &bias) in batch.outer_iter_mut().zip(vb1.iter()) {
                    row += bias;
                }
            }
            out.into_dyn()
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                store.accumulate(tape, x, g.clone());
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let db = g3.sum_axis(Axis(2)).sum_axis(Axis(0));
                store.accumulate(tape, b, db.into_dyn());
            }),
        )
    }

    /// Matrix product of `[m × k] · [k × n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (as2(&self.value(a)), as2(&self.value(b)));
            assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dims");
            va.dot(&vb).into_dyn()
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if tape.needs_grad(a) {
                    let vb = as2(&tape.value(b));
                    store.accumulate(tape, a, g2.dot(&vb.t()).into_dyn());
                }
                if tape.needs_grad(b) {
                    let va = as2(&tape.value(a));
                    store.accumulate(tape, b, va.t().dot(&g2).into_dyn());
                }
            }),
        )
    }

    /// Batched matrix product of `[N × m × k] · [N × k × n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (as3(&self.value(a)), as3(&self.value(b)));
            let (n, m, k) = va.dim();
            let (n2, k2, p) = vb.dim();
            assert_eq!((n, k), (n2, k2), "bmm: batch/inner dims");
            let mut out = Array3::<f64>::zeros((n, m, p));
            for i in 0..n {
                out.index_axis_mut(Axis(0), i)
                    .assign(&va.index_axis(Axis(0), i).dot(&vb.index_axis(Axis(0), i)));
            }
            out.into_dyn()
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let n = g3.dim().0;
                if tape.needs_grad(a) {
                    let vb = as3(&tape.value(b));
                    let mut da = Array3::<f64>::zeros(as3(&tape.value(a)).dim());
                    for i in 0..n {
                        da.index_axis_mut(Axis(0), i).assign(
                            &g3.index_axis(Axis(0), i)
                                .dot(&vb.index_axis(Axis(0), i).t()),
                        );
                    }
                    store.accumulate(tape, a, da.into_dyn());
                }
                if tape.needs_grad(b) {
                    let va = as3(&tape.value(a));
                    let mut db = Array3::<f64>::zeros(as3(&tape.value(b)).dim());
                    for i in 0..n {
                        db.index_axis_mut(Axis(0), i).assign(
                            &va.index_axis(Axis(0), i)
                                .t()
                                .dot(&g3.index_axis(Axis(0), i)),
                        );
                    }
                    store.accumulate(tape, b, db.into_dyn());
                }
            }),
        )
    }

    /// 1-D convolution of `[B × C_in × L]` with kernels `[C_out × C_in × k]`,
    /// zero padding of `(k-1)/2` on both sides, and the given stride.
    /// Implemented as im2col + GEMM; backward rebuilds the im2col matrix
    /// rather than caching it.
    pub fn conv1d(&self, x: Var, w: Var, stride: usize) -> Var {
        let (value, k) = {
            let vx = as3(&self.value(x));
            let vw = as3(&self.value(w));
            let (_, c_in, k) = vw.dim();
            assert_eq!(vx.dim().1, c_in, "conv1d: channel mismatch");
            assert!(k % 2 == 1, "conv1d: even kernel width");
            (conv1d_forward(&vx, &vw, stride), k)
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (b, c_out, l_out) = g3.dim();
                // [B × C_out × L_out] → [C_out × B·L_out], matching the GEMM layout
                let g2 = g3
                    .permuted_axes([1, 0, 2])
                    .as_standard_layout()
                    .into_shape_with_order((c_out, b * l_out))
                    .unwrap()
                    .to_owned();
                if tape.needs_grad(w) {
                    let vx = as3(&tape.value(x));
                    let col = im2col(&vx, k, stride);
                    let dw2 = g2.dot(&col.t());
                    let c_in = vx.dim().1;
                    store.accumulate(
                        tape,
                        w,
                        dw2.into_shape_with_order((c_out, c_in, k)).unwrap().into_dyn(),
                    );
                }
                if tape.needs_grad(x) {
                    let vw = as3(&tape.value(w));
                    let (_, c_in, _) = vw.dim();
                    let w2 = vw
                        .view()
                        .into_shape_with_order((c_out, c_in * k))
                        .unwrap();
                    let dcol = w2.t().dot(&g2);
                    let vx_dim = tape.value(x).shape().to_vec();
                    let dx = col2im(&dcol, vx_dim[0], c_in, vx_dim[2], k, stride, l_out);
                    store.accumulate(tape, x, dx.into_dyn());
                }
            }),
        )
    }

    /// Tanh-approximated GELU activation.
    pub fn gelu(&self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v.powi(3))).tanh())
        });
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let dx = tape.value(x).mapv(|v| {
                    let u = GELU_C * (v + GELU_A * v.powi(3));
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                }) * g;
                store.accumulate(tape, x, dx);
            }),
        )
    }

    /// Mean over the last axis: `[... × L] → [...]`.
    pub fn mean_last(&self, x: Var) -> Var {
        let l = *self.value(x).shape().last().expect("mean_last: scalar") as f64;
        let sum = self.sum_last(x);
        self.scale(sum, 1.0 / l)
    }

    /// Sum over the last axis: `[... × L] → [...]`.
    pub fn sum_last(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let last = vx.ndim() - 1;
            vx.sum_axis(Axis(last))
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let xshape = tape.shape(x);
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&xshape));
                let expanded = g.view().insert_axis(Axis(g.ndim()));
                dx += &expanded; // broadcast along the restored last axis
                store.accumulate(tape, x, dx);
            }),
        )
    }

    /// Mean of all elements, as a zero-dimensional tensor.
    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of all elements, as a zero-dimensional tensor.
    pub fn sum_all(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            ArrayD::from_elem(IxDyn(&[]), vx.sum())
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let gs = g[[]];
                let xshape = tape.shape(x);
                store.accumulate(tape, x, ArrayD::from_elem(IxDyn(&xshape), gs));
            }),
        )
    }

    /// Layer normalization over the last axis with learnable gain and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, xhat, inv_sigma) = {
            let vx = self.value(x);
            let d = *vx.shape().last().expect("layer_norm: scalar") ;
            let vg = self.value(gamma);
            let vb = self.value(beta);
            assert_eq!(vg.shape(), [d], "layer_norm: gamma shape");
            assert_eq!(vb.shape(), [d], "layer_norm: beta shape");
            let rows = vx.len() / d;
            let flat = vx.view().into_shape_with_order((rows, d)).unwrap();
            let mut xhat = Array2::<f64>::zeros((rows, d));
            let mut inv_sigma = vec![0.0; rows];
            for (r, row) in flat.rows().into_iter().enumerate() {
                let mean = row.sum() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_sigma[r] = inv;
                for (c, &v) in row.iter().enumerate() {
                    xhat[[r, c]] = (v - mean) * inv;
                }
            }
            let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
            let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
            let out = (&xhat * &g1 + &b1)
                .into_shape_with_order(IxDyn(vx.shape()))
                .unwrap();
            (out, xhat, inv_sigma)
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let d = xhat.ncols();
                let rows = xhat.nrows();
                let gflat = g.view().into_shape_with_order((rows, d)).unwrap();
                let vg: Vec<f64> = tape.value(gamma).iter().cloned().collect();
                // parameter gradients
                store.accumulate(
                    tape,
                    gamma,
                    (&gflat * &xhat).sum_axis(Axis(0)).into_dyn(),
                );
                store.accumulate(tape, beta, gflat.sum_axis(Axis(0)).into_dyn());
                if tape.needs_grad(x) {
                    let mut dx = Array2::<f64>::zeros((rows, d));
                    for r in 0..rows {
                        let gl: Vec<f64> =
                            (0..d).map(|c| gflat[[r, c]] * vg[c]).collect();
                        let mean_gl = gl.iter().sum::<f64>() / d as f64;
                        let mean_gl_xhat = gl
                            .iter()
                            .zip(xhat.row(r))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            dx[[r, c]] = (gl[c] - mean_gl - xhat[[r, c]] * mean_gl_xhat)
                                * inv_sigma[r];
                        }
                    }
                    let xshape = tape.shape(x);
                    store.accumulate(
                        tape,
                        x,
                        dx.into_shape_with_order(IxDyn(&xshape)).unwrap(),
                    );
                }
            }),
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let d = *vx.shape().last().expect("softmax_last: scalar");
            let rows = vx.len() / d;
            let flat = vx.view().into_shape_with_order((rows, d)).unwrap();
            let mut out = Array2::<f64>::zeros((rows, d));
            for (r, row) in flat.rows().into_iter().enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (c, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    out[[r, c]] = e;
                    denom += e;
                }
                out.row_mut(r).mapv_inplace(|v| v / denom);
            }
            out.into_shape_with_order(IxDyn(vx.shape())).unwrap()
        };
        let y = value.clone();
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let yf = y.view().into_shape_with_order((rows, d)).unwrap();
                let gf = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let dot = gf.row(r).dot(&yf.row(r));
                    for c in 0..d {
                        dx[[r, c]] = yf[[r, c]] * (gf[[r, c]] - dot);
                    }
                }
                let xshape = tape.shape(x);
                store.accumulate(tape, x, dx.into_shape_with_order(IxDyn(&xshape)).unwrap());
            }),
        )
    }

    /// Numerically stable `log Σ exp` over the last axis: `[... × n] → [...]`.
    pub fn logsumexp_last(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let d = *vx.shape().last().expect("logsumexp_last: scalar");
            let rows = vx.len() / d;
            let flat = vx.view().into_shape_with_order((rows, d)).unwrap();
            let mut out = Vec::with_capacity(rows);
            for row in flat.rows() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                out.push(max + s.ln());
            }
            let out_shape: Vec<usize> = vx.shape()[..vx.ndim() - 1].to_vec();
            ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap()
        };
        let y = value.clone();
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let vx = tape.value(x);
                let d = *vx.shape().last().unwrap();
                let rows = vx.len() / d;
                let flat = vx.view().into_shape_with_order((rows, d)).unwrap();
                let yf = y.view().into_shape_with_order(rows).unwrap();
                let gf = g.view().into_shape_with_order(rows).unwrap();
                let mut dx = Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    for c in 0..d {
                        dx[[r, c]] = (flat[[r, c]] - yf[r]).exp() * gf[r];
                    }
                }
                let xshape = vx.shape().to_vec();
                drop(vx);
                store.accumulate(tape, x, dx.into_shape_with_order(IxDyn(&xshape)).unwrap());
            }),
        )
    }

    /// L2-normalizes the last axis (with an ε floor inside the square root).
    pub fn l2norm_last(&self, x: Var) -> Var {
        const EPS: f64 = 1e-12;
        let (value, norms) = {
            let vx = self.value(x);
            let d = *vx.shape().last().expect("l2norm_last: scalar");
            let rows = vx.len() / d;
            let flat = vx.view().into_shape_with_order((rows, d)).unwrap();
            let mut out = Array2::<f64>::zeros((rows, d));
            let mut norms = vec![0.0; rows];
            for (r, row) in flat.rows().into_iter().enumerate() {
                let n = (row.dot(&row) + EPS).sqrt();
                norms[r] = n;
                for (c, &v) in row.iter().enumerate() {
                    out[[r, c]] = v / n;
                }
            }
            (out.into_shape_with_order(IxDyn(vx.shape())).unwrap(), norms)
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let vx = tape.value(x);
                let d = *vx.shape().last().unwrap();
                let rows = vx.len() / d;
                let flat = vx.view().into_shape_with_order((rows, d)).unwrap();
                let gf = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let n = norms[r];
                    let dot = gf.row(r).dot(&flat.row(r));
                    for c in 0..d {
                        dx[[r, c]] = gf[[r, c]] / n - flat[[r, c]] * dot / (n * n * n);
                    }
                }
                let xshape = vx.shape().to_vec();
                drop(vx);
                store.accumulate(tape, x, dx.into_shape_with_order(IxDyn(&xshape)).unwrap());
            }),
        )
    }

    /// Concatenates two rank-2 tensors along the last axis.
    pub fn concat_last(&self, a: Var, b: Var) -> Var {
        let (value, splits) = {
            let (va, vb) = (as2(&self.value(a)), as2(&self.value(b)));
            assert_eq!(va.nrows(), vb.nrows(), "concat_last: row mismatch");
            let splits = (va.ncols(), vb.ncols());
            let joined = ndarray::concatenate![Axis(1), va, vb]
                .as_standard_layout()
                .to_owned();
            (joined.into_dyn(), splits)
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let da = g2.slice_axis(Axis(1), Slice::from(0..splits.0)).to_owned();
                let db = g2
                    .slice_axis(Axis(1), Slice::from(splits.0..splits.0 + splits.1))
                    .to_owned();
                store.accumulate(tape, a, da.into_dyn());
                store.accumulate(tape, b, db.into_dyn());
            }),
        )
    }

    /// Reshape preserving element order.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .view()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count changed");
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let xshape = tape.shape(x);
                let dx = g
                    .view()
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&xshape))
                    .unwrap();
                store.accumulate(tape, x, dx);
            }),
        )
    }

    /// Axis permutation (generalized transpose), producing a standard-layout
    /// value so downstream reshapes stay cheap.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let axes_owned = axes.to_vec();
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                store.accumulate(tape, x, dx);
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose2(&self, x: Var) -> Var {
        self.permute(x, &[1, 0])
    }

    /// Selects rows of a `[N × D]` tensor; indices may repeat. Gradient is a
    /// scatter-add back into the source rows.
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Var {
        let idx = indices.to_vec();
        let value = {
            let vx = as2(&self.value(x));
            let mut out = Array2::<f64>::zeros((idx.len(), vx.ncols()));
            for (r, &src) in idx.iter().enumerate() {
                out.row_mut(r).assign(&vx.row(src));
            }
            out.into_dyn()
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xshape = tape.shape(x);
                let mut dx = Array2::<f64>::zeros((xshape[0], xshape[1]));
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(src);
                    row += &g2.row(r);
                }
                store.accumulate(tape, x, dx.into_dyn());
            }),
        )
    }

    /// Per-row element selection from a `[N × K]` tensor: output `[N]` with
    /// `out[r] = x[r, indices[r]]`.
    pub fn gather_last(&self, x: Var, indices: &[usize]) -> Var {
        let idx = indices.to_vec();
        let value = {
            let vx = as2(&self.value(x));
            assert_eq!(vx.nrows(), idx.len(), "gather_last: index count");
            let out: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| vx[[r, c]]).collect();
            ArrayD::from_shape_vec(IxDyn(&[idx.len()]), out).unwrap()
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let xshape = tape.shape(x);
                let mut dx = Array2::<f64>::zeros((xshape[0], xshape[1]));
                for (r, &c) in idx.iter().enumerate() {
                    dx[[r, c]] = g1[r];
                }
                store.accumulate(tape, x, dx.into_dyn());
            }),
        )
    }

    /// Main diagonal of a square matrix: `[N × N] → [N]`.
    pub fn diag(&self, x: Var) -> Var {
        let value = {
            let vx = as2(&self.value(x));
            assert_eq!(vx.nrows(), vx.ncols(), "diag: non-square input");
            vx.diag().to_owned().into_dyn()
        };
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let n = g1.len();
                let mut dx = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    dx[[i, i]] = g1[i];
                }
                store.accumulate(tape, x, dx.into_dyn());
            }),
        )
    }

    /// Inverted dropout: elements are zeroed with probability `p` and the
    /// survivors scaled by `1/(1－p)`, so the expectation is unchanged. With
    /// `p = 0` this is the identity (and records no node).
    pub fn dropout(&self, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask = {
            let vx = self.value(x);
            ArrayD::from_shape_simple_fn(IxDyn(vx.shape()), || {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        };
        let value = &*self.value(x) * &mask;
        self.push_op(
            value,
            Box::new(move |g, tape, store| {
                store.accumulate(tape, x, g * &mask);
            }),
        )
    }
}

/// Unfolds `[B × C × L]` into the im2col matrix `[C·k × B·L_out]` for a
/// kernel of width `k`, zero padding `(k-1)/2`, and the given stride.
fn im2col(x: &Array3<f64>, k: usize, stride: usize) -> Array2<f64> {
    let (b, c, l) = x.dim();
    let pad = (k - 1) / 2;
    let l_out = conv_out_len(l, k, stride);
    let mut col = Array2::<f64>::zeros((c * k, b * l_out));
    for ci in 0..c {
        for t in 0..k {
            let row = ci * k + t;
            for bi in 0..b {
                for j in 0..l_out {
                    let src = (j * stride + t) as isize - pad as isize;
                    if src >= 0 && (src as usize) < l {
                        col[[row, bi * l_out + j]] = x[[bi, ci, src as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds a `[C·k × B·L_out]` gradient back to
/// the `[B × C × L]` input layout.
fn col2im(
    dcol: &Array2<f64>,
    b: usize,
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    l_out: usize,
) -> Array3<f64> {
    let pad = (k - 1) / 2;
    let mut dx = Array3::<f64>::zeros((b, c, l));
    for ci in 0..c {
        for t in 0..k {
            let row = ci * k + t;
            for bi in 0..b {
                for j in 0..l_out {
                    let src = (j * stride + t) as isize - pad as isize;
                    if src >= 0 && (src as usize) < l {
                        dx[[bi, ci, src as usize]] += dcol[[row, bi * l_out + j]];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv_out_len(l: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (l + 2 * pad - k) / stride + 1
}

fn conv1d_forward(x: &Array3<f64>, w: &Array3<f64>, stride: usize) -> ArrayD<f64> {
    let (b, _, l) = x.dim();
    let (c_out, c_in, k) = w.dim();
    let l_out = conv_out_len(l, k, stride);
    let col = im2col(x, k, stride);
    let w2 = w.view().into_shape_with_order((c_out, c_in * k)).unwrap();
    let y2 = w2.dot(&col); // [C_out × B·L_out]
    y2.into_shape_with_order((c_out, b, l_out))
        .unwrap()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .to_owned()
        .into_dyn()
}
