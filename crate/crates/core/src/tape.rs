//! Reverse-mode autodiff on a flat tape of eager tensor ops.
//!
//! The op set is exactly what the models here need: dense layers, 2-D
//! convolutions, attention primitives, a few pointwise nonlinearities and
//! reductions. Every op computes its forward value on construction; calling
//! [`Tape::backward`] walks the tape once in reverse.
//!
//! Determinism: every kernel iterates in a fixed order (parallel chunks cover
//! disjoint output regions), so results are bit-identical across runs and
//! thread counts.

use crate::tensor::{col2im_acc, im2col, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use std::collections::HashMap;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub usize);

#[derive(Debug)]
enum Op {
    Const,
    Param { index: usize },
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    AddScalar(Value, f64),
    /// y = x * scale[c] + shift[c] with constant per-last-dim vectors.
    AffineChan {
        x: Value,
        scale: Vec<f64>,
        shift: Vec<f64>,
    },
    /// y[..., out] = x[..., in] · wᵀ + b, with w stored [out, in].
    Linear {
        x: Value,
        w: Value,
        b: Option<Value>,
    },
    /// Batched matmul: a [B,m,k] × b [B,k,n].
    Bmm { a: Value, b: Value },
    SoftmaxLast(Value),
    LayerNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        eps: f64,
    },
    Gelu(Value),
    Relu(Value),
    Sigmoid(Value),
    Tanh(Value),
    Exp(Value),
    Abs(Value),
    Clamp { x: Value, lo: f64, hi: f64 },
    MeanAll(Value),
    SumAll(Value),
    /// x [F,C,H,W] * w [O,C,kh,kw] + b [O] → [F,O,OH,OW].
    Conv2d {
        x: Value,
        w: Value,
        b: Option<Value>,
        stride: usize,
        pad: usize,
    },
    /// Bilinear ×2 upsampling of [F,C,H,W] (align_corners = false).
    UpBilinear2x(Value),
    /// Nearest-exact resize of [F,C,H,W] to (oh, ow).
    ResizeNearest { x: Value, oh: usize, ow: usize },
    Concat { parts: Vec<Value>, axis: usize },
    Slice {
        x: Value,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Value),
    Permute { x: Value, perm: Vec<usize> },
    /// Row `row` of a [V,C] table.
    SelectRow { table: Value, row: usize },
    /// y = x / sqrt(Σ_last x² + eps).
    NormalizeLast { x: Value, eps: f64 },
    /// Pairwise rotation of the last dim of [B,T,D] by per-(t, D/2) angles.
    Rope { x: Value, cos: Tensor, sin: Tensor },
    /// y[r, c] = x[r, c] + v[c] for x viewed as [rows, C].
    AddRowBroadcast { x: Value, v: Value },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, v: Value) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of all `Param` leaves, keyed by parameter index.
    pub fn params(self, tape: &Tape) -> HashMap<usize, Tensor> {
        let mut out = HashMap::new();
        for (id, g) in self.grads.into_iter().enumerate() {
            if let (Op::Param { index }, Some(g)) = (&tape.nodes[id].op, g) {
                out.insert(*index, g);
            }
        }
        out
    }
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

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn ng(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Const, false)
    }

    /// Leaf that receives a gradient, tagged with an external parameter index.
    pub fn param_leaf(&mut self, index: usize, t: Tensor) -> Value {
        self.push(t, Op::Param { index }, true)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(data, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(data, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(data, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let data = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(data, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        let data = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(data, Op::AddScalar(a, c), ng)
    }

    /// Per-channel affine with constant coefficients over the last dim.
    pub fn affine_chan(&mut self, x: Value, scale: &[f64], shift: &[f64]) -> Value {
        let c = self.value(x).last_dim();
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(c) {
            for (i, &v) in row.iter().enumerate() {
                data.push(v * scale[i] + shift[i]);
            }
        }
        let t = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        self.push(
            t,
            Op::AffineChan {
                x,
                scale: scale.to_vec(),
                shift: shift.to_vec(),
            },
            ng,
        )
    }

    pub fn linear(&mut self, x: Value, w: Value, b: Option<Value>) -> Value {
        let (xin, wsh) = (self.value(x), self.value(w));
        let in_dim = xin.last_dim();
        assert_eq!(wsh.shape().len(), 2, "weight must be [out, in]");
        assert_eq!(wsh.shape()[1], in_dim, "linear in-dim mismatch");
        let out_dim = wsh.shape()[0];
        let rows = xin.numel() / in_dim;
        let mut out = vec![0.0; rows * out_dim];
        matmul_bt_acc(xin.data(), wsh.data(), &mut out, rows, in_dim, out_dim);
        if let Some(bv) = b {
            let bias = self.value(bv);
            assert_eq!(bias.numel(), out_dim);
            for row in out.chunks_exact_mut(out_dim) {
                for (o, &bb) in row.iter_mut().zip(bias.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = xin.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, ng)
    }

    pub fn bmm(&mut self, a: Value, b: Value) -> Value {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(ash.len(), 3, "bmm lhs must be rank 3");
        assert_eq!(bsh.len(), 3, "bmm rhs must be rank 3");
        assert_eq!(ash[0], bsh[0], "bmm batch mismatch");
        assert_eq!(ash[2], bsh[1], "bmm inner dim mismatch");
        let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![0.0; bs * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..bs {
                matmul_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[bs, m, n], out), Op::Bmm { a, b }, ng)
    }

    pub fn softmax_last(&mut self, x: Value) -> Value {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(c) {
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let exps: Vec<f64> = row
                .iter()
                .map(|&v| {
                    let e = (v - maxv).exp();
                    denom += e;
                    e
                })
                .collect();
            data.extend(exps.into_iter().map(|e| e / denom));
        }
        let t = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        self.push(t, Op::SoftmaxLast(x), ng)
    }

    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: f64) -> Value {
        let xv = self.value(x);
        let c = xv.last_dim();
        assert_eq!(self.value(gamma).numel(), c);
        assert_eq!(self.value(beta).numel(), c);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = (var + eps).sqrt();
            for (i, &v) in row.iter().enumerate() {
                data.push((v - mean) / s * gv[i] + bv[i]);
            }
        }
        let t = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Value) -> Value {
        let data = self.value(x).map(gelu_fwd);
        let ng = self.ng(x);
        self.push(data, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let data = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(data, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let data = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.ng(x);
        self.push(data, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        let data = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(data, Op::Tanh(x), ng)
    }

    pub fn exp(&mut self, x: Value) -> Value {
        let data = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(data, Op::Exp(x), ng)
    }

    pub fn abs(&mut self, x: Value) -> Value {
        let data = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(data, Op::Abs(x), ng)
    }

    pub fn clamp(&mut self, x: Value, lo: f64, hi: f64) -> Value {
        let data = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(data, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn mean_all(&mut self, x: Value) -> Value {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), ng)
    }

    pub fn sum_all(&mut self, x: Value) -> Value {
        let s = self.value(x).data().iter().sum::<f64>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn conv2d(&mut self, x: Value, w: Value, b: Option<Value>, stride: usize, pad: usize) -> Value {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv input must be [F,C,H,W]");
        assert_eq!(ws.len(), 4, "conv weight must be [O,C,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv channel mismatch");
        let (f, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let ck = c * kh * kw;
        let mut out = vec![0.0; f * o * oh * ow];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut col = vec![0.0; ck * oh * ow];
            for fi in 0..f {
                im2col(
                    &xv[fi * c * h * wd..(fi + 1) * c * h * wd],
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    &mut col,
                );
                matmul_acc(
                    wv,
                    &col,
                    &mut out[fi * o * oh * ow..(fi + 1) * o * oh * ow],
                    o,
                    ck,
                    oh * ow,
                );
            }
        }
        if let Some(bv) = b {
            let bias = self.value(bv).data().to_vec();
            assert_eq!(bias.len(), o);
            for frame in out.chunks_exact_mut(o * oh * ow) {
                for (oc, plane) in frame.chunks_exact_mut(oh * ow).enumerate() {
                    for v in plane {
                        *v += bias[oc];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        self.push(
            Tensor::from_vec(&[f, o, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn upsample_bilinear_2x(&mut self, x: Value) -> Value {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "upsample input must be [F,C,H,W]");
        let (f, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * 2, w * 2);
        let wy = bilinear_weights(h, oh);
        let wx = bilinear_weights(w, ow);
        let xv = self.value(x).data();
        let mut out = vec![0.0; f * c * oh * ow];
        for plane in 0..f * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, fy) = wy[oy];
                for ox in 0..ow {
                    let (x0, x1, fx) = wx[ox];
                    let v = src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                        + src[y0 * w + x1] * (1.0 - fy) * fx
                        + src[y1 * w + x0] * fy * (1.0 - fx)
                        + src[y1 * w + x1] * fy * fx;
                    dst[oy * ow + ox] = v;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[f, c, oh, ow], out),
            Op::UpBilinear2x(x),
            ng,
        )
    }

    /// Nearest-exact spatial resize (matches the usual `nearest-exact` rule:
    /// src = floor((dst + 0.5) * in/out)).
    pub fn resize_nearest_exact(&mut self, x: Value, oh: usize, ow: usize) -> Value {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "resize input must be [F,C,H,W]");
        let (f, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ys = nearest_exact_indices(h, oh);
        let xsrc = nearest_exact_indices(w, ow);
        let xv = self.value(x).data();
        let mut out = vec![0.0; f * c * oh * ow];
        for plane in 0..f * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let sy = ys[oy];
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[sy * w + xsrc[ox]];
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[f, c, oh, ow], out),
            Op::ResizeNearest { x, oh, ow },
            ng,
        )
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Value {
        assert!(!parts.is_empty());
        let base = self.shape(parts[0]).to_vec();
        let rank = base.len();
        assert!(axis < rank);
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), rank, "concat rank mismatch");
            for (d, (&a, &b)) in base.iter().zip(s).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat dim {} mismatch", d);
                }
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let pv = self.value(p).data();
            for ou in 0..outer {
                let src = &pv[ou * s_axis * inner..(ou + 1) * s_axis * inner];
                let dst_start = (ou * axis_total + offset) * inner;
                data[dst_start..dst_start + s_axis * inner].copy_from_slice(src);
            }
            offset += s_axis;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(&shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice(&mut self, x: Value, axis: usize, start: usize, len: usize) -> Value {
        let xs = self.shape(x).to_vec();
        assert!(axis < xs.len());
        assert!(start + len <= xs[axis], "slice out of range");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut shape = xs.clone();
        shape[axis] = len;
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * len * inner];
        for ou in 0..outer {
            let src_start = (ou * xs[axis] + start) * inner;
            let dst_start = ou * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&xv[src_start..src_start + len * inner]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&shape, data),
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Value {
        let t = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Value, perm: &[usize]) -> Value {
        let xs = self.shape(x).to_vec();
        assert_eq!(perm.len(), xs.len());
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let xv = self.value(x).data();
        let data = permute_data(xv, &xs, perm);
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&out_shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        )
    }

    pub fn select_row(&mut self, table: Value, row: usize) -> Value {
        let ts = self.shape(table).to_vec();
        assert_eq!(ts.len(), 2, "select_row table must be [V,C]");
        assert!(row < ts[0]);
        let c = ts[1];
        let data = self.value(table).data()[row * c..(row + 1) * c].to_vec();
        let ng = self.ng(table);
        self.push(Tensor::from_vec(&[c], data), Op::SelectRow { table, row }, ng)
    }

    pub fn normalize_last(&mut self, x: Value, eps: f64) -> Value {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(c) {
            let r = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            data.extend(row.iter().map(|&v| v / r));
        }
        let t = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        self.push(t, Op::NormalizeLast { x, eps }, ng)
    }

    /// Rotary transform of `x` [B,T,D] with tables [T, D/2].
    pub fn rope(&mut self, x: Value, cos: &Tensor, sin: &Tensor) -> Value {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "rope input must be [B,T,D]");
        let (bs, t, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(d % 2, 0);
        assert_eq!(cos.shape(), &[t, d / 2]);
        assert_eq!(sin.shape(), &[t, d / 2]);
        let data = rope_apply(self.value(x).data(), cos.data(), sin.data(), bs, t, d, false);
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&xs, data),
            Op::Rope {
                x,
                cos: cos.clone(),
                sin: sin.clone(),
            },
            ng,
        )
    }

    /// Broadcast-add a [C] vector over all rows of x viewed as [rows, C].
    pub fn add_row_broadcast(&mut self, x: Value, v: Value) -> Value {
        let c = self.value(x).last_dim();
        assert_eq!(self.value(v).numel(), c, "broadcast vector length mismatch");
        let vv = self.value(v).data().to_vec();
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(c) {
            for (i, &val) in row.iter().enumerate() {
                data.push(val + vv[i]);
            }
        }
        let t = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::AddRowBroadcast { x, v }, ng)
    }

    /// Reverse sweep from `loss` (any shape; seeded with ones).
    pub fn backward(&self, loss: Value) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].clone().unwrap();
            self.backprop_node(id, &g, &mut grads);
        }
        Grads { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        let acc = |grads: &mut Vec<Option<Tensor>>, v: Value, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Const | Op::Param { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = zip_map(g, self.value(*b), |gv, bv| gv * bv);
                let db = zip_map(g, self.value(*a), |gv, av| gv * av);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a, _) => acc(grads, *a, g.clone()),
            Op::AffineChan { x, scale, .. } => {
                let c = scale.len();
                let mut data = Vec::with_capacity(g.numel());
                for row in g.data().chunks_exact(c) {
                    for (i, &gv) in row.iter().enumerate() {
                        data.push(gv * scale[i]);
                    }
                }
                acc(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let in_dim = xv.last_dim();
                let out_dim = wv.shape()[0];
                let rows = xv.numel() / in_dim;
                // dx = g × w  ([rows,out] × [out,in])
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; rows * in_dim];
                    matmul_acc(g.data(), wv.data(), &mut dx, rows, out_dim, in_dim);
                    acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                // dw = gᵀ × x  ([out,rows] × [rows,in])
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    matmul_at_acc(g.data(), xv.data(), &mut dw, out_dim, rows, in_dim);
                    acc(grads, *w, Tensor::from_vec(&[out_dim, in_dim], dw));
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].needs_grad {
                        let mut db = vec![0.0; out_dim];
                        for row in g.data().chunks_exact(out_dim) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        acc(grads, *bv, Tensor::from_vec(&[out_dim], db));
                    }
                }
            }
            Op::Bmm { a, b } => {
                let ash = self.shape(*a).to_vec();
                let bsh = self.shape(*b).to_vec();
                let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        // da = g × bᵀ
                        matmul_bt_acc(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(grads, *a, Tensor::from_vec(&ash, da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        // db = aᵀ × g
                        matmul_at_acc(
                            &av[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    acc(grads, *b, Tensor::from_vec(&bsh, db));
                }
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut data = Vec::with_capacity(y.numel());
                for (yrow, grow) in y.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    data.extend(yrow.iter().zip(grow).map(|(yv, gv)| yv * (gv - dot)));
                }
                acc(grads, *x, Tensor::from_vec(y.shape(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let gv = self.value(*gamma).data();
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (xrow, grow) in xv.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let s = (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) / s).collect();
                    let gg: Vec<f64> = grow.iter().zip(gv).map(|(gr, ga)| gr * ga).collect();
                    let mean_gg = gg.iter().sum::<f64>() / c as f64;
                    let mean_ggx = gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for i in 0..c {
                        dx.push((gg[i] - mean_gg - xhat[i] * mean_ggx) / s);
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                acc(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                acc(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * gelu_grad(v))
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
                    .collect();
                acc(grads, *x, Tensor::from_vec(y.shape(), data));
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * (1.0 - yv * yv))
                    .collect();
                acc(grads, *x, Tensor::from_vec(y.shape(), data));
            }
            Op::Exp(x) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * yv)
                    .collect();
                acc(grads, *x, Tensor::from_vec(y.shape(), data));
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let gs = g.data()[0] / xv.numel() as f64;
                acc(grads, *x, Tensor::full(xv.shape(), gs));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                acc(grads, *x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (f, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                let ck = c * kh * kw;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_dx = self.nodes[x.0].needs_grad;
                let need_dw = self.nodes[w.0].needs_grad;
                let mut dx = vec![0.0; if need_dx { f * c * h * wd } else { 0 }];
                let mut dw = vec![0.0; if need_dw { o * ck } else { 0 }];
                let mut col = vec![0.0; ck * oh * ow];
                let mut dcol = vec![0.0; ck * oh * ow];
                for fi in 0..f {
                    let gf = &g.data()[fi * o * oh * ow..(fi + 1) * o * oh * ow];
                    if need_dw {
                        im2col(
                            &xv[fi * c * h * wd..(fi + 1) * c * h * wd],
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            &mut col,
                        );
                        // dw += g × colᵀ
                        matmul_bt_acc(gf, &col, &mut dw, o, oh * ow, ck);
                    }
                    if need_dx {
                        dcol.fill(0.0);
                        // dcol = wᵀ × g
                        matmul_at_acc(wv, gf, &mut dcol, ck, o, oh * ow);
                        col2im_acc(
                            &dcol,
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            &mut dx[fi * c * h * wd..(fi + 1) * c * h * wd],
                        );
                    }
                }
                if need_dx {
                    acc(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if need_dw {
                    acc(grads, *w, Tensor::from_vec(&ws, dw));
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].needs_grad {
                        let mut db = vec![0.0; o];
                        for frame in g.data().chunks_exact(o * oh * ow) {
                            for (oc, plane) in frame.chunks_exact(oh * ow).enumerate() {
                                db[oc] += plane.iter().sum::<f64>();
                            }
                        }
                        acc(grads, *bv, Tensor::from_vec(&[o], db));
                    }
                }
            }
            Op::UpBilinear2x(x) => {
                let xs = self.shape(*x).to_vec();
                let (f, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h * 2, w * 2);
                let wy = bilinear_weights(h, oh);
                let wx = bilinear_weights(w, ow);
                let mut dx = vec![0.0; f * c * h * w];
                for plane in 0..f * c {
                    let gsrc = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, fy) = wy[oy];
                        for ox in 0..ow {
                            let (x0, x1, fx) = wx[ox];
                            let gv = gsrc[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::ResizeNearest { x, oh, ow } => {
                let xs = self.shape(*x).to_vec();
                let (f, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let ys = nearest_exact_indices(h, *oh);
                let xsrc = nearest_exact_indices(w, *ow);
                let mut dx = vec![0.0; f * c * h * w];
                for plane in 0..f * c {
                    let gsrc = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..*oh {
                        for ox in 0..*ow {
                            dst[ys[oy] * w + xsrc[ox]] += gsrc[oy * ow + ox];
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let s_axis = self.shape(p)[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![0.0; outer * s_axis * inner];
                        for ou in 0..outer {
                            let src_start = (ou * total_axis + offset) * inner;
                            dp[ou * s_axis * inner..(ou + 1) * s_axis * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + s_axis * inner]);
                        }
                        acc(grads, p, Tensor::from_vec(self.shape(p), dp));
                    }
                    offset += s_axis;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for ou in 0..outer {
                    let dst_start = (ou * xs[*axis] + start) * inner;
                    let src_start = ou * len * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g.data()[src_start..src_start + len * inner]);
                }
                acc(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                acc(grads, *x, g.clone().reshaped(&xs));
            }
            Op::Permute { x, perm } => {
                let inv = inverse_perm(perm);
                let gshape = node.value.shape().to_vec();
                let data = permute_data(g.data(), &gshape, &inv);
                acc(grads, *x, Tensor::from_vec(self.shape(*x), data));
            }
            Op::SelectRow { table, row } => {
                let ts = self.shape(*table).to_vec();
                let c = ts[1];
                let mut dt = vec![0.0; ts[0] * c];
                dt[row * c..(row + 1) * c].copy_from_slice(g.data());
                acc(grads, *table, Tensor::from_vec(&ts, dt));
            }
            Op::NormalizeLast { x, eps } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let mut data = Vec::with_capacity(xv.numel());
                for (xrow, grow) in xv.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                    let r = (xrow.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                    let y: Vec<f64> = xrow.iter().map(|&v| v / r).collect();
                    let dot: f64 = y.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for i in 0..c {
                        data.push((grow[i] - y[i] * dot) / r);
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Rope { x, cos, sin } => {
                let xs = self.shape(*x).to_vec();
                let (bs, t, d) = (xs[0], xs[1], xs[2]);
                let data = rope_apply(g.data(), cos.data(), sin.data(), bs, t, d, true);
                acc(grads, *x, Tensor::from_vec(&xs, data));
            }
            Op::AddRowBroadcast { x, v } => {
                acc(grads, *x, g.clone());
                if self.nodes[v.0].needs_grad {
                    let c = self.value(*v).numel();
                    let mut dv = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (d, &gv) in dv.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    acc(grads, *v, Tensor::from_vec(&[c], dv));
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// (y0, y1, frac) source rows for 2x bilinear upsampling, align_corners=false.
fn bilinear_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let clamped = src.max(0.0);
            let y0 = (clamped.floor() as usize).min(input - 1);
            let y1 = (y0 + 1).min(input - 1);
            let f = (clamped - y0 as f64).clamp(0.0, 1.0);
            (y0, y1, f)
        })
        .collect()
}

fn nearest_exact_indices(input: usize, output: usize) -> Vec<usize> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(input - 1))
        .collect()
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src_off = 0;
        for d in 0..rank {
            src_off += idx[d] * in_strides[perm[d]];
        }
        *slot = src[src_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn rope_apply(
    x: &[f64],
    cos: &[f64],
    sin: &[f64],
    bs: usize,
    t: usize,
    d: usize,
    invert: bool,
) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; x.len()];
    for b in 0..bs {
        for ti in 0..t {
            let base = (b * t + ti) * d;
            let tab = ti * half;
            for i in 0..half {
                let (c, mut s) = (cos[tab + i], sin[tab + i]);
                if invert {
                    s = -s;
                }
                let x0 = x[base + 2 * i];
                let x1 = x[base + 2 * i + 1];
                out[base + 2 * i] = x0 * c - x1 * s;
                out[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Finite-difference check of d(scalar loss)/d(leaf) for a tape builder.
    fn fd_check(build: impl Fn(&mut Tape, Value) -> Value, input: Tensor, tol: f64) {
        let mut tape = Tape::new();
        let leaf = tape.param_leaf(0, input.clone());
        let loss = build(&mut tape, leaf);
        assert_eq!(tape.value(loss).numel(), 1, "loss must be scalar");
        let grads = tape.backward(loss);
        let analytic = grads.of(leaf).expect("missing gradient").clone();

        let h = 1e-5;
        for i in 0..input.numel().min(24) {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut tape = Tape::new();
                let leaf = tape.param_leaf(0, t);
                let loss = build(&mut tape, leaf);
                tape.value(loss).data()[0]
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!(
                (fd - a).abs() / denom < tol,
                "index {}: fd {} vs analytic {}",
                i,
                fd,
                a
            );
        }
    }

    #[test]
    fn pointwise_op_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x = Tensor::randn(&mut rng, &[3, 4]);
        for op in ["gelu", "relu", "sigmoid", "tanh", "exp", "abs", "softmax", "norm"] {
            let opname = op.to_string();
            fd_check(
                move |t, v| {
                    let y = match opname.as_str() {
                        "gelu" => t.gelu(v),
                        "relu" => t.relu(v),
                        "sigmoid" => t.sigmoid(v),
                        "tanh" => t.tanh(v),
                        "exp" => t.exp(v),
                        "abs" => t.abs(v),
                        "softmax" => t.softmax_last(v),
                        _ => t.normalize_last(v, 1e-12),
                    };
                    let sq = t.mul(y, y);
                    t.mean_all(sq)
                },
                x.clone(),
                2e-4,
            );
        }
    }

    #[test]
    fn linear_and_layernorm_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = Tensor::randn(&mut rng, &[5, 6]);
        let w = Tensor::randn(&mut rng, &[4, 6]);
        let b = Tensor::randn(&mut rng, &[4]);
        let gamma = Tensor::randn(&mut rng, &[6]).map(|v| 1.0 + 0.1 * v);
        let beta = Tensor::randn(&mut rng, &[6]);

        let (wc, bc) = (w.clone(), b.clone());
        fd_check(
            move |t, v| {
                let w = t.param_leaf(1, wc.clone());
                let b = t.param_leaf(2, bc.clone());
                let y = t.linear(v, w, Some(b));
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );
        let (gc, bc2) = (gamma.clone(), beta.clone());
        fd_check(
            move |t, v| {
                let g = t.param_leaf(1, gc.clone());
                let b = t.param_leaf(2, bc2.clone());
                let y = t.layer_norm(v, g, b, 1e-5);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );

        // weight gradients through a separate leaf
        let xc = x.clone();
        fd_check(
            move |t, wleaf| {
                let x = t.constant(xc.clone());
                let y = t.linear(x, wleaf, None);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            w,
            1e-4,
        );
    }

    #[test]
    fn conv_upsample_resize_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x = Tensor::randn(&mut rng, &[2, 3, 5, 5]);
        let w = Tensor::randn(&mut rng, &[4, 3, 3, 3]);
        let b = Tensor::randn(&mut rng, &[4]);

        let (wc, bc) = (w.clone(), b.clone());
        fd_check(
            move |t, v| {
                let w = t.param_leaf(1, wc.clone());
                let b = t.param_leaf(2, bc.clone());
                let y = t.conv2d(v, w, Some(b), 2, 1);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );
        let xc = x.clone();
        fd_check(
            move |t, wleaf| {
                let x = t.constant(xc.clone());
                let y = t.conv2d(x, wleaf, None, 1, 1);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            w,
            1e-4,
        );
        fd_check(
            move |t, v| {
                let y = t.upsample_bilinear_2x(v);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );
        fd_check(
            move |t, v| {
                let y = t.resize_nearest_exact(v, 7, 4);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            x,
            1e-4,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x = Tensor::randn(&mut rng, &[2, 3, 4]);
        fd_check(
            move |t, v| {
                let a = t.slice(v, 1, 0, 2);
                let b = t.slice(v, 1, 2, 1);
                let joined = t.concat(&[b, a], 1);
                let p = t.permute(joined, &[2, 0, 1]);
                let r = t.reshape(p, &[4, 6]);
                let sq = t.mul(r, r);
                t.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );
        let x2 = Tensor::randn(&mut rng, &[3, 4]);
        fd_check(
            move |t, v| {
                let row = t.select_row(v, 1);
                let sq = t.mul(row, row);
                t.sum_all(sq)
            },
            x2,
            1e-4,
        );
    }

    #[test]
    fn attention_shaped_composite_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let x = Tensor::randn(&mut rng, &[2, 5, 6]); // [B,T,D]
        let half = 3;
        let cos = Tensor::from_vec(
            &[5, half],
            (0..5 * half)
                .map(|i| ((i as f64) * 0.3).cos())
                .collect::<Vec<_>>(),
        );
        let sin = Tensor::from_vec(
            &[5, half],
            (0..5 * half)
                .map(|i| ((i as f64) * 0.3).sin())
                .collect::<Vec<_>>(),
        );
        fd_check(
            move |t, v| {
                let q = t.rope(v, &cos, &sin);
                let kt = t.permute(v, &[0, 2, 1]);
                let scores = t.bmm(q, kt);
                let attn = t.softmax_last(scores);
                let out = t.bmm(attn, v);
                let sq = t.mul(out, out);
                t.mean_all(sq)
            },
            x,
            2e-4,
        );
    }

    #[test]
    fn broadcast_and_affine_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let x = Tensor::randn(&mut rng, &[4, 3]);
        let v = Tensor::randn(&mut rng, &[3]);
        let vc = v.clone();
        fd_check(
            move |t, leaf| {
                let v = t.param_leaf(1, vc.clone());
                let y = t.add_row_broadcast(leaf, v);
                let z = t.affine_chan(y, &[2.0, -1.0, 0.5], &[0.1, 0.0, -0.2]);
                let sq = t.mul(z, z);
                t.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );
        let xc = x.clone();
        fd_check(
            move |t, vleaf| {
                let x = t.constant(xc.clone());
                let y = t.add_row_broadcast(x, vleaf);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            v,
            1e-4,
        );
    }

    #[test]
    fn needs_grad_does_not_leak_into_consts() {
        let mut tape = Tape::new();
        let frozen = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let live = tape.param_leaf(0, Tensor::from_vec(&[2, 2], vec![0.5; 4]));
        let y = tape.mul(frozen, live);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        assert!(grads.of(frozen).is_none());
        assert!(grads.of(live).is_some());
    }
}
