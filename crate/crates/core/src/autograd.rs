//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse. Only nodes that depend on a trainable leaf receive
//! gradients, so frozen sub-networks cost a forward pass and nothing more.

use crate::image_io::bilinear_taps;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    cin: usize,
    out_h: usize,
    out_w: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

#[derive(Debug, Clone)]
struct ResizePlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddTiled(Var, Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        dims: (usize, usize, usize, usize),
    },
    Softmax(Var),
    RowNormalize(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    ConcatLast(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    Upsample2x(Var),
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SpatialMean(Var),
    SpatialStd {
        x: Var,
        mean: Vec<S>,
    },
    Channel {
        kind: ChannelOp,
        x: Var,
        c: Var,
    },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
    /// Scalar-valued op whose input gradients were computed during the forward pass.
    Precomputed(Vec<(Var, Tensor<S>)>),
}

impl<S: Scalar> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddTiled(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::RowNormalize(x)
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Upsample2x(x)
            | Op::SpatialMean(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::StraightThrough(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Permute { x, .. } | Op::Resize { x, .. } | Op::SpatialStd { x, .. } => vec![*x],
            Op::ConcatLast(xs) => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Embedding { table, .. } => vec![*table],
            Op::Channel { x, c, .. } => vec![*x, *c],
            Op::Precomputed(items) => items.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A tape of tensor operations.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit(GELU_C);
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let y = half * x * (S::one() + th);
    let dinner = c * (S::one() + S::lit(3.0) * k * x * x);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * dinner;
    (y, dy)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    (out_shape, out)
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let patch = g.patch();
    let mut cols = vec![S::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.cin;
                        let d = (ky * g.kernel + kx) * g.cin;
                        dst[d..d + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, gx: &mut [S]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.cin;
                        let s = (ky * g.kernel + kx) * g.cin;
                        for c in 0..g.cin {
                            gx[dst + c] += src[s + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn grad_buf<'a, S: Scalar>(
    grads: &'a mut [Option<Tensor<S>>],
    v: Var,
    shape: &[usize],
) -> &'a mut Tensor<S> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    /// `x + y` where `y` is repeated over the leading elements of `x`.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Var {
        let (vx, vy) = (self.value(x), self.value(y));
        let m = vy.len();
        assert!(m > 0 && vx.len() % m == 0, "add_tiled: {:?} vs {:?}", vx.shape(), vy.shape());
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vy.data()[i % m])
            .collect();
        let t = Tensor::new(vx.shape(), data);
        self.push(t, Op::AddTiled(x, y))
    }

    /// `x[.., k] · w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.rank(), 2, "matmul weight must be 2-d");
        let k = vx.last_dim();
        assert_eq!(vw.shape()[0], k, "matmul inner dim {:?} vs {:?}", vx.shape(), vw.shape());
        let n = vw.shape()[1];
        let m = vx.len() / k;
        let mut out = vec![S::zero(); m * n];
        gemm(m, k, n, vx.data(), false, vw.data(), false, &mut out, false);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(&shape, out), Op::MatMul(x, w))
    }

    /// Batched `op(a) · op(b)` over rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.rank() == 3 && vb.rank() == 3, "bmm needs rank-3 tensors");
        let batch = va.shape()[0];
        assert_eq!(vb.shape()[0], batch);
        let (m, k) = if trans_a {
            (va.shape()[2], va.shape()[1])
        } else {
            (va.shape()[1], va.shape()[2])
        };
        let (k2, n) = if trans_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                trans_a,
                &vb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new(&[batch, m, n], out);
        self.push(
            t,
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
                dims: (batch, m, k, n),
            },
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut s = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(vx.shape(), out);
        self.push(t, Op::Softmax(x))
    }

    /// Divides each last-axis row by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            let s: S = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(vx.shape(), out);
        self.push(t, Op::RowNormalize(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert!(vg.len() == d && vb.len() == d, "layer_norm affine size");
        let rows = vx.len() / d;
        let mut xhat = vec![S::zero(); vx.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); vx.len()];
        let dn = S::lit(d as f64);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + S::lit(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape(), out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(perm.len(), vx.rank(), "permute rank");
        let (shape, data) = permute_data(vx.data(), vx.shape(), perm);
        let t = Tensor::new(&shape, data);
        self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let lead: Vec<usize> = {
            let s = self.shape(xs[0]);
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(&shape, out), Op::ConcatLast(xs.to_vec()))
    }

    /// NHWC convolution; `w` has shape `[k, k, cin, cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.rank(), 4, "conv2d input must be NHWC");
        assert_eq!(vw.rank(), 4, "conv2d weight must be [k,k,cin,cout]");
        let (batch, in_h, in_w, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let kernel = vw.shape()[0];
        assert_eq!(vw.shape()[1], kernel);
        assert_eq!(vw.shape()[2], cin, "conv2d channel mismatch");
        let cout = vw.shape()[3];
        assert!(in_h + 2 * pad >= kernel && in_w + 2 * pad >= kernel, "conv2d input too small");
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            cin,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
            cout,
            kernel,
            stride,
            pad,
        };
        let cols = im2col(vx.data(), &geom);
        let rows = geom.rows();
        let mut out = vec![S::zero(); rows * cout];
        gemm(rows, geom.patch(), cout, &cols, false, vw.data(), false, &mut out, false);
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.len(), cout, "conv2d bias size");
            for row in out.chunks_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(&[batch, geom.out_h, geom.out_w, cout], out);
        self.push(t, Op::Conv2d { x, w, b, geom, cols })
    }

    /// Nearest-neighbour 2x spatial upsampling (NHWC).
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let mut out = vec![S::zero(); b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&vx.data()[src..src + c]);
                }
            }
        }
        let t = Tensor::new(&[b, 2 * h, 2 * w, c], out);
        self.push(t, Op::Upsample2x(x))
    }

    /// Bilinear resize of an NHWC tensor (half-pixel centres).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let (b, in_h, in_w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        if in_h == out_h && in_w == out_w {
            let t = vx.clone();
            return self.push(t, Op::Reshape(x));
        }
        let plan = ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            ys: bilinear_taps(in_h, out_h),
            xs: bilinear_taps(in_w, out_w),
        };
        let mut out = vec![S::zero(); b * out_h * out_w * c];
        for bi in 0..b {
            for (oy, &(y0, y1, fy)) in plan.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in plan.xs.iter().enumerate() {
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    let dst = ((bi * out_h + oy) * out_w + ox) * c;
                    for (yy, xx, wgt) in taps {
                        let wgt = S::lit(wgt);
                        let src = ((bi * in_h + yy) * in_w + xx) * c;
                        for ch in 0..c {
                            out[dst + ch] += wgt * vx.data()[src + ch];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, out_h, out_w, c], out);
        self.push(t, Op::Resize { x, plan })
    }

    /// Rows of `table` (`[n, d]`) selected by `ids`, shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        assert_eq!(vt.rank(), 2, "embedding table must be 2-d");
        let (n, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < n, "embedding id {i} out of range {n}");
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Per-sample, per-channel spatial mean: `[B,H,W,C] -> [B,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, hw, c) = nhwc_dims(vx.shape());
        let mut out = vec![S::zero(); b * c];
        for bi in 0..b {
            for p in 0..hw {
                for ch in 0..c {
                    out[bi * c + ch] += vx.data()[(bi * hw + p) * c + ch];
                }
            }
        }
        let n = S::lit(hw as f64);
        for v in out.iter_mut() {
            *v /= n;
        }
        let t = Tensor::new(&[b, c], out);
        self.push(t, Op::SpatialMean(x))
    }

    /// Per-sample, per-channel `sqrt(population variance + eps)`.
    pub fn spatial_std(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (b, hw, c) = nhwc_dims(vx.shape());
        let n = S::lit(hw as f64);
        let mut mean = vec![S::zero(); b * c];
        for bi in 0..b {
            for p in 0..hw {
                for ch in 0..c {
                    mean[bi * c + ch] += vx.data()[(bi * hw + p) * c + ch];
                }
            }
        }
        for v in mean.iter_mut() {
            *v /= n;
        }
        let mut var = vec![S::zero(); b * c];
        for bi in 0..b {
            for p in 0..hw {
                for ch in 0..c {
                    let dlt = vx.data()[(bi * hw + p) * c + ch] - mean[bi * c + ch];
                    var[bi * c + ch] += dlt * dlt;
                }
            }
        }
        let out: Vec<S> = var.iter().map(|&v| (v / n + S::lit(eps)).sqrt()).collect();
        let t = Tensor::new(&[b, c], out);
        self.push(t, Op::SpatialStd { x, mean })
    }

    /// Elementwise `x ∘ c` with `c: [B,C]` broadcast over the spatial grid of `x: [B,H,W,C]`.
    pub fn channel_op(&mut self, kind: ChannelOp, x: Var, c: Var) -> Var {
        let (vx, vc) = (self.value(x), self.value(c));
        let (b, hw, ch) = nhwc_dims(vx.shape());
        assert_eq!(vc.shape(), &[b, ch], "channel_op stats shape");
        let mut out = vx.data().to_vec();
        for bi in 0..b {
            for p in 0..hw {
                for k in 0..ch {
                    let o = &mut out[(bi * hw + p) * ch + k];
                    let s = vc.data()[bi * ch + k];
                    *o = match kind {
                        ChannelOp::Add => *o + s,
                        ChannelOp::Sub => *o - s,
                        ChannelOp::Mul => *o * s,
                        ChannelOp::Div => *o / s,
                    };
                }
            }
        }
        let t = Tensor::new(vx.shape(), out);
        self.push(t, Op::Channel { kind, x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s: S = vx.data().iter().copied().sum::<S>() / S::lit(vx.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Forward value `replacement`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<S>) -> Var {
        assert_eq!(self.shape(x), replacement.shape(), "straight_through shape");
        self.push(replacement, Op::StraightThrough(x))
    }

    /// Scalar node with gradients supplied by the caller.
    pub fn precomputed(&mut self, value: S, grads: Vec<(Var, Tensor<S>)>) -> Var {
        for (v, g) in &grads {
            assert_eq!(self.shape(*v), g.shape(), "precomputed gradient shape");
        }
        self.push(Tensor::scalar(value), Op::Precomputed(grads))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l1_loss shape mismatch");
        let n = S::lit(va.len() as f64);
        let mut total = S::zero();
        let mut ga = Vec::with_capacity(va.len());
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let d = x - y;
            total += d.abs();
            let s = if d > S::zero() {
                S::one()
            } else if d < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            ga.push(s / n);
        }
        let shape = va.shape().to_vec();
        let gb: Vec<S> = ga.iter().map(|&g| -g).collect();
        self.precomputed(
            total / n,
            vec![(a, Tensor::new(&shape, ga)), (b, Tensor::new(&shape, gb))],
        )
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse_loss shape mismatch");
        let n = S::lit(va.len() as f64);
        let two = S::lit(2.0);
        let mut total = S::zero();
        let mut ga = Vec::with_capacity(va.len());
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let d = x - y;
            total += d * d;
            ga.push(two * d / n);
        }
        let shape = va.shape().to_vec();
        let gb: Vec<S> = ga.iter().map(|&g| -g).collect();
        self.precomputed(
            total / n,
            vec![(a, Tensor::new(&shape, ga)), (b, Tensor::new(&shape, gb))],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, S::one()), (*b, S::one())] {
                    if self.needs(v) {
                        let buf = grad_buf(grads, v, g.shape());
                        for (o, &x) in buf.data_mut().iter_mut().zip(gd) {
                            *o += sign * x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, S::one()), (*b, -S::one())] {
                    if self.needs(v) {
                        let buf = grad_buf(grads, v, g.shape());
                        for (o, &x) in buf.data_mut().iter_mut().zip(gd) {
                            *o += sign * x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let od = self.value(other).data().to_vec();
                        let buf = grad_buf(grads, v, g.shape());
                        for ((o, &x), y) in buf.data_mut().iter_mut().zip(gd).zip(od) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, g.shape());
                    for (o, &x) in buf.data_mut().iter_mut().zip(gd) {
                        *o += *c * x;
                    }
                }
            }
            Op::AddTiled(x, y) => {
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, g.shape());
                    for (o, &v) in buf.data_mut().iter_mut().zip(gd) {
                        *o += v;
                    }
                }
                if self.needs(*y) {
                    let ys = self.shape(*y).to_vec();
                    let m = ys.iter().product::<usize>();
                    let buf = grad_buf(grads, *y, &ys);
                    let bd = buf.data_mut();
                    for (j, &v) in gd.iter().enumerate() {
                        bd[j % m] += v;
                    }
                }
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let k = vx.last_dim();
                let n = vw.shape()[1];
                let m = vx.len() / k;
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, vx.shape());
                    gemm(m, n, k, gd, false, vw.data(), true, buf.data_mut(), true);
                }
                if self.needs(*w) {
                    let buf = grad_buf(grads, *w, vw.shape());
                    gemm(k, m, n, vx.data(), true, gd, false, buf.data_mut(), true);
                }
            }
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
                dims: (batch, m, k, n),
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, va.shape());
                    let bd = buf.data_mut();
                    for i in 0..batch {
                        let gc = &gd[i * m * n..(i + 1) * m * n];
                        let bm = &vb.data()[i * k * n..(i + 1) * k * n];
                        let out = &mut bd[i * m * k..(i + 1) * m * k];
                        if *trans_a {
                            gemm(k, n, m, bm, *trans_b, gc, true, out, true);
                        } else {
                            gemm(m, n, k, gc, false, bm, !*trans_b, out, true);
                        }
                    }
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, vb.shape());
                    let bd = buf.data_mut();
                    for i in 0..batch {
                        let gc = &gd[i * m * n..(i + 1) * m * n];
                        let am = &va.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut bd[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gc, true, am, *trans_a, out, true);
                        } else {
                            gemm(k, m, n, am, !*trans_a, gc, false, out, true);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let buf = grad_buf(grads, *x, g.shape());
                    for ((gr, yr), o) in gd.chunks(d).zip(y.chunks(d)).zip(buf.data_mut().chunks_mut(d)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::RowNormalize(x) => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let buf = grad_buf(grads, *x, g.shape());
                    for (r, o) in buf.data_mut().chunks_mut(d).enumerate() {
                        let s: S = vx.data()[r * d..(r + 1) * d].iter().copied().sum();
                        let gr = &gd[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            o[j] += (gr[j] - dot) / s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let rows = node.value.len() / d;
                let vg = self.value(*gamma).data().to_vec();
                if self.needs(*gamma) {
                    let buf = grad_buf(grads, *gamma, &[d]);
                    let bd = buf.data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            bd[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let buf = grad_buf(grads, *beta, &[d]);
                    let bd = buf.data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            bd[j] += gd[r * d + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let dn = S::lit(d as f64);
                    let buf = grad_buf(grads, *x, g.shape());
                    let bd = buf.data_mut();
                    let mut gh = vec![S::zero(); d];
                    for r in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            gh[j] = gd[r * d + j] * vg[j];
                            m1 += gh[j];
                            m2 += gh[j] * xhat[r * d + j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            bd[r * d + j] += rstd[r] * (gh[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) | Op::Silu(x) | Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let vx = self.value(*x).data();
                    let y = node.value.data();
                    let kind = match &node.op {
                        Op::Gelu(_) => 0,
                        Op::Silu(_) => 1,
                        _ => 2,
                    };
                    let buf = grad_buf(grads, *x, g.shape());
                    for (j, o) in buf.data_mut().iter_mut().enumerate() {
                        let dy = match kind {
                            0 => gelu_parts(vx[j]).1,
                            1 => {
                                let s = sigmoid(vx[j]);
                                s * (S::one() + vx[j] * (S::one() - s))
                            }
                            _ => y[j] * (S::one() - y[j]),
                        };
                        *o += gd[j] * dy;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let buf = grad_buf(grads, *x, &xs);
                    for (o, &v) in buf.data_mut().iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, back) = permute_data(gd, g.shape(), &inv);
                    let xs = self.shape(*x).to_vec();
                    let buf = grad_buf(grads, *x, &xs);
                    for (o, v) in buf.data_mut().iter_mut().zip(back) {
                        *o += v;
                    }
                }
            }
            Op::ConcatLast(xs) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total;
                let mut off = 0;
                for &v in xs {
                    let vs = self.shape(v).to_vec();
                    let w = *vs.last().unwrap();
                    if self.needs(v) {
                        let buf = grad_buf(grads, v, &vs);
                        let bd = buf.data_mut();
                        for r in 0..rows {
                            for j in 0..w {
                                bd[r * w + j] += gd[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.rows();
                let patch = geom.patch();
                if self.needs(*w) {
                    let ws = self.shape(*w).to_vec();
                    let buf = grad_buf(grads, *w, &ws);
                    gemm(patch, rows, geom.cout, cols, true, gd, false, buf.data_mut(), true);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let buf = grad_buf(grads, *b, &[geom.cout]);
                        let bd = buf.data_mut();
                        for row in gd.chunks(geom.cout) {
                            for (o, &v) in bd.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gcols = vec![S::zero(); rows * patch];
                    gemm(rows, geom.cout, patch, gd, false, self.value(*w).data(), true, &mut gcols, false);
                    let xs = self.shape(*x).to_vec();
                    let buf = grad_buf(grads, *x, &xs);
                    col2im(&gcols, geom, buf.data_mut());
                }
            }
            Op::Upsample2x(x) => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let buf = grad_buf(grads, *x, &xs);
                    let bd = buf.data_mut();
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                                let src = ((bi * 2 * h + y) * 2 * w + xx) * c;
                                for ch in 0..c {
                                    bd[dst + ch] += gd[src + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Resize { x, plan } => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (b, c) = (xs[0], xs[3]);
                    let buf = grad_buf(grads, *x, &xs);
                    let bd = buf.data_mut();
                    for bi in 0..b {
                        for (oy, &(y0, y1, fy)) in plan.ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in plan.xs.iter().enumerate() {
                                let taps = [
                                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                    (y0, x1, (1.0 - fy) * fx),
                                    (y1, x0, fy * (1.0 - fx)),
                                    (y1, x1, fy * fx),
                                ];
                                let src = ((bi * plan.out_h + oy) * plan.out_w + ox) * c;
                                for (yy, xx, wgt) in taps {
                                    let wgt = S::lit(wgt);
                                    let dst = ((bi * plan.in_h + yy) * plan.in_w + xx) * c;
                                    for ch in 0..c {
                                        bd[dst + ch] += wgt * gd[src + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let ts = self.shape(*table).to_vec();
                    let d = ts[1];
                    let buf = grad_buf(grads, *table, &ts);
                    let bd = buf.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            bd[id * d + j] += gd[r * d + j];
                        }
                    }
                }
            }
            Op::SpatialMean(x) => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (b, hw, c) = nhwc_dims(&xs);
                    let n = S::lit(hw as f64);
                    let buf = grad_buf(grads, *x, &xs);
                    let bd = buf.data_mut();
                    for bi in 0..b {
                        for p in 0..hw {
                            for ch in 0..c {
                                bd[(bi * hw + p) * c + ch] += gd[bi * c + ch] / n;
                            }
                        }
                    }
                }
            }
            Op::SpatialStd { x, mean } => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let xs = vx.shape().to_vec();
                    let (b, hw, c) = nhwc_dims(&xs);
                    let n = S::lit(hw as f64);
                    let sd = node.value.data();
                    let xd = vx.data().to_vec();
                    let buf = grad_buf(grads, *x, &xs);
                    let bd = buf.data_mut();
                    for bi in 0..b {
                        for p in 0..hw {
                            for ch in 0..c {
                                let k = bi * c + ch;
                                let j = (bi * hw + p) * c + ch;
                                bd[j] += gd[k] * (xd[j] - mean[k]) / (n * sd[k]);
                            }
                        }
                    }
                }
            }
            Op::Channel { kind, x, c } => {
                let vx = self.value(*x);
                let vc = self.value(*c);
                let xs = vx.shape().to_vec();
                let (b, hw, ch) = nhwc_dims(&xs);
                if self.needs(*x) {
                    let cd = vc.data().to_vec();
                    let buf = grad_buf(grads, *x, &xs);
                    let bd = buf.data_mut();
                    for bi in 0..b {
                        for p in 0..hw {
                            for k in 0..ch {
                                let j = (bi * hw + p) * ch + k;
                                let s = cd[bi * ch + k];
                                bd[j] += match kind {
                                    ChannelOp::Add | ChannelOp::Sub => gd[j],
                                    ChannelOp::Mul => gd[j] * s,
                                    ChannelOp::Div => gd[j] / s,
                                };
                            }
                        }
                    }
                }
                if self.needs(*c) {
                    let xd = vx.data().to_vec();
                    let cd = vc.data().to_vec();
                    let buf = grad_buf(grads, *c, &[b, ch]);
                    let bd = buf.data_mut();
                    for bi in 0..b {
                        for p in 0..hw {
                            for k in 0..ch {
                                let j = (bi * hw + p) * ch + k;
                                let s = cd[bi * ch + k];
                                bd[bi * ch + k] += match kind {
                                    ChannelOp::Add => gd[j],
                                    ChannelOp::Sub => -gd[j],
                                    ChannelOp::Mul => gd[j] * xd[j],
                                    ChannelOp::Div => -gd[j] * xd[j] / (s * s),
                                };
                            }
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let n = xs.iter().product::<usize>();
                    let scale = match &node.op {
                        Op::Mean(_) => gd[0] / S::lit(n as f64),
                        _ => gd[0],
                    };
                    let buf = grad_buf(grads, *x, &xs);
                    for o in buf.data_mut() {
                        *o += scale;
                    }
                }
            }
            Op::StraightThrough(x) => {
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, g.shape());
                    for (o, &v) in buf.data_mut().iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::Precomputed(items) => {
                let up = gd[0];
                for (v, local) in items {
                    if self.needs(*v) {
                        let buf = grad_buf(grads, *v, local.shape());
                        for (o, &l) in buf.data_mut().iter_mut().zip(local.data()) {
                            *o += up * l;
                        }
                    }
                }
            }
        }
    }
}

fn nhwc_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NHWC tensor, got {shape:?}");
    (shape[0], shape[1] * shape[2], shape[3])
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

    /// Central-difference check of `build` w.r.t. every input element.
    fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
                let an = analytic.data()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-6, "input {k} elem {j}: fd {fd} vs analytic {an}");
            }
        }
    }

    fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let shape = g.shape(x).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_tensor(&mut rng, &shape));
        let p = g.mul(x, w);
        g.sum(p)
    }

    #[test]
    fn grad_elementwise_and_tiled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        let c = rand_tensor(&mut rng, &[3]);
        check(vec![a, b, c], |g, v| {
            let s = g.sub(v[0], v[1]);
            let m = g.mul(s, v[0]);
            let t = g.add_tiled(m, v[2]);
            let u = g.scale(t, 0.7);
            let w = g.add(u, v[1]);
            weighted_sum(g, w, 9)
        });
    }

    #[test]
    fn grad_matmul_and_bmm_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        check(vec![x, w], |g, v| {
            let y = g.matmul(v[0], v[1]);
            weighted_sum(g, y, 3)
        });
        for ta in [false, true] {
            for tb in [false, true] {
                let a = rand_tensor(&mut rng, if ta { &[2, 4, 3] } else { &[2, 3, 4] });
                let b = rand_tensor(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] });
                check(vec![a, b], move |g, v| {
                    let y = g.bmm(v[0], v[1], ta, tb);
                    weighted_sum(g, y, 4)
                });
            }
        }
    }

    #[test]
    fn grad_softmax_rownorm_layernorm_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let gamma = rand_tensor(&mut rng, &[5]);
        let beta = rand_tensor(&mut rng, &[5]);
        check(vec![x.clone(), gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let y = g.gelu(y);
            let y = g.softmax(y);
            weighted_sum(g, y, 5)
        });
        let pos = x.map(|v| v.abs() + 0.5);
        check(vec![pos], |g, v| {
            let y = g.row_normalize(v[0]);
            let y = g.silu(y);
            let y = g.sigmoid(y);
            weighted_sum(g, y, 6)
        });
    }

    #[test]
    fn grad_permute_reshape_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 3, 2]);
        check(vec![a, b], |g, v| {
            let c = g.concat_last(&[v[0], v[1]]);
            let p = g.permute(c, &[2, 0, 1]);
            let r = g.reshape(p, &[6, 6]);
            weighted_sum(g, r, 7)
        });
    }

    #[test]
    fn grad_conv_upsample_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 5, 5, 2]);
        let w = rand_tensor(&mut rng, &[3, 3, 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            let y = g.upsample2x(y);
            let y = g.resize(y, 3, 5);
            weighted_sum(g, y, 8)
        });
    }

    #[test]
    fn grad_channel_stats_and_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        check(vec![x], |g, v| {
            let mu = g.spatial_mean(v[0]);
            let sd = g.spatial_std(v[0], 1e-5);
            let c = g.channel_op(ChannelOp::Sub, v[0], mu);
            let c = g.channel_op(ChannelOp::Div, c, sd);
            let c = g.channel_op(ChannelOp::Mul, c, mu);
            let c = g.channel_op(ChannelOp::Add, c, sd);
            weighted_sum(g, c, 10)
        });
    }

    #[test]
    fn grad_embedding_losses_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = rand_tensor(&mut rng, &[4, 3]);
        let target = rand_tensor(&mut rng, &[5, 3]);
        check(vec![table, target], |g, v| {
            let e = g.embedding(v[0], &[0, 2, 2, 3, 1]);
            let a = g.l1_loss(e, v[1]);
            let b = g.mse_loss(e, v[1]);
            let m = g.mean(e);
            let s = g.add(a, b);
            g.add(s, m)
        });
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]));
        let q = g.straight_through(x, Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]));
        let w = g.constant(Tensor::from_f64(&[3], &[4.0, 5.0, 6.0]));
        let p = g.mul(q, w);
        let l = g.sum(p);
        assert_eq!(g.value(l).item(), 32.0);
        let grads = g.backward(l);
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.get(q).unwrap().data(), grads.get(x).unwrap().data());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[1.0, 2.0]));
        let y = g.param(Tensor::from_f64(&[2], &[3.0, 4.0]));
        let p = g.mul(x, y);
        let l = g.sum(p);
        let grads = g.backward(l);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 2.0]);
    }
}
