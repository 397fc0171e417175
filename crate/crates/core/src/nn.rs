//! Forward and backward kernels for the layers the two models use, plus
//! momentum SGD and truncated-normal initialization.
//!
//! Layouts: conv inputs are `[C, H, W]` (H is time, W is frequency), conv
//! weights `[C_out, C_in, m, r]`, linear weights `[K, D]`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Element, Parameter, Tensor};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnError::ShapeMismatch(msg.into()))
}

fn dims3(t: &Tensor<impl Element>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [a, b, c] => Ok((a, b, c)),
        ref d => shape_err(format!("{what} must be rank 3, got {d:?}")),
    }
}

/// Geometry shared by the conv forward and backward kernels.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    m: usize,
    r: usize,
    s: usize,
    v: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(x_dims: &[usize], w_dims: &[usize], stride: (usize, usize)) -> Result<Self> {
        let [c_in, h, w] = *x_dims else {
            return shape_err(format!("conv input must be [C, H, W], got {x_dims:?}"));
        };
        let [c_out, wc, m, r] = *w_dims else {
            return shape_err(format!("conv weight must be [O, C, m, r], got {w_dims:?}"));
        };
        let (s, v) = stride;
        if wc != c_in {
            return shape_err(format!("conv weight expects {wc} input channels, input has {c_in}"));
        }
        if m == 0 || r == 0 || s == 0 || v == 0 {
            return shape_err(format!("conv kernel {m}x{r} stride {s}x{v} must be positive"));
        }
        if h < m || w < r {
            return shape_err(format!("conv kernel {m}x{r} larger than input {h}x{w}"));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            m,
            r,
            s,
            v,
            h_out: (h - m) / s + 1,
            w_out: (w - r) / v + 1,
        })
    }

    fn unit_stride(&self) -> bool {
        self.s == 1 && self.v == 1
    }

    /// Span of the flat "full-width" output buffer used on the unit-stride
    /// path: output `(i, j)` lives at `i * w + j`, and the columns
    /// `j >= w_out` in between are scratch.
    fn span(&self) -> usize {
        (self.h_out - 1) * self.w + self.w_out
    }
}

/// Valid (unpadded) 2-D convolution:
/// `y[o,i,j] = b[o] + sum_{c,a,b'} x[c, i*s+a, j*v+b'] * w[o,c,a,b']`.
///
/// Each output accumulates in a fixed order: the bias first, then the
/// kernel terms with `c`, `a`, `b'` ascending.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.dims(), w.dims(), stride)?;
    if b.dims() != [g.c_out] {
        return shape_err(format!("conv bias {:?} vs {} maps", b.dims(), g.c_out));
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = Tensor::zeros(&[g.c_out, g.h_out, g.w_out]);
    let plane = g.h_out * g.w_out;
    let kernel = g.m * g.r;

    if g.unit_stride() {
        let span = g.span();
        let mut acc = vec![T::zero(); span];
        for o in 0..g.c_out {
            acc.fill(b.data()[o]);
            for c in 0..g.c_in {
                let xc = &xd[c * g.h * g.w..(c + 1) * g.h * g.w];
                let wk = &wd[(o * g.c_in + c) * kernel..(o * g.c_in + c + 1) * kernel];
                for a in 0..g.m {
                    for bb in 0..g.r {
                        let weight = wk[a * g.r + bb];
                        let src = &xc[a * g.w + bb..a * g.w + bb + span];
                        for (y, &xv) in acc.iter_mut().zip(src) {
                            *y = *y + xv * weight;
                        }
                    }
                }
            }
            let dst = &mut out.data_mut()[o * plane..(o + 1) * plane];
            for i in 0..g.h_out {
                dst[i * g.w_out..(i + 1) * g.w_out].copy_from_slice(&acc[i * g.w..i * g.w + g.w_out]);
            }
        }
    } else {
        let od = out.data_mut();
        for o in 0..g.c_out {
            for i in 0..g.h_out {
                for j in 0..g.w_out {
                    let mut acc = b.data()[o];
                    for c in 0..g.c_in {
                        for a in 0..g.m {
                            for bb in 0..g.r {
                                let xv = xd[(c * g.h + i * g.s + a) * g.w + j * g.v + bb];
                                acc = acc + xv * wd[((o * g.c_in + c) * g.m + a) * g.r + bb];
                            }
                        }
                    }
                    od[o * plane + i * g.w_out + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn check_grad_y<T: Element>(g: &ConvGeom, grad_y: &Tensor<T>) -> Result<()> {
    if grad_y.dims() != [g.c_out, g.h_out, g.w_out] {
        return shape_err(format!(
            "conv grad_y {:?}, forward output is [{}, {}, {}]",
            grad_y.dims(),
            g.c_out,
            g.h_out,
            g.w_out
        ));
    }
    Ok(())
}

/// `grad_y[o]` laid out on the full-width scratch grid with zeros in the
/// scratch columns.
fn widen<T: Element>(g: &ConvGeom, gy_plane: &[T], buf: &mut [T]) {
    buf.fill(T::zero());
    for i in 0..g.h_out {
        buf[i * g.w..i * g.w + g.w_out].copy_from_slice(&gy_plane[i * g.w_out..(i + 1) * g.w_out]);
    }
}

/// Dot product with eight interleaved partial sums, reduced in a fixed order.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for k in 0..8 {
            lanes[k] = lanes[k] + xa[k] * xb[k];
        }
    }
    let mut tail = T::zero();
    for (&p, &q) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + p * q;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// Gradients of the conv weights and bias.
pub fn conv2d_backward_params<T: Element>(
    x: &Tensor<T>,
    w_dims: &[usize],
    grad_y: &Tensor<T>,
    stride: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x.dims(), w_dims, stride)?;
    check_grad_y(&g, grad_y)?;
    let xd = x.data();
    let gyd = grad_y.data();
    let plane = g.h_out * g.w_out;
    let kernel = g.m * g.r;
    let mut grad_w = Tensor::zeros(w_dims);
    let mut grad_b = Tensor::zeros(&[g.c_out]);

    for o in 0..g.c_out {
        let gy = &gyd[o * plane..(o + 1) * plane];
        grad_b.data_mut()[o] = gy.iter().fold(T::zero(), |s, &v| s + v);
    }

    let gwd = grad_w.data_mut();
    if g.unit_stride() {
        let span = g.span();
        let mut wide = vec![T::zero(); span];
        for o in 0..g.c_out {
            widen(&g, &gyd[o * plane..(o + 1) * plane], &mut wide);
            for c in 0..g.c_in {
                let xc = &xd[c * g.h * g.w..(c + 1) * g.h * g.w];
                let dst = &mut gwd[(o * g.c_in + c) * kernel..(o * g.c_in + c + 1) * kernel];
                for a in 0..g.m {
                    for bb in 0..g.r {
                        let off = a * g.w + bb;
                        dst[a * g.r + bb] = dot(&wide, &xc[off..off + span]);
                    }
                }
            }
        }
    } else {
        for o in 0..g.c_out {
            for c in 0..g.c_in {
                for a in 0..g.m {
                    for bb in 0..g.r {
                        let mut acc = T::zero();
                        for i in 0..g.h_out {
                            for j in 0..g.w_out {
                                let xv = xd[(c * g.h + i * g.s + a) * g.w + j * g.v + bb];
                                acc = acc + gyd[o * plane + i * g.w_out + j] * xv;
                            }
                        }
                        gwd[((o * g.c_in + c) * g.m + a) * g.r + bb] = acc;
                    }
                }
            }
        }
    }
    Ok((grad_w, grad_b))
}

/// Gradient of the conv input.
pub fn conv2d_backward_input<T: Element>(
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
    x_dims: &[usize],
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x_dims, w.dims(), stride)?;
    check_grad_y(&g, grad_y)?;
    let wd = w.data();
    let gyd = grad_y.data();
    let plane = g.h_out * g.w_out;
    let kernel = g.m * g.r;
    let mut grad_x = Tensor::zeros(x_dims);
    let gxd = grad_x.data_mut();

    if g.unit_stride() {
        let span = g.span();
        let mut wide = vec![T::zero(); span];
        for o in 0..g.c_out {
            widen(&g, &gyd[o * plane..(o + 1) * plane], &mut wide);
            for c in 0..g.c_in {
                let gxc = &mut gxd[c * g.h * g.w..(c + 1) * g.h * g.w];
                let wk = &wd[(o * g.c_in + c) * kernel..(o * g.c_in + c + 1) * kernel];
                for a in 0..g.m {
                    for bb in 0..g.r {
                        let weight = wk[a * g.r + bb];
                        let off = a * g.w + bb;
                        for (dst, &gv) in gxc[off..off + span].iter_mut().zip(&wide) {
                            *dst = *dst + gv * weight;
                        }
                    }
                }
            }
        }
    } else {
        for o in 0..g.c_out {
            for i in 0..g.h_out {
                for j in 0..g.w_out {
                    let gv = gyd[o * plane + i * g.w_out + j];
                    for c in 0..g.c_in {
                        for a in 0..g.m {
                            for bb in 0..g.r {
                                let xi = (c * g.h + i * g.s + a) * g.w + j * g.v + bb;
                                gxd[xi] = gxd[xi] + gv * wd[((o * g.c_in + c) * g.m + a) * g.r + bb];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_x)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
    stride: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (grad_w, grad_b) = conv2d_backward_params(x, w.dims(), grad_y, stride)?;
    let grad_x = conv2d_backward_input(w, grad_y, x.dims(), stride)?;
    Ok((grad_x, grad_w, grad_b))
}

/// Non-overlapping `p x q` max pooling. Trailing rows and columns that do
/// not fill a window are dropped. Returns the pooled map and, per output,
/// the flat input index of the first maximal element in row-major order.
pub fn maxpool2d<T: Element>(x: &Tensor<T>, p: usize, q: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if p == 0 || q == 0 {
        return shape_err(format!("pool window {p}x{q} must be positive"));
    }
    let (c, h, w) = dims3(x, "maxpool input")?;
    let (ho, wo) = (h / p, w / q);
    let xd = x.data();
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    let od = out.data_mut();
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut best = (ch * h + i * p) * w + j * q;
                for a in 0..p {
                    for b in 0..q {
                        let idx = (ch * h + i * p + a) * w + j * q + b;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                od[(ch * ho + i) * wo + j] = xd[best];
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each pooled gradient to the input element that won the max.
pub fn maxpool2d_backward<T: Element>(grad_y: &Tensor<T>, argmax: &[usize], x_dims: &[usize]) -> Result<Tensor<T>> {
    if grad_y.len() != argmax.len() {
        return shape_err(format!(
            "maxpool grad_y has {} elements, {} argmax indices",
            grad_y.len(),
            argmax.len()
        ));
    }
    let mut grad_x = Tensor::zeros(x_dims);
    let gxd = grad_x.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_y.data()) {
        if idx >= gxd.len() {
            return shape_err(format!("argmax index {idx} outside input {x_dims:?}"));
        }
        gxd[idx] = gxd[idx] + g;
    }
    Ok(grad_x)
}

/// `max(x, 0)`; NaN passes through so divergence stays visible.
pub fn relu_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Passes gradient where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.dims() != grad_y.dims() {
        return shape_err(format!("relu x {:?} vs grad_y {:?}", x.dims(), grad_y.dims()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_y.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.dims(), data)
}

fn linear_dims<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize)> {
    let [k, d] = *w.dims() else {
        return shape_err(format!("linear weight must be [K, D], got {:?}", w.dims()));
    };
    if x.dims() != [d] {
        return shape_err(format!("linear input {:?}, weight expects [{d}]", x.dims()));
    }
    Ok((k, d))
}

/// `y = w x + b`.
pub fn linear_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, d) = linear_dims(x, w)?;
    if b.dims() != [k] {
        return shape_err(format!("linear bias {:?} vs {k} outputs", b.dims()));
    }
    let data = (0..k)
        .map(|row| b.data()[row] + dot(&w.data()[row * d..(row + 1) * d], x.data()))
        .collect();
    Tensor::from_vec(&[k], data)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (k, d) = linear_dims(x, w)?;
    if grad_y.dims() != [k] {
        return shape_err(format!("linear grad_y {:?} vs {k} outputs", grad_y.dims()));
    }
    let mut grad_x = Tensor::zeros(&[d]);
    let mut grad_w = Tensor::zeros(&[k, d]);
    let wd = w.data();
    for (row, &g) in grad_y.data().iter().enumerate() {
        let gw_row = &mut grad_w.data_mut()[row * d..(row + 1) * d];
        for (dst, &xv) in gw_row.iter_mut().zip(x.data()) {
            *dst = g * xv;
        }
        for (dst, &wv) in grad_x.data_mut().iter_mut().zip(&wd[row * d..(row + 1) * d]) {
            *dst = *dst + g * wv;
        }
    }
    Ok((grad_x, grad_w, grad_y.clone()))
}

/// Softmax with the max subtracted before exponentiation.
pub fn softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |s, &e| s + e);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`:
/// `loss = logsumexp(logits) - logits[label]`,
/// `grad = softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let k = logits.len();
    if label >= k {
        return Err(NnError::BadLabel { label, classes: k });
    }
    let z = logits.data();
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum = z.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    let lse = max + sum.ln();
    let loss = lse - z[label];
    let mut grad: Vec<T> = z.iter().map(|&v| (v - lse).exp()).collect();
    grad[label] = grad[label] - T::one();
    Ok((loss, Tensor::from_vec(logits.dims(), grad)?))
}

/// `velocity = momentum * velocity + grad; value -= lr * velocity`.
pub fn sgd_step<'a, T: Element>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, lr: T, momentum: T) {
    for p in params {
        let Parameter { value, grad, velocity } = p;
        for ((x, &g), vel) in value.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
            *vel = momentum * *vel + g;
            *x = *x - lr * *vel;
        }
    }
}

/// Samples `N(mean, std^2)`, redrawing anything farther than `2 * std`
/// from the mean.
pub fn truncated_normal_init(dims: &[usize], mean: f32, std: f32, rng: &mut Rng) -> Tensor<f32> {
    assert!(std > 0.0 && std.is_finite(), "std must be positive, got {std}");
    let normal = Normal::new(f64::from(mean), f64::from(std)).expect("valid normal");
    let bound = 2.0 * f64::from(std);
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = normal.sample(rng);
            if (x - f64::from(mean)).abs() <= bound {
                break x as f32;
            }
        })
        .collect();
    Tensor::from_vec(dims, data).expect("sized from dims")
}

/// Uniform sample helper shared by tests and tools: values in `[lo, hi)`.
pub fn uniform_tensor<T: Element>(dims: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| T::from(rng.random_range(lo..hi)).expect("representable"))
        .collect();
    Tensor::from_vec(dims, data).expect("sized from dims")
}
