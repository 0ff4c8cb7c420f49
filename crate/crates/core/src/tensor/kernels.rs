//! Forward and backward loops for the structured operations.
//!
//! All image tensors are NCHW, row-major.

use super::Element;

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.hw_out()).max(1)).clamp(1, self.n.max(1))
    }
}

/// `c[m,n] (+)= a[m,k] * b[k,n]`, each operand given as (slice, row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], usize, usize),
    b: (&[T], usize, usize),
    c: &mut [T],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: callers pass dense buffers whose extents cover the strided views.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `ow` whose input column `ow * stride + kj - pad` lies in `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(g.wo) };
    (lo.min(hi), hi)
}

/// Writes the `[k, count * ho * wo]` patch matrix into `cols`, replacing its contents.
fn im2col<T: Element>(g: &ConvGeom, input: &[T], first: usize, count: usize, cols: &mut Vec<T>) {
    cols.clear();
    let plane = g.h * g.w;
    let zero = T::zero();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                for s in 0..count {
                    let src = &input[((first + s) * g.cin + c) * plane..][..plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize || lo == hi {
                            cols.resize(cols.len() + g.wo, zero);
                            continue;
                        }
                        cols.resize(cols.len() + lo, zero);
                        let base = ih as usize * g.w + lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            cols.extend_from_slice(&src[base..base + hi - lo]);
                        } else {
                            cols.extend((0..hi - lo).map(|i| src[base + i * g.stride]));
                        }
                        cols.resize(cols.len() + g.wo - hi, zero);
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], first: usize, count: usize, grad_in: &mut [T]) {
    let hw_out = g.hw_out();
    let l = count * hw_out;
    let plane = g.h * g.w;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                for s in 0..count {
                    let dst = &mut grad_in[((first + s) * g.cin + c) * plane..][..plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[s * hw_out + oh * g.wo..][lo..hi];
                        let base = ih as usize * g.w + lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            for (d, &v) in dst[base..base + hi - lo].iter_mut().zip(src_row) {
                                *d = *d + v;
                            }
                        } else {
                            for (i, &v) in src_row.iter().enumerate() {
                                let d = &mut dst[base + i * g.stride];
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw_out = g.hw_out();
    let k = g.k();
    let mut out = vec![T::zero(); g.n * g.cout * hw_out];
    let chunk = g.chunk();
    let mut cols = Vec::with_capacity(k * chunk * hw_out);
    let mut tmp = vec![T::zero(); g.cout * chunk * hw_out];
    let mut first = 0;
    while first < g.n {
        let count = chunk.min(g.n - first);
        let l = count * hw_out;
        im2col(g, input, first, count, &mut cols);
        gemm(g.cout, k, l, (weight, k, 1), (&cols, l, 1), &mut tmp, false);
        for s in 0..count {
            for co in 0..g.cout {
                let b = bias.map_or(T::zero(), |b| b[co]);
                let src = &tmp[co * l + s * hw_out..][..hw_out];
                let dst = &mut out[((first + s) * g.cout + co) * hw_out..][..hw_out];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        first += count;
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias); each is computed only when requested.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw_out = g.hw_out();
    let k = g.k();
    let (need_in, need_w, need_b) = need;
    let mut grad_in = need_in.then(|| vec![T::zero(); g.n * g.cin * g.h * g.w]);
    let mut grad_w = need_w.then(|| vec![T::zero(); g.cout * k]);
    let grad_b = need_b.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for s in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                let src = &grad_out[(s * g.cout + co) * hw_out..][..hw_out];
                *b = *b + src.iter().copied().sum();
            }
        }
        gb
    });
    if !(need_in || need_w) {
        return (None, None, grad_b);
    }
    let chunk = g.chunk();
    let mut cols = Vec::with_capacity(k * chunk * hw_out);
    let mut dout = Vec::with_capacity(g.cout * chunk * hw_out);
    let mut first = 0;
    while first < g.n {
        let count = chunk.min(g.n - first);
        let l = count * hw_out;
        dout.clear();
        for co in 0..g.cout {
            for s in 0..count {
                dout.extend_from_slice(&grad_out[((first + s) * g.cout + co) * hw_out..][..hw_out]);
            }
        }
        if let Some(gw) = grad_w.as_mut() {
            im2col(g, input, first, count, &mut cols);
            // dW[cout,k] += dout[cout,l] * cols^T[l,k]
            gemm(g.cout, l, k, (&dout, l, 1), (&cols, 1, l), gw, true);
        }
        if let Some(gi) = grad_in.as_mut() {
            // dcols[k,l] = W^T[k,cout] * dout[cout,l]
            cols.resize(k * l, T::zero());
            gemm(k, g.cout, l, (weight, 1, k), (&dout, l, 1), &mut cols, false);
            col2im(g, &cols, first, count, gi);
        }
        first += count;
    }
    (grad_in, grad_w, grad_b)
}

/// Per-channel mean and biased variance over N, H, W.
pub(crate) fn channel_stats<T: Element>(input: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += input[(i * c + ch) * hw..][..hw].iter().map(|x| x.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += input[(i * c + ch) * hw..][..hw]
                .iter()
                .map(|x| {
                    let d = x.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub(crate) fn batchnorm_apply<T: Element>(
    input: &[T],
    shape: [usize; 4],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![T::zero(); input.len()];
    for i in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let src = &input[(i * c + ch) * hw..][..hw];
            let dst = &mut out[(i * c + ch) * hw..][..hw];
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x - mean[ch]) * scale + beta[ch];
            }
        }
    }
    out
}

/// Gradients of batch norm. In train mode mean/inv_std are batch statistics and
/// the input gradient includes their dependence on x.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Element>(
    input: &[T],
    shape: [usize; 4],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    grad_out: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut gx = vec![T::zero(); input.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..n {
            let xs = &input[(i * c + ch) * hw..][..hw];
            let dys = &grad_out[(i * c + ch) * hw..][..hw];
            for (&x, &dy) in xs.iter().zip(dys) {
                let xhat = ((x - mean[ch]) * inv_std[ch]).as_f64();
                sum_dy += dy.as_f64();
                sum_dy_xhat += dy.as_f64() * xhat;
            }
        }
        ggamma[ch] = T::from_f64(sum_dy_xhat);
        gbeta[ch] = T::from_f64(sum_dy);
        let g = gamma[ch].as_f64();
        let is = inv_std[ch].as_f64();
        for i in 0..n {
            let xs = &input[(i * c + ch) * hw..][..hw];
            let dys = &grad_out[(i * c + ch) * hw..][..hw];
            let dst = &mut gx[(i * c + ch) * hw..][..hw];
            for ((d, &x), &dy) in dst.iter_mut().zip(xs).zip(dys) {
                let v = if train {
                    let xhat = ((x - mean[ch]) * inv_std[ch]).as_f64();
                    g * is / m * (m * dy.as_f64() - sum_dy - xhat * sum_dy_xhat)
                } else {
                    g * is * dy.as_f64()
                };
                *d = T::from_f64(v);
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub(crate) fn upsample2x_forward<T: Element>(input: &[T], shape: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * 4 * h * w..][..4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(grad_out: &[T], shape: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let mut gi = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &grad_out[p * 4 * h * w..][..4 * h * w];
        let dst = &mut gi[p * h * w..][..h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                let d = &mut dst[(i / 2) * w + j / 2];
                *d = *d + src[i * 2 * w + j];
            }
        }
    }
    gi
}

/// Mirror index without edge repetition; requires `n > radius`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Separable depthwise filter with reflect padding; output shape equals input shape.
pub(crate) fn blur_forward<T: Element>(input: &[T], shape: [usize; 4], kernel: &[T]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for p in 0..n * c {
        let src = &input[p * h * w..][..h * w];
        let mid = &mut tmp[p * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    acc = acc + kv * src[i * w + reflect(j as isize + t as isize - r, w)];
                }
                mid[i * w + j] = acc;
            }
        }
        let dst = &mut out[p * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    acc = acc + kv * mid[reflect(i as isize + t as isize - r, h) * w + j];
                }
                dst[i * w + j] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`blur_forward`].
pub(crate) fn blur_backward<T: Element>(grad_out: &[T], shape: [usize; 4], kernel: &[T]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let r = (kernel.len() / 2) as isize;
    let mut mid = vec![T::zero(); h * w];
    let mut gi = vec![T::zero(); grad_out.len()];
    for p in 0..n * c {
        let src = &grad_out[p * h * w..][..h * w];
        mid.fill(T::zero());
        for i in 0..h {
            for j in 0..w {
                let g = src[i * w + j];
                for (t, &kv) in kernel.iter().enumerate() {
                    let ii = reflect(i as isize + t as isize - r, h);
                    mid[ii * w + j] = mid[ii * w + j] + kv * g;
                }
            }
        }
        let dst = &mut gi[p * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let g = mid[i * w + j];
                for (t, &kv) in kernel.iter().enumerate() {
                    let jj = reflect(j as isize + t as isize - r, w);
                    dst[i * w + jj] = dst[i * w + jj] + kv * g;
                }
            }
        }
    }
    gi
}

/// `y[n,m] = x[n,k] * W[m,k]^T + b[m]`.
pub(crate) fn linear_forward<T: Element>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    k: usize,
    m: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for row in out.chunks_mut(m) {
        row.copy_from_slice(b);
    }
    gemm(n, k, m, (x, k, 1), (w, 1, k), &mut out, true);
    out
}

pub(crate) fn linear_backward<T: Element>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    n: usize,
    k: usize,
    m: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); n * k];
    gemm(n, m, k, (grad_out, m, 1), (w, k, 1), &mut gx, false);
    let mut gw = vec![T::zero(); m * k];
    gemm(m, n, k, (grad_out, 1, m), (x, k, 1), &mut gw, false);
    let mut gb = vec![T::zero(); m];
    for row in grad_out.chunks(m) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    (gx, gw, gb)
}

/// Row-wise softmax of `[n, k]` logits, computed stably.
pub(crate) fn softmax_rows<T: Element>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}
