//! Layer kernels. Each forward has a matching backward that takes the
//! upstream gradient and returns the gradient w.r.t. the layer input,
//! accumulating parameter gradients into caller-provided buffers.

use super::{Real, Tensor4};
use crate::error::{Error, Result};

/// Convolution geometry: square kernel, stride 1, "same" output size.
/// Padding is `pad_before` on top/left and `k - 1 - pad_before` on bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad_before: usize,
}

impl ConvShape {
    pub fn same(in_c: usize, out_c: usize, k: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            pad_before: (k - 1) / 2,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, s: &ConvShape, cols: &mut Vec<T>) {
    let (k, pb) = (s.k, s.pad_before as isize);
    let hw = h * w;
    cols.clear();
    cols.resize(s.col_rows() * hw, T::zero());
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pb;
                let dy = ky as isize - pb;
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo < x_hi {
                        let s_lo = (x_lo as isize + dx) as usize;
                        dst[x_lo..x_hi].copy_from_slice(&src[s_lo..s_lo + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, s: &ConvShape, dx: &mut [T]) {
    let (k, pb) = (s.k, s.pad_before as isize);
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let ox = kx as isize - pb;
                let oy = ky as isize - pb;
                for y in 0..h {
                    let iy = y as isize + oy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst[(xo as isize + ox) as usize] += src[xo];
                    }
                }
            }
        }
    }
}

/// `weight` is `[out_c][in_c][k][k]`; `bias` is optional `[out_c]`.
pub fn conv_forward<T: Real>(
    x: &Tensor4<T>,
    shape: &ConvShape,
    weight: &[T],
    bias: Option<&[T]>,
) -> Result<Tensor4<T>> {
    if x.c != shape.in_c {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            shape.in_c, x.c
        )));
    }
    debug_assert_eq!(weight.len(), shape.weight_len());
    let hw = x.plane();
    let rows = shape.col_rows();
    let mut out = Tensor4::zeros(x.n, shape.out_c, x.h, x.w);
    let mut cols = Vec::new();
    for i in 0..x.n {
        let input = x.sample(i);
        let b: &[T] = if shape.k == 1 {
            input
        } else {
            im2col(input, x.c, x.h, x.w, shape, &mut cols);
            &cols
        };
        let o = out.sample_mut(i);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                o[oc * hw..(oc + 1) * hw].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            shape.out_c,
            rows,
            hw,
            T::one(),
            weight,
            rows as isize,
            1,
            b,
            hw as isize,
            1,
            beta,
            o,
            hw as isize,
            1,
        );
    }
    Ok(out)
}

/// Returns `dx`; adds into `dweight` and `dbias`.
pub fn conv_backward<T: Real>(
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
    shape: &ConvShape,
    weight: &[T],
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) -> Tensor4<T> {
    let hw = x.plane();
    let rows = shape.col_rows();
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut cols = Vec::new();
    let mut dcols = vec![T::zero(); if shape.k == 1 { 0 } else { rows * hw }];
    let mut dbias = dbias;
    for i in 0..x.n {
        let g = dy.sample(i);
        if let Some(db) = dbias.as_deref_mut() {
            for (oc, d) in db.iter_mut().enumerate() {
                *d += g[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
            }
        }
        let input = x.sample(i);
        let b: &[T] = if shape.k == 1 {
            input
        } else {
            im2col(input, x.c, x.h, x.w, shape, &mut cols);
            &cols
        };
        // dW[out, rows] += dy[out, hw] · cols[rows, hw]^T
        T::gemm(
            shape.out_c,
            hw,
            rows,
            T::one(),
            g,
            hw as isize,
            1,
            b,
            1,
            hw as isize,
            T::one(),
            dweight,
            rows as isize,
            1,
        );
        // dcols[rows, hw] = W^T[rows, out] · dy[out, hw]
        if shape.k == 1 {
            T::gemm(
                rows,
                shape.out_c,
                hw,
                T::one(),
                weight,
                1,
                rows as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                dx.sample_mut(i),
                hw as isize,
                1,
            );
        } else {
            T::gemm(
                rows,
                shape.out_c,
                hw,
                T::one(),
                weight,
                1,
                rows as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                &mut dcols,
                hw as isize,
                1,
            );
            col2im_add(&dcols, x.c, x.h, x.w, shape, dx.sample_mut(i));
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// What batch normalisation keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    /// Whether batch statistics (train) or running statistics (eval) were used.
    pub train: bool,
}

/// Per-channel normalisation over (n, h, w). In train mode batch statistics
/// are used; otherwise `running_mean` / `running_var`.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    train: bool,
) -> (Tensor4<T>, BnCache<T>) {
    let (n, c, hw) = (x.n, x.c, x.plane());
    let eps = T::from_f64(BN_EPS);
    let count = T::from_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if train {
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += x.data[(i * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for i in 0..n {
                v += x.data[(i * c + ch) * hw..][..hw]
                    .iter()
                    .map(|&a| (a - m) * (a - m))
                    .sum::<T>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor4::zeros(n, c, x.h, x.w);
    let mut y = Tensor4::zeros(n, c, x.h, x.w);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for j in off..off + hw {
                let h = (x.data[j] - m) * is;
                xhat.data[j] = h;
                y.data[j] = g * h + b;
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train,
        },
    )
}

pub fn batchnorm_backward<T: Real>(
    dy: &Tensor4<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor4<T> {
    let (n, c, hw) = (dy.n, dy.c, dy.plane());
    let count = T::from_f64((n * hw) as f64);
    let mut dx = Tensor4::zeros(n, c, dy.h, dy.w);
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                sum_dy += dy.data[j];
                sum_dy_xhat += dy.data[j] * cache.xhat.data[j];
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch];
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                dx.data[j] = if cache.train {
                    scale * (dy.data[j] - (sum_dy + cache.xhat.data[j] * sum_dy_xhat) / count)
                } else {
                    scale * dy.data[j]
                };
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor4<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given the ReLU *output*.
pub fn relu_backward_inplace<T: Real>(dy: &mut Tensor4<T>, y: &Tensor4<T>) {
    for (d, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// 2x2 max pooling. Returns the pooled tensor and the flat input index of
/// each selected maximum.
pub fn maxpool_forward<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "max pooling needs even height and width, got {}x{}",
            x.h, x.w
        )));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    for p in 0..x.n * x.c {
        let base = p * x.h * x.w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * x.w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * x.w + 2 * xo + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                let o = p * oh * ow + y * ow + xo;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_backward<T: Real>(
    dy: &Tensor4<T>,
    argmax: &[u32],
    input_dims: (usize, usize, usize, usize),
) -> Tensor4<T> {
    let (n, c, h, w) = input_dims;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (g, &j) in dy.data.iter().zip(argmax) {
        dx.data[j as usize] += *g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor4::zeros(x.n, x.c, h, w);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..][..x.h * x.w];
        let dst = &mut out.data[p * h * w..][..h * w];
        for y in 0..h {
            for xo in 0..w {
                dst[y * w + xo] = src[(y / 2) * x.w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(dy: &Tensor4<T>) -> Tensor4<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.h * dy.w..][..dy.h * dy.w];
        let dst = &mut dx.data[p * h * w..][..h * w];
        for y in 0..dy.h {
            for xo in 0..dy.w {
                dst[(y / 2) * w + xo / 2] += src[y * dy.w + xo];
            }
        }
    }
    dx
}

/// Channel-wise concatenation `[a, b]`.
pub fn concat_forward<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let o = out.sample_mut(i);
        let sa = a.sample(i);
        o[..sa.len()].copy_from_slice(sa);
        o[sa.len()..].copy_from_slice(b.sample(i));
    }
    Ok(out)
}

pub fn concat_backward<T: Real>(dy: &Tensor4<T>, a_channels: usize) -> (Tensor4<T>, Tensor4<T>) {
    let b_channels = dy.c - a_channels;
    let mut da = Tensor4::zeros(dy.n, a_channels, dy.h, dy.w);
    let mut db = Tensor4::zeros(dy.n, b_channels, dy.h, dy.w);
    for i in 0..dy.n {
        let s = dy.sample(i);
        let split = a_channels * dy.plane();
        da.sample_mut(i).copy_from_slice(&s[..split]);
        db.sample_mut(i).copy_from_slice(&s[split..]);
    }
    (da, db)
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let (c, hw) = (x.c, x.plane());
    let mut out = x.clone();
    for i in 0..x.n {
        let s = out.sample_mut(i);
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(s[ch * hw + p]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (s[ch * hw + p] - m).exp();
                s[ch * hw + p] = e;
                total += e;
            }
            for ch in 0..c {
                s[ch * hw + p] = s[ch * hw + p] / total;
            }
        }
    }
    out
}

/// `dx = p ⊙ (dy - Σ_c p·dy)` per pixel.
pub fn softmax_backward<T: Real>(probs: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let (c, hw) = (probs.c, probs.plane());
    let mut dx = Tensor4::zeros(probs.n, c, probs.h, probs.w);
    for i in 0..probs.n {
        let (p, g, d) = (probs.sample(i), dy.sample(i), dx.sample_mut(i));
        for px in 0..hw {
            let dot: T = (0..c).map(|ch| p[ch * hw + px] * g[ch * hw + px]).sum();
            for ch in 0..c {
                d[ch * hw + px] = p[ch * hw + px] * (g[ch * hw + px] - dot);
            }
        }
    }
    dx
}
