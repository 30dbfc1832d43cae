//! Raw numeric kernels behind the graph operations. All functions work on
//! NCHW buffers and are single-threaded so results are bitwise reproducible.

use super::Tensor;

/// `c (m×n) = a (m×k) · b (k×n) + beta · c` with arbitrary strides on `a`
/// and `b`; `c` is row-major with row stride `n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], wshape: [usize; 4], stride: usize, pad: usize) -> Self {
        let [_, cin, h, w] = x;
        let [cout, wcin, kh, kw] = wshape;
        assert_eq!(cin, wcin, "conv input has {cin} channels, weight expects {wcin}");
        assert_eq!(kh, kw, "only square kernels are supported");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { cin, h, w, cout, k: kh, stride, pad, oh, ow }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * s) as isize - p + ky as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let n = x.n();
    let mut y = Tensor::zeros([n, g.cout, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.rows() * g.cols()] };
    for i in 0..n {
        let xs = x.sample(i);
        let b: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let ys = y.sample_mut(i);
        if let Some(bias) = bias {
            for (co, chunk) in ys.chunks_mut(g.cols()).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        gemm(
            g.cout,
            g.rows(),
            g.cols(),
            w.data(),
            g.rows(),
            1,
            b,
            g.cols(),
            1,
            if bias.is_some() { 1.0 } else { 0.0 },
            ys,
        );
    }
    y
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_db: bool,
) -> (Option<Tensor>, Tensor, Option<Tensor>) {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let n = x.n();
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.rows() * g.cols()] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![0.0; g.rows() * g.cols()] } else { Vec::new() };
    for i in 0..n {
        let xs = x.sample(i);
        let gys = gy.sample(i);
        let b: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        // dW (cout × rows) += dY (cout × cols) · B^T (cols × rows)
        gemm(g.cout, g.cols(), g.rows(), gys, g.cols(), 1, b, 1, g.cols(), 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            // dB (rows × cols) = W^T (rows × cout) · dY (cout × cols)
            if g.is_pointwise() {
                gemm(g.rows(), g.cout, g.cols(), w.data(), 1, g.rows(), gys, g.cols(), 1, 0.0, dx.sample_mut(i));
            } else {
                gemm(g.rows(), g.cout, g.cols(), w.data(), 1, g.rows(), gys, g.cols(), 1, 0.0, &mut dcols);
                col2im(&dcols, &g, dx.sample_mut(i));
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = Tensor::zeros([1, g.cout, 1, 1]);
        for i in 0..n {
            for (co, chunk) in gy.sample(i).chunks(g.cols()).enumerate() {
                db.data_mut()[co] += chunk.iter().sum::<f32>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let c = x.c();
    let count = (x.n() * x.plane()) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for n in 0..x.n() {
            sum += x.channel(n, ch).iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for n in 0..x.n() {
            sq += x
                .channel(n, ch)
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (sq / count) as f32;
    }
    (mean, var)
}

/// `y = gamma · (x − mean) · inv_std + beta`, per channel.
pub fn channel_affine(x: &Tensor, mean: &[f32], inv_std: &[f32], gamma: &[f32], beta: &[f32]) -> Tensor {
    let mut y = Tensor::zeros(x.shape());
    for n in 0..x.n() {
        for ch in 0..x.c() {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            let src = x.channel(n, ch);
            for (d, &s) in y.channel_mut(n, ch).iter_mut().zip(src) {
                *d = s * scale + shift;
            }
        }
    }
    y
}

/// Gradients of batch normalization. With `batch_stats` the mean and
/// variance are functions of `x`; otherwise they are constants.
pub fn batch_norm_backward(
    x: &Tensor,
    gy: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    batch_stats: bool,
    need_dx: bool,
) -> (Option<Tensor>, Vec<f32>, Vec<f32>) {
    let c = x.c();
    let count = (x.n() * x.plane()) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for ch in 0..c {
        let (m, is) = (mean[ch], inv_std[ch]);
        let mut sum_gy = 0.0f64;
        let mut sum_gy_xhat = 0.0f64;
        for n in 0..x.n() {
            for (&xv, &g) in x.channel(n, ch).iter().zip(gy.channel(n, ch)) {
                sum_gy += g as f64;
                sum_gy_xhat += (g * (xv - m) * is) as f64;
            }
        }
        dgamma[ch] = sum_gy_xhat as f32;
        dbeta[ch] = sum_gy as f32;
        if let Some(dx) = dx.as_mut() {
            let k = gamma[ch] * is;
            if batch_stats {
                let mean_gy = (sum_gy / count) as f32;
                let mean_gy_xhat = (sum_gy_xhat / count) as f32;
                for n in 0..x.n() {
                    let xs = x.channel(n, ch);
                    let gs = gy.channel(n, ch);
                    for ((d, &xv), &g) in dx.channel_mut(n, ch).iter_mut().zip(xs).zip(gs) {
                        let xhat = (xv - m) * is;
                        *d = k * (g - mean_gy - xhat * mean_gy_xhat);
                    }
                }
            } else {
                for n in 0..x.n() {
                    for (d, &g) in dx.channel_mut(n, ch).iter_mut().zip(gy.channel(n, ch)) {
                        *d = k * g;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Source indices and weights for 1-D linear resampling with half-pixel
/// centers (`src = (dst + 0.5) · in / out − 0.5`, clamped at the borders).
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f32, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = (src - i0 as f64).clamp(0.0, 1.0) as f32;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Bilinear resampling of every plane of `x` to `oh × ow`.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut tmp = vec![0.0f32; oh * w];
    for ni in 0..n {
        for ch in 0..c {
            let src = x.channel(ni, ch);
            for (oy, &(i0, i1, l0, l1)) in ty.iter().enumerate() {
                let r0 = &src[i0 * w..(i0 + 1) * w];
                let r1 = &src[i1 * w..(i1 + 1) * w];
                for ((t, &a), &b) in tmp[oy * w..(oy + 1) * w].iter_mut().zip(r0).zip(r1) {
                    *t = l0 * a + l1 * b;
                }
            }
            let dst = y.channel_mut(ni, ch);
            for oy in 0..oh {
                let row = &tmp[oy * w..(oy + 1) * w];
                for (ox, &(j0, j1, l0, l1)) in tx.iter().enumerate() {
                    dst[oy * ow + ox] = l0 * row[j0] + l1 * row[j1];
                }
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`]: maps an output gradient back onto the
/// `h × w` input grid.
pub fn resize_bilinear_backward(gy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, oh, ow] = gy.shape();
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gx = Tensor::zeros([n, c, h, w]);
    let mut tmp = vec![0.0f32; oh * w];
    for ni in 0..n {
        for ch in 0..c {
            tmp.fill(0.0);
            let src = gy.channel(ni, ch);
            for oy in 0..oh {
                let row = &mut tmp[oy * w..(oy + 1) * w];
                for (ox, &(j0, j1, l0, l1)) in tx.iter().enumerate() {
                    let g = src[oy * ow + ox];
                    row[j0] += l0 * g;
                    row[j1] += l1 * g;
                }
            }
            let dst = gx.channel_mut(ni, ch);
            for (oy, &(i0, i1, l0, l1)) in ty.iter().enumerate() {
                for xi in 0..w {
                    let g = tmp[oy * w + xi];
                    dst[i0 * w + xi] += l0 * g;
                    dst[i1 * w + xi] += l1 * g;
                }
            }
        }
    }
    gx
}

pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(h % k == 0 && w % k == 0, "pool size {k} does not divide {h}×{w}");
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ch in 0..c {
            let src = x.channel(ni, ch);
            let dst = y.channel_mut(ni, ch);
            for iy in 0..h {
                let row = &src[iy * w..(iy + 1) * w];
                let out = &mut dst[(iy / k) * ow..(iy / k + 1) * ow];
                for (ix, v) in row.iter().enumerate() {
                    out[ix / k] += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
    }
    y
}

pub fn avg_pool_backward(gy: &Tensor, k: usize) -> Tensor {
    let [n, c, oh, ow] = gy.shape();
    let (h, w) = (oh * k, ow * k);
    let inv = 1.0 / (k * k) as f32;
    let mut gx = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ch in 0..c {
            let src = gy.channel(ni, ch);
            let dst = gx.channel_mut(ni, ch);
            for iy in 0..h {
                for ix in 0..w {
                    dst[iy * w + ix] = src[(iy / k) * ow + ix / k] * inv;
                }
            }
        }
    }
    gx
}

/// 3×3 max pooling, stride 2, padding 1. Returns the output and, for each
/// output element, the flat in-plane index of the winning input.
pub fn max_pool_3s2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let mut idx = 0;
    for ni in 0..n {
        for ch in 0..c {
            let src = x.channel(ni, ch);
            let dst = y.channel_mut(ni, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    arg[idx] = best_i as u32;
                    idx += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_3s2_backward(gy: &Tensor, arg: &[u32], h: usize, w: usize) -> Tensor {
    let [n, c, _, _] = gy.shape();
    let mut gx = Tensor::zeros([n, c, h, w]);
    let plane = gy.plane();
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * plane;
            let src = gy.channel(ni, ch);
            let dst = gx.channel_mut(ni, ch);
            for (o, &g) in src.iter().enumerate() {
                dst[arg[base + o] as usize] += g;
            }
        }
    }
    gx
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let [n, _, h, w] = parts[0].shape();
    let c: usize = parts.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for t in parts {
            assert_eq!([t.n(), t.h(), t.w()], [n, h, w], "concat shape mismatch");
            data.extend_from_slice(t.sample(ni));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}
