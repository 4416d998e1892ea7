//! Forward and backward kernels shared by the tape and the evaluation path.
//!
//! Convolutions are stride 1 with "same" zero padding and odd kernel sizes,
//! lowered to one GEMM per sample via im2col. Per-sample lowering keeps every
//! output value independent of the batch it was computed in.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

fn dims4(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected a 4-d tensor, got {t:?}"))),
    }
}

fn dims2(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match *t {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, format!("expected a 2-d tensor, got {t:?}"))),
    }
}

/// `a @ b`, or `a @ b^T` when `trans_b` is set.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a.shape())?;
    let (br, bc) = dims2("matmul", b.shape())?;
    let (kb, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k != kb {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions differ: lhs {:?}, rhs {:?}{}",
                a.shape(),
                b.shape(),
                if trans_b { " (transposed)" } else { "" }
            ),
        ));
    }
    let mut out = vec![T::ZERO; m * n];
    T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), rsb, csb, T::ZERO, &mut out, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = dy.shape()[1];
    let mut da = vec![T::ZERO; m * k];
    let mut db = vec![T::ZERO; b.numel()];
    let bs = b.shape()[1] as isize;
    if trans_b {
        // b: [n, k]; da = dy @ b ; db = dy^T @ a
        T::gemm(m, n, k, dy.data(), n as isize, 1, b.data(), bs, 1, T::ZERO, &mut da, k);
        T::gemm(n, m, k, dy.data(), 1, n as isize, a.data(), k as isize, 1, T::ZERO, &mut db, k);
    } else {
        // b: [k, n]; da = dy @ b^T ; db = a^T @ dy
        T::gemm(m, n, k, dy.data(), n as isize, 1, b.data(), 1, bs, T::ZERO, &mut da, k);
        T::gemm(k, m, n, a.data(), 1, k as isize, dy.data(), n as isize, 1, T::ZERO, &mut db, n);
    }
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

fn conv_geom(x: &[usize], w: &[usize]) -> Result<ConvGeom> {
    let (n, cin, h, wd) = dims4("conv2d", x)?;
    let (cout, wcin, kh, kw) = dims4("conv2d", w)?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but kernel expects {wcin} (input {x:?}, kernel {w:?})"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("same padding needs odd kernel sizes, got {kh}x{kw}"),
        ));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
    })
}

/// Output rows per im2col panel, sized so a panel stays in L2.
fn tile_rows(g: &ConvGeom) -> usize {
    const PANEL: usize = 64 * 1024;
    (PANEL / (g.k() * g.w)).clamp(1, g.h)
}

/// Lower output rows `y0..y1` of one sample `[cin, h, w]` to columns
/// `[cin*kh*kw, (y1-y0)*w]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], y0: usize, y1: usize, cols: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = g.hw();
    let len = (y1 - y0) * w;
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * len..(row + 1) * len];
                let dx = kx as isize - pw as isize;
                let lo = (-dx).max(0) as usize;
                let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for oy in y0..y1 {
                    let iy = oy as isize + ky as isize - ph as isize;
                    let out_row = &mut dst[(oy - y0) * w..(oy - y0 + 1) * w];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..lo].fill(T::ZERO);
                    let s0 = (lo as isize + dx) as usize;
                    out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    out_row[hi..].fill(T::ZERO);
                }
            }
        }
    }
}

/// Scatter-add a column panel for output rows `y0..y1` back into one sample.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], y0: usize, y1: usize, dx: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = g.hw();
    let len = (y1 - y0) * w;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * len..(row + 1) * len];
                let dxo = kx as isize - pw as isize;
                let lo = (-dxo).max(0) as usize;
                let hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let r = (oy - y0) * w;
                    let s = &src[r + lo..r + hi];
                    let base = iy as usize * w + (lo as isize + dxo) as usize;
                    for (d, &v) in plane[base..base + (hi - lo)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `dst [cols, rows] = src [rows, cols]^T`, in register-sized blocks.
fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 8;
    let (src, dst) = (&src[..rows * cols], &mut dst[..rows * cols]);
    let (rb, cb) = (rows / B * B, cols / B * B);
    for r0 in (0..rb).step_by(B) {
        for c0 in (0..cb).step_by(B) {
            let mut blk = [[T::ZERO; B]; B];
            for (i, row) in blk.iter_mut().enumerate() {
                row.copy_from_slice(&src[(r0 + i) * cols + c0..][..B]);
            }
            for j in 0..B {
                let d = &mut dst[(c0 + j) * rows + r0..][..B];
                for (i, v) in d.iter_mut().enumerate() {
                    *v = blk[i][j];
                }
            }
        }
    }
    for r in 0..rows {
        let c_from = if r < rb { cb } else { 0 };
        for c in c_from..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Stride-1 "same" convolution: `x [n, cin, h, w]`, `w [cout, cin, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape())?;
    let (k, hw) = (g.k(), g.hw());
    let rows = tile_rows(&g);
    let mut out = vec![T::ZERO; g.n * g.cout * hw];
    let mut cols = vec![T::ZERO; k * rows * g.w];
    let in_stride = g.cin * hw;
    let out_stride = g.cout * hw;
    for s in 0..g.n {
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        let os = &mut out[s * out_stride..(s + 1) * out_stride];
        for y0 in (0..g.h).step_by(rows) {
            let y1 = (y0 + rows).min(g.h);
            let len = (y1 - y0) * g.w;
            im2col(&g, xs, y0, y1, &mut cols);
            T::gemm(
                g.cout,
                k,
                len,
                w.data(),
                k as isize,
                1,
                &cols[..k * len],
                len as isize,
                1,
                T::ZERO,
                &mut os[y0 * g.w..],
                hw,
            );
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.h, g.w], out))
}

/// Returns `(dx, dw)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let g = conv_geom(x.shape(), w.shape()).expect("validated in forward");
    let (k, hw) = (g.k(), g.hw());
    let rows = tile_rows(&g);
    let in_stride = g.cin * hw;
    let out_stride = g.cout * hw;
    let mut dw = vec![T::ZERO; w.numel()];
    let mut dx = if need_dx {
        Some(vec![T::ZERO; x.numel()])
    } else {
        None
    };
    let mut cols = vec![T::ZERO; k * rows * g.w];
    let mut dcols = if need_dx { cols.clone() } else { Vec::new() };
    let mut cols_t = cols.clone();
    let mut first = true;
    for s in 0..g.n {
        let dys = &dy.data()[s * out_stride..(s + 1) * out_stride];
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        for y0 in (0..g.h).step_by(rows) {
            let y1 = (y0 + rows).min(g.h);
            let len = (y1 - y0) * g.w;
            let dyt = &dys[y0 * g.w..];
            im2col(&g, xs, y0, y1, &mut cols);
            // dw += dy_tile [cout, len] @ cols^T [len, k]
            transpose(&cols[..k * len], k, len, &mut cols_t);
            let beta = if first { T::ZERO } else { T::ONE };
            first = false;
            T::gemm(g.cout, len, k, dyt, hw as isize, 1, &cols_t[..k * len], k as isize, 1, beta, &mut dw, k);
            if let Some(dx) = dx.as_mut() {
                // dcols = w^T [k, cout] @ dy_tile [cout, len]
                T::gemm(k, g.cout, len, w.data(), 1, k as isize, dyt, hw as isize, 1, T::ZERO, &mut dcols[..k * len], len);
                col2im(&g, &dcols[..k * len], y0, y1, &mut dx[s * in_stride..(s + 1) * in_stride]);
            }
        }
    }
    (
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        Tensor::from_parts(w.shape().to_vec(), dw),
    )
}

/// Adds `b [c]` along axis 1 of `x [n, c, ...]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || b.shape().len() != 1 || b.shape()[0] != s[1] {
        return Err(Error::shape(
            "add_bias",
            format!("bias {:?} does not match axis 1 of {:?}", b.shape(), s),
        ));
    }
    let inner: usize = s[2..].iter().product();
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let bv = b.data()[i % s[1]];
        for v in chunk {
            *v += bv;
        }
    }
    Ok(Tensor::from_parts(s.to_vec(), out))
}

pub fn add_bias_backward<T: Scalar>(dy: &Tensor<T>, channels: usize) -> Tensor<T> {
    let inner: usize = dy.shape()[2..].iter().product();
    let mut acc = vec![0.0f64; channels];
    for (i, chunk) in dy.data().chunks(inner).enumerate() {
        acc[i % channels] += lane_sum(chunk, |v| v);
    }
    Tensor::from_parts(vec![channels], acc.into_iter().map(T::from_f64).collect())
}

pub fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("operands differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| {
        let mut v = x;
        v += y;
        v
    });
    Ok(Tensor::from_parts(a.shape().to_vec(), data.collect()))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a.shape(), b.shape())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| T::from_f64(x.to_f64() * y.to_f64()));
    Ok(Tensor::from_parts(a.shape().to_vec(), data.collect()))
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::from_f64(x.data().iter().map(|v| v.to_f64()).sum()))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::ZERO { v } else { T::ZERO })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// `Σ f(x_i)` in `f64` over eight interleaved lanes, combined in a fixed order.
#[inline]
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v.to_f64());
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a += f(v.to_f64());
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// `(Σ a_i, Σ a_i b_i)` in `f64` over eight interleaved lanes.
#[inline]
fn lane_sum_dot<T: Scalar>(a: &[T], b: &[T]) -> (f64, f64) {
    let mut s = [0.0f64; 8];
    let mut d = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            let g = x[i].to_f64();
            s[i] += g;
            d[i] += g * y[i].to_f64();
        }
    }
    for (i, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        let g = x.to_f64();
        s[i] += g;
        d[i] += g * y.to_f64();
    }
    let fold = |v: [f64; 8]| ((v[0] + v[4]) + (v[2] + v[6])) + ((v[1] + v[5]) + (v[3] + v[7]));
    (fold(s), fold(d))
}

/// Saved values of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    /// Batch mean per channel.
    pub mean: Vec<f64>,
    /// Biased batch variance per channel.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

fn bn_check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = dims4("batchnorm2d", x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "affine parameters {:?}/{:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((n, c, h * w))
}

/// Batch norm over `(n, h, w)` per channel using batch statistics.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let (n, c, hw) = bn_check(x, gamma, beta)?;
    let count = n * hw;
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += lane_sum(&xd[base..base + hw], |v| v);
        }
        let m = s / count as f64;
        let mut q = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            q += lane_sum(&xd[base..base + hw], |v| (v - m) * (v - m));
        }
        mean[ch] = m;
        var[ch] = q / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![T::ZERO; xd.len()];
    let mut out = vec![T::ZERO; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (m, is) = (mean[ch], inv_std[ch]);
            let (g, bt) = (gamma.data()[ch].to_f64(), beta.data()[ch].to_f64());
            for i in base..base + hw {
                let xh = (xd[i].to_f64() - m) * is;
                xhat[i] = T::from_f64(xh);
                out[i] = T::from_f64(g * xh + bt);
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), out),
        BatchNormSaved {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

/// Batch norm with frozen running statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[f32],
    running_var: &[f32],
) -> Result<Tensor<T>> {
    let (n, c, hw) = bn_check(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!("running statistics have {} entries for {c} channels", running_mean.len()),
        ));
    }
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for ch in 0..c {
        let is = 1.0 / (running_var[ch] as f64 + BN_EPS).sqrt();
        let scale = gamma.data()[ch].to_f64() * is;
        let shift = beta.data()[ch].to_f64() - running_mean[ch] as f64 * scale;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                out[i] = T::from_f64(xd[i].to_f64() * scale + shift);
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode batch norm.
pub fn batchnorm_train_backward<T: Scalar>(
    saved: &BatchNormSaved<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let (dyd, xh) = (dy.data(), saved.xhat.data());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (sb, sg) = lane_sum_dot(&dyd[base..base + hw], &xh[base..base + hw]);
            dbeta[ch] += sb;
            dgamma[ch] += sg;
        }
    }
    let cnt = saved.count as f64;
    let mut dx = vec![T::ZERO; dyd.len()];
    for ch in 0..c {
        let k = gamma.data()[ch].to_f64() * saved.inv_std[ch] / cnt;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let v = cnt * dyd[i].to_f64() - dbeta[ch] - xh[i].to_f64() * dgamma[ch];
                dx[i] = T::from_f64(k * v);
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_parts(vec![c], v.into_iter().map(T::from_f64).collect());
    (Tensor::from_parts(s.to_vec(), dx), to_t(dgamma), to_t(dbeta))
}

/// Returns `(dx, dgamma, dbeta)` for an eval-mode batch norm.
pub fn batchnorm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &[f32],
    running_var: &[f32],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let (xd, dyd) = (x.data(), dy.data());
    let mut dx = vec![T::ZERO; dyd.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ch in 0..c {
        let is = 1.0 / (running_var[ch] as f64 + BN_EPS).sqrt();
        let m = running_mean[ch] as f64;
        let scale = gamma.data()[ch].to_f64() * is;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let g = dyd[i].to_f64();
                dbeta[ch] += g;
                dgamma[ch] += g * (xd[i].to_f64() - m) * is;
                dx[i] = T::from_f64(g * scale);
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_parts(vec![c], v.into_iter().map(T::from_f64).collect());
    (Tensor::from_parts(s.to_vec(), dx), to_t(dgamma), to_t(dbeta))
}

/// 2x2 mean pooling with stride 2; odd trailing rows/columns are dropped.
pub fn mean_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("mean_pool2", x.shape())?;
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "mean_pool2",
            format!("spatial dims must be >= 2, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![T::ZERO; n * c * oh * ow];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &src[2 * oy * w..2 * oy * w + w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
            for ox in 0..ow {
                let s = r0[2 * ox].to_f64()
                    + r0[2 * ox + 1].to_f64()
                    + r1[2 * ox].to_f64()
                    + r1[2 * ox + 1].to_f64();
                dst[oy * ow + ox] = T::from_f64(0.25 * s);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn mean_pool2_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![T::ZERO; n * c * h * w];
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = T::from_f64(0.25 * g[oy * ow + ox].to_f64());
                d[2 * oy * w + 2 * ox] = v;
                d[2 * oy * w + 2 * ox + 1] = v;
                d[(2 * oy + 1) * w + 2 * ox] = v;
                d[(2 * oy + 1) * w + 2 * ox + 1] = v;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Head pooling of `[n, c, h, w]` to `[n, c]`: average over `h` (the mel
/// axis), then max plus mean over `w` (time). Returns the time argmax per
/// `(n, c)` for the backward pass; the first maximum wins ties.
pub fn global_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = dims4("global_pool", x.shape())?;
    let xd = x.data();
    let mut out = vec![T::ZERO; n * c];
    let mut arg = vec![0usize; n * c];
    let mut col = vec![0.0f64; w];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        col.fill(0.0);
        for row in src.chunks(w) {
            for (acc, v) in col.iter_mut().zip(row) {
                *acc += v.to_f64();
            }
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        let mut total = 0.0f64;
        for (i, acc) in col.iter_mut().enumerate() {
            *acc /= h as f64;
            total += *acc;
            if *acc > best {
                best = *acc;
                best_i = i;
            }
        }
        out[p] = T::from_f64(best + total / w as f64);
        arg[p] = best_i;
    }
    Ok((Tensor::from_parts(vec![n, c], out), arg))
}

pub fn global_pool_backward<T: Scalar>(in_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = vec![T::ZERO; n * c * h * w];
    for p in 0..n * c {
        let g = dy.data()[p].to_f64() / h as f64;
        let base = g / w as f64;
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for row in d.chunks_mut(w) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = T::from_f64(if i == argmax[p] { base + g } else { base });
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

fn check_labels(op: &'static str, n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(op, format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Per-row cross-entropy `-log softmax(logits)[label]`, computed in `f64`.
pub fn cross_entropy_rows<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, k) = dims2("softmax_cross_entropy", logits.shape())?;
    check_labels("softmax_cross_entropy", n, k, labels)?;
    Ok(logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln();
            lse - row[l].to_f64()
        })
        .collect())
}

/// Mean softmax cross-entropy and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let rows = cross_entropy_rows(logits, labels)?;
    let k = logits.shape()[1];
    let mut probs = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.to_f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        probs.extend(e.into_iter().map(|v| v / z));
    }
    let loss = rows.iter().sum::<f64>() / rows.len() as f64;
    Ok((loss, probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    shape: &[usize],
    probs: &[f64],
    labels: &[usize],
    dloss: f64,
) -> Tensor<T> {
    let (n, k) = (shape[0], shape[1]);
    let scale = dloss / n as f64;
    let mut g = Vec::with_capacity(n * k);
    for (r, &l) in labels.iter().enumerate() {
        for j in 0..k {
            let t = if j == l { 1.0 } else { 0.0 };
            g.push(T::from_f64((probs[r * k + j] - t) * scale));
        }
    }
    Tensor::from_parts(shape.to_vec(), g)
}
