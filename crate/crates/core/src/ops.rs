//! Forward and backward kernels for the primitive operations.
//!
//! These functions work on plain tensors. [`crate::tape::Tape`] records them
//! and replays the backward kernels in reverse order.

use crate::error::{config, shape, Error, Result};
use crate::exec::Exec;
use crate::tensor::{Dims, Tensor4};

/// Convolution weights `(out_c, in_c, kh, kw)` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor4,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(kernels: Tensor4, bias: Vec<f64>) -> Result<Self> {
        let p = Self { kernels, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.kernels.dims();
        check_conv_shapes(d, self.bias.len())
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dims().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.dims().c
    }
}

pub(crate) fn check_conv_shapes(k: Dims, bias_len: usize) -> Result<()> {
    if k.h % 2 == 0 || k.w % 2 == 0 {
        return config(format!("convolution kernel {}x{} must have odd sides", k.h, k.w));
    }
    if bias_len != k.n {
        return config(format!("{} biases for {} output channels", bias_len, k.n));
    }
    Ok(())
}

/// Strided view of a dense matrix: `(data, row stride, column stride)`.
type MatRef<'a> = (&'a [f64], isize, isize);

fn rows(data: &[f64], ld: usize) -> MatRef<'_> {
    (data, ld as isize, 1)
}

fn cols_t(data: &[f64], ld: usize) -> MatRef<'_> {
    (data, 1, ld as isize)
}

/// `C = A·B + beta·C` where `A` is `m×k`, `B` is `k×n` and `C` has row
/// stride `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64], ldc: usize) {
    let span = |rs: isize, cs: isize, r: usize, q: usize| {
        if r == 0 || q == 0 {
            0
        } else {
            (r - 1) * rs as usize + (q - 1) * cs as usize + 1
        }
    };
    assert!(a.0.len() >= span(a.1, a.2, m, k) && b.0.len() >= span(b.1, b.2, k, n));
    assert!(c.len() >= span(ldc as isize, 1, m, n));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every element addressed through the
    // given strides inside the corresponding slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Target element count of one unfolded row block, sized to stay in cache.
const BLOCK_ELEMS: usize = 1 << 16;

/// Output rows per unfolded block for a `ckk`-row column matrix.
fn block_rows(ckk: usize, h: usize, w: usize) -> usize {
    (BLOCK_ELEMS / (ckk * w).max(1)).clamp(1, h)
}

/// Unfolds output rows `r0..r1` of one zero-padded `(c, h, w)` sample into a
/// `(c*kh*kw, (r1-r0)*w)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, r0: usize, r1: usize, cols: &mut [f64]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = h * w;
    let bw = (r1 - r0) * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for di in 0..kh {
            for dj in 0..kw {
                let row = &mut cols[((ch * kh + di) * kw + dj) * bw..][..bw];
                // valid output columns j satisfy 0 <= j + dj - pw < w
                let j_lo = pw.saturating_sub(dj);
                let j_hi = (w + pw).saturating_sub(dj).min(w);
                for i in r0..r1 {
                    let out = &mut row[(i - r0) * w..(i - r0 + 1) * w];
                    let si = i as isize + di as isize - ph as isize;
                    if si < 0 || si >= h as isize || j_lo >= j_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    out[..j_lo].fill(0.0);
                    out[j_hi..].fill(0.0);
                    let off = j_lo + dj - pw;
                    out[j_lo..j_hi].copy_from_slice(&src[off..off + (j_hi - j_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds the column block for rows `r0..r1` into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, r0: usize, r1: usize, x: &mut [f64]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = h * w;
    let bw = (r1 - r0) * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for di in 0..kh {
            for dj in 0..kw {
                let row = &cols[((ch * kh + di) * kw + dj) * bw..][..bw];
                let j_lo = pw.saturating_sub(dj);
                let j_hi = (w + pw).saturating_sub(dj).min(w);
                if j_lo >= j_hi {
                    continue;
                }
                for i in r0..r1 {
                    let si = i as isize + di as isize - ph as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let off = j_lo + dj - pw;
                    let dst = &mut plane[si as usize * w + off..][..j_hi - j_lo];
                    let src = &row[(i - r0) * w + j_lo..(i - r0) * w + j_hi];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn conv_check(x: Dims, k: Dims, bias_len: usize) -> Result<()> {
    check_conv_shapes(k, bias_len)?;
    if x.c != k.c {
        return config(format!(
            "convolution expects {} input channels, got {} (input {x})",
            k.c, x.c
        ));
    }
    Ok(())
}

pub(crate) fn conv2d_forward(x: &Tensor4, k: &Tensor4, bias: &[f64], exec: Exec) -> Result<Tensor4> {
    let (xd, kd) = (x.dims(), k.dims());
    conv_check(xd, kd, bias.len())?;
    let out_d = Dims::new(xd.n, kd.n, xd.h, xd.w);
    let mut out = Tensor4::zeros(out_d);
    let hw = xd.plane();
    let ckk = kd.c * kd.h * kd.w;
    let pointwise = kd.h == 1 && kd.w == 1;
    exec.for_each_chunk(out.data_mut(), out_d.sample_len(), |s, y| {
        for (o, b) in bias.iter().enumerate() {
            y[o * hw..(o + 1) * hw].fill(*b);
        }
        let xs = x.sample(s);
        if pointwise {
            gemm(kd.n, ckk, hw, rows(k.data(), ckk), rows(xs, hw), 1.0, y, hw);
        } else {
            let br = block_rows(ckk, xd.h, xd.w);
            let mut cols = vec![0.0; ckk * br * xd.w];
            for r0 in (0..xd.h).step_by(br) {
                let r1 = (r0 + br).min(xd.h);
                let bw = (r1 - r0) * xd.w;
                im2col(xs, xd.c, xd.h, xd.w, kd.h, kd.w, r0, r1, &mut cols);
                gemm(kd.n, ckk, bw, rows(k.data(), ckk), rows(&cols, bw), 1.0, &mut y[r0 * xd.w..], hw);
            }
        }
    });
    Ok(out)
}

/// Gradients of a same-padded convolution: `(d_input, d_kernels, d_bias)`.
pub(crate) fn conv2d_backward(
    x: &Tensor4,
    k: &Tensor4,
    dy: &Tensor4,
    exec: Exec,
) -> (Tensor4, Tensor4, Vec<f64>) {
    let (xd, kd) = (x.dims(), k.dims());
    let hw = xd.plane();
    let ckk = kd.c * kd.h * kd.w;
    let pointwise = kd.h == 1 && kd.w == 1;
    let mut dx = Tensor4::zeros(xd);
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = exec.map(xd.n, |s| {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        let mut dk = vec![0.0; kd.n * ckk];
        let db: Vec<f64> = (0..kd.n)
            .map(|o| dys[o * hw..(o + 1) * hw].iter().sum())
            .collect();
        if pointwise {
            gemm(kd.n, hw, ckk, rows(dys, hw), cols_t(xs, hw), 0.0, &mut dk, ckk);
        } else {
            let br = block_rows(ckk, xd.h, xd.w);
            let mut cols = vec![0.0; ckk * br * xd.w];
            for r0 in (0..xd.h).step_by(br) {
                let r1 = (r0 + br).min(xd.h);
                let bw = (r1 - r0) * xd.w;
                im2col(xs, xd.c, xd.h, xd.w, kd.h, kd.w, r0, r1, &mut cols);
                gemm(kd.n, bw, ckk, rows(&dys[r0 * xd.w..], hw), cols_t(&cols, bw), 1.0, &mut dk, ckk);
            }
        }
        (dk, db)
    });
    exec.for_each_chunk(dx.data_mut(), xd.sample_len(), |s, dxs| {
        let dys = dy.sample(s);
        if pointwise {
            gemm(ckk, kd.n, hw, cols_t(k.data(), ckk), rows(dys, hw), 0.0, dxs, hw);
        } else {
            let br = block_rows(ckk, xd.h, xd.w);
            let mut dcols = vec![0.0; ckk * br * xd.w];
            for r0 in (0..xd.h).step_by(br) {
                let r1 = (r0 + br).min(xd.h);
                let bw = (r1 - r0) * xd.w;
                gemm(ckk, kd.n, bw, cols_t(k.data(), ckk), rows(&dys[r0 * xd.w..], hw), 0.0, &mut dcols, bw);
                col2im(&dcols, xd.c, xd.h, xd.w, kd.h, kd.w, r0, r1, dxs);
            }
        }
    });
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; kd.n];
    for (sk, sb) in &per_sample {
        for (a, b) in dk.iter_mut().zip(sk) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(sb) {
            *a += b;
        }
    }
    (dx, Tensor4::from_vec(kd, dk).expect("kernel dims"), db)
}

/// Same-size ("same" zero padding) 2-D convolution with bias.
pub fn conv2d_same(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    conv2d_forward(input, &params.kernels, &params.bias, Exec::default())
}

pub fn relu(input: &Tensor4) -> Tensor4 {
    input.map(|v| v.max(0.0))
}

pub(crate) fn relu_backward(out: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(out.dims(), data).expect("same dims")
}

pub(crate) fn pool_out_len(len: usize, size: usize, stride: usize) -> usize {
    (len - size) / stride + 1
}

/// Max pooling; returns the pooled tensor and, per output cell, the flat
/// index of the selected input cell inside its plane.
pub(crate) fn maxpool_forward(x: &Tensor4, size: usize, stride: usize) -> Result<(Tensor4, Vec<u32>)> {
    let d = x.dims();
    if size == 0 || stride == 0 {
        return config("pool size and stride must be positive");
    }
    if d.h < size || d.w < size {
        return config(format!("{size}x{size} pooling window exceeds {}x{} input", d.h, d.w));
    }
    let (oh, ow) = (pool_out_len(d.h, size, stride), pool_out_len(d.w, size, stride));
    let od = Dims::new(d.n, d.c, oh, ow);
    let mut out = Vec::with_capacity(od.len());
    let mut arg = Vec::with_capacity(od.len());
    for n in 0..d.n {
        for c in 0..d.c {
            let p = x.plane(n, c);
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0usize;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = (oi * stride + di) * d.w + oj * stride + dj;
                            // strict comparison keeps the first maximum in row-major order
                            if p[idx] > best {
                                best = p[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(at as u32);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(od, out)?, arg))
}

pub(crate) fn maxpool_backward(in_dims: Dims, argmax: &[u32], dy: &Tensor4) -> Tensor4 {
    let mut dx = Tensor4::zeros(in_dims);
    let od = dy.dims();
    for n in 0..od.n {
        for c in 0..od.c {
            let g = dy.plane(n, c);
            let base = (n * in_dims.c + c) * in_dims.plane();
            let offs = &argmax[(n * od.c + c) * od.plane()..][..od.plane()];
            let dst = dx.data_mut();
            for (gi, &a) in g.iter().zip(offs) {
                dst[base + a as usize] += gi;
            }
        }
    }
    dx
}

pub fn maxpool(input: &Tensor4, size: usize, stride: usize) -> Result<Tensor4> {
    Ok(maxpool_forward(input, size, stride)?.0)
}

/// Sparse linear resampling along one axis: each output index is a weighted
/// combination of a few input indices.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// Nearest-neighbour replication to `out_len`. When `out_len` is a
    /// multiple of `in_len` this is plain tiling; otherwise an output cell
    /// that straddles two source tiles takes the overlap-weighted mix.
    pub fn tile(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|i| {
                // output cell i spans [i*in, (i+1)*in); source s spans [s*out, (s+1)*out)
                let (lo, hi) = (i * in_len, (i + 1) * in_len);
                let first = lo / out_len;
                let last = (hi - 1) / out_len;
                (first..=last)
                    .map(|s| {
                        let overlap = hi.min((s + 1) * out_len) - lo.max(s * out_len);
                        (s, overlap as f64 / in_len as f64)
                    })
                    .collect()
            })
            .collect();
        Self { in_len, taps }
    }

    /// Corner-aligned linear interpolation to `out_len`.
    pub fn linear(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|i| {
                if in_len == 1 || out_len == 1 {
                    return vec![(0, 1.0)];
                }
                let pos = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
                let s = (pos.floor() as usize).min(in_len - 2);
                let t = pos - s as f64;
                if t == 0.0 {
                    vec![(s, 1.0)]
                } else if t == 1.0 {
                    vec![(s + 1, 1.0)]
                } else {
                    vec![(s, 1.0 - t), (s + 1, t)]
                }
            })
            .collect();
        Self { in_len, taps }
    }
}

pub(crate) fn resize_forward(x: &Tensor4, rows: &AxisMap, cols: &AxisMap) -> Result<Tensor4> {
    let d = x.dims();
    if rows.in_len != d.h || cols.in_len != d.w {
        return shape(format!(
            "resampler built for {}x{} applied to {}x{}",
            rows.in_len, cols.in_len, d.h, d.w
        ));
    }
    let od = Dims::new(d.n, d.c, rows.out_len(), cols.out_len());
    let mut out = Tensor4::zeros(od);
    let mut tmp = vec![0.0; d.h * od.w];
    for n in 0..d.n {
        for c in 0..d.c {
            let p = x.plane(n, c);
            for i in 0..d.h {
                for (j, taps) in cols.taps.iter().enumerate() {
                    tmp[i * od.w + j] = taps.iter().map(|&(s, wt)| wt * p[i * d.w + s]).sum();
                }
            }
            let o = out.plane_mut(n, c);
            for (i, taps) in rows.taps.iter().enumerate() {
                for j in 0..od.w {
                    o[i * od.w + j] = taps.iter().map(|&(s, wt)| wt * tmp[s * od.w + j]).sum();
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn resize_backward(in_dims: Dims, rows: &AxisMap, cols: &AxisMap, dy: &Tensor4) -> Tensor4 {
    let od = dy.dims();
    let mut dx = Tensor4::zeros(in_dims);
    let mut tmp = vec![0.0; in_dims.h * od.w];
    for n in 0..od.n {
        for c in 0..od.c {
            let g = dy.plane(n, c);
            tmp.fill(0.0);
            for (i, taps) in rows.taps.iter().enumerate() {
                for &(s, wt) in taps {
                    for j in 0..od.w {
                        tmp[s * od.w + j] += wt * g[i * od.w + j];
                    }
                }
            }
            let dp = dx.plane_mut(n, c);
            for i in 0..in_dims.h {
                for (j, taps) in cols.taps.iter().enumerate() {
                    for &(s, wt) in taps {
                        dp[i * in_dims.w + s] += wt * tmp[i * od.w + j];
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by tiling each cell into a `factor×factor` block.
pub fn upsample_tile(input: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor < 1 {
        return config("upsampling factor must be at least 1");
    }
    let d = input.dims();
    resize_forward(
        input,
        &AxisMap::tile(d.h, d.h * factor),
        &AxisMap::tile(d.w, d.w * factor),
    )
}

/// Corner-aligned bilinear upsampling by `factor`.
pub fn upsample_bilinear(input: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor < 1 {
        return config("upsampling factor must be at least 1");
    }
    let d = input.dims();
    resize_forward(
        input,
        &AxisMap::linear(d.h, d.h * factor),
        &AxisMap::linear(d.w, d.w * factor),
    )
}

pub(crate) fn concat_forward(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concatenation of zero tensors".into()))?
        .dims();
    for p in parts {
        let d = p.dims();
        if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
            return shape(format!("cannot concatenate {d} with {first} along channels"));
        }
    }
    let c: usize = parts.iter().map(|p| p.dims().c).sum();
    let od = Dims::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(od.len());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor4::from_vec(od, data)
}

pub(crate) fn concat_backward(part_dims: &[Dims], dy: &Tensor4) -> Vec<Tensor4> {
    let mut grads: Vec<Vec<f64>> = part_dims.iter().map(|d| Vec::with_capacity(d.len())).collect();
    for n in 0..dy.dims().n {
        let mut off = 0;
        let s = dy.sample(n);
        for (g, d) in grads.iter_mut().zip(part_dims) {
            g.extend_from_slice(&s[off..off + d.sample_len()]);
            off += d.sample_len();
        }
    }
    grads
        .into_iter()
        .zip(part_dims)
        .map(|(g, d)| Tensor4::from_vec(*d, g).expect("split dims"))
        .collect()
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    concat_forward(&[a, b])
}

pub(crate) fn weighted_sum_check(map_dims: &[Dims], branches: &[usize], alpha: Dims) -> Result<Dims> {
    let first = *map_dims
        .first()
        .ok_or_else(|| Error::Config("weighted sum over zero branches".into()))?;
    if map_dims.len() != branches.len() {
        return config("branch index list does not match the map list");
    }
    for d in map_dims {
        if *d != first {
            return shape(format!("branch maps disagree: {d} vs {first}"));
        }
    }
    if alpha.c != first.c || alpha.h != first.h || alpha.w != first.w {
        return config(format!("weight grids {alpha} do not fit branch maps {first}"));
    }
    if let Some(&b) = branches.iter().find(|&&b| b >= alpha.n) {
        return config(format!("branch {b} has no weight grid ({} grids)", alpha.n));
    }
    Ok(first)
}

/// `out[n,k] = Σ_i alpha[branches[i],k] ⊙ maps[i][n,k]`.
pub(crate) fn weighted_sum_forward(maps: &[&Tensor4], branches: &[usize], alpha: &Tensor4) -> Result<Tensor4> {
    let dims: Vec<Dims> = maps.iter().map(|m| m.dims()).collect();
    let d = weighted_sum_check(&dims, branches, alpha.dims())?;
    let mut out = Tensor4::zeros(d);
    for (m, &r) in maps.iter().zip(branches) {
        for n in 0..d.n {
            for k in 0..d.c {
                let a = alpha.plane(r, k);
                let src = m.plane(n, k);
                let dst = out.plane_mut(n, k);
                for ((o, &s), &w) in dst.iter_mut().zip(src).zip(a) {
                    *o += w * s;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients for each branch map and for the full weight-grid tensor.
pub(crate) fn weighted_sum_backward(
    maps: &[&Tensor4],
    branches: &[usize],
    alpha: &Tensor4,
    dy: &Tensor4,
) -> (Vec<Tensor4>, Tensor4) {
    let d = dy.dims();
    let mut dalpha = Tensor4::zeros(alpha.dims());
    let mut dmaps = Vec::with_capacity(maps.len());
    for (m, &r) in maps.iter().zip(branches) {
        let mut dm = Tensor4::zeros(d);
        for n in 0..d.n {
            for k in 0..d.c {
                let g = dy.plane(n, k);
                let a = alpha.plane(r, k);
                for ((o, &gi), &w) in dm.plane_mut(n, k).iter_mut().zip(g).zip(a) {
                    *o = gi * w;
                }
                let src = m.plane(n, k);
                for ((o, &gi), &s) in dalpha.plane_mut(r, k).iter_mut().zip(g).zip(src) {
                    *o += gi * s;
                }
            }
        }
        dmaps.push(dm);
    }
    (dmaps, dalpha)
}

/// Per-branch, per-keypoint weighted sum of score maps. `alpha` holds one
/// `h×w` grid per `(branch, keypoint)`: dims `(R, K, h, w)`.
pub fn weighted_sum_maps(maps: &[Tensor4], alpha: &Tensor4) -> Result<Tensor4> {
    if maps.len() != alpha.dims().n {
        return config(format!(
            "{} branch maps but {} weight-grid branches",
            maps.len(),
            alpha.dims().n
        ));
    }
    let refs: Vec<&Tensor4> = maps.iter().collect();
    let branches: Vec<usize> = (0..maps.len()).collect();
    weighted_sum_forward(&refs, &branches, alpha)
}

/// Softmax over the spatial positions of every `(n, k)` plane.
pub fn spatial_softmax(logits: &Tensor4) -> Tensor4 {
    let d = logits.dims();
    let mut out = Tensor4::zeros(d);
    for n in 0..d.n {
        for k in 0..d.c {
            softmax_plane(logits.plane(n, k), out.plane_mut(n, k));
        }
    }
    out
}

pub(crate) fn softmax_plane(z: &[f64], p: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (pi, &zi) in p.iter_mut().zip(z) {
        *pi = (zi - max).exp();
        total += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= total;
    }
}

pub(crate) fn softmax_backward(p: &Tensor4, dp: &Tensor4) -> Tensor4 {
    let d = p.dims();
    let mut dz = Tensor4::zeros(d);
    for n in 0..d.n {
        for k in 0..d.c {
            let pp = p.plane(n, k);
            let g = dp.plane(n, k);
            let inner: f64 = pp.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((o, &pi), &gi) in dz.plane_mut(n, k).iter_mut().zip(pp).zip(g) {
                *o = pi * (gi - inner);
            }
        }
    }
    dz
}

/// Smallest probability whose logarithm enters the loss.
pub const PROB_FLOOR: f64 = 1e-30;

/// One term of the location likelihood: which sample/keypoint plane, the
/// target cell and the weight it carries in the sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllTerm {
    pub n: usize,
    pub k: usize,
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

/// `Σ weight·(−log softmax(z)[row,col])` with the log floored at
/// `log(PROB_FLOOR)`. Returns the loss, the spatial softmax of every plane
/// and the gradient with respect to `z`.
pub(crate) fn nll_forward_backward(z: &Tensor4, terms: &[NllTerm]) -> Result<(f64, Tensor4, Tensor4)> {
    let d = z.dims();
    let p = spatial_softmax(z);
    let mut dz = Tensor4::zeros(d);
    let mut loss = 0.0;
    let floor = PROB_FLOOR.ln();
    for t in terms {
        if t.n >= d.n || t.k >= d.c || t.row >= d.h || t.col >= d.w {
            return Err(Error::Input(format!(
                "target ({}, {}) for sample {} keypoint {} lies outside {}x{} maps",
                t.row, t.col, t.n, t.k, d.h, d.w
            )));
        }
        if t.weight == 0.0 {
            continue;
        }
        let pl = p.plane(t.n, t.k);
        let at = t.row * d.w + t.col;
        let logp = pl[at].ln();
        if logp <= floor {
            loss -= t.weight * floor;
            continue;
        }
        loss -= t.weight * logp;
        let g = dz.plane_mut(t.n, t.k);
        for (gi, &pi) in g.iter_mut().zip(pl) {
            *gi += t.weight * pi;
        }
        g[at] -= t.weight;
    }
    Ok((loss, p, dz))
}
