//! Batched layer kernels on raw slices. Activations are `[n, c, h, w]`
//! row-major throughout.

use super::config::pooled;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub m: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.m) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.m) / self.stride + 1
    }

    /// Output indices `o` in `lo..hi` read input `o * stride + k - pad` inside `0..len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi = if len + self.pad > k {
            ((len - 1 + self.pad - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds one `[c, h, w]` sample into a `[c·m·m, oh·ow]` column matrix
/// (zero where the window leaves the padded image).
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    col.fill(0.0);
    for c in 0..g.c {
        let xin = &x[c * g.h * g.w..][..g.h * g.w];
        for a in 0..g.m {
            let (ylo, yhi) = g.valid(a, g.h, oh);
            for b in 0..g.m {
                let (xlo, xhi) = g.valid(b, g.w, ow);
                let dst = &mut col[((c * g.m + a) * g.m + b) * p..][..p];
                for oy in ylo..yhi {
                    let row = &xin[(oy * g.stride + a - g.pad) * g.w..][..g.w];
                    let drow = &mut dst[oy * ow..][..ow];
                    if g.stride == 1 {
                        let off = b as isize - g.pad as isize;
                        let src = &row[(xlo as isize + off) as usize..(xhi as isize + off) as usize];
                        drow[xlo..xhi].copy_from_slice(src);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = row[ox * g.stride + b - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adds the column-matrix gradient back onto the `[c, h, w]` input gradient.
fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c {
        let dxin = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for a in 0..g.m {
            let (ylo, yhi) = g.valid(a, g.h, oh);
            for b in 0..g.m {
                let (xlo, xhi) = g.valid(b, g.w, ow);
                let src = &col[((c * g.m + a) * g.m + b) * p..][..p];
                for oy in ylo..yhi {
                    let row = &mut dxin[(oy * g.stride + a - g.pad) * g.w..][..g.w];
                    let srow = &src[oy * ow..][..ow];
                    for ox in xlo..xhi {
                        row[ox * g.stride + b - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// `C = alpha·op(A)·op(B) + beta·C` on row-major slices; `ta`/`tb` transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major (or transposed) blocks whose lengths were just checked.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let p = g.out_h() * g.out_w();
    let kk = g.c * g.m * g.m;
    let mut out = vec![0.0; g.n * g.f * p];
    let mut col = vec![0.0; kk * p];
    for n in 0..g.n {
        im2col(g, &x[n * g.c * g.h * g.w..][..g.c * g.h * g.w], &mut col);
        let o = &mut out[n * g.f * p..][..g.f * p];
        gemm(g.f, kk, p, wt, false, &col, false, 0.0, o);
        if let Some(b) = bias {
            for (f, plane) in o.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[f]);
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.out_h() * g.out_w();
    let kk = g.c * g.m * g.m;
    let sample = g.c * g.h * g.w;
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; g.f];
    let mut col = vec![0.0; kk * p];
    let mut dcol = vec![0.0; kk * p];
    for n in 0..g.n {
        let d = &dout[n * g.f * p..][..g.f * p];
        for (f, plane) in d.chunks(p).enumerate() {
            db[f] += plane.iter().sum::<f64>();
        }
        im2col(g, &x[n * sample..][..sample], &mut col);
        gemm(g.f, p, kk, d, false, &col, true, 1.0, &mut dw);
        if need_dx {
            gemm(kk, g.f, p, wt, true, d, false, 0.0, &mut dcol);
            col2im(g, &dcol, &mut dx[n * sample..][..sample]);
        }
    }
    (dx, dw, db)
}

pub(crate) const BN_EPS: f64 = 1e-5;

pub(crate) struct BnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalises each channel over the batch and spatial positions.
pub(crate) fn batchnorm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    scale: &[f64],
    shift: &[f64],
) -> (Vec<f64>, BnCache) {
    let count = (n * spatial) as f64;
    let mut out = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let plane = |i: usize| (i * c + ch) * spatial;
        let mut mean = 0.0;
        for i in 0..n {
            mean += x[plane(i)..][..spatial].iter().sum::<f64>();
        }
        mean /= count;
        let mut var = 0.0;
        for i in 0..n {
            var += x[plane(i)..][..spatial].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= count;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = inv;
        for i in 0..n {
            let p = plane(i);
            for k in p..p + spatial {
                let xh = (x[k] - mean) * inv;
                x_hat[k] = xh;
                out[k] = scale[ch] * xh + shift[ch];
            }
        }
    }
    (out, BnCache { x_hat, inv_std })
}

/// Returns `(d_input, d_scale, d_shift)`.
pub(crate) fn batchnorm_backward(
    cache: &BnCache,
    dout: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    scale: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (n * spatial) as f64;
    let mut dx = vec![0.0; dout.len()];
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for ch in 0..c {
        let plane = |i: usize| (i * c + ch) * spatial;
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for i in 0..n {
            let p = plane(i);
            for k in p..p + spatial {
                sum_dy += dout[k];
                sum_dy_xh += dout[k] * cache.x_hat[k];
            }
        }
        dshift[ch] = sum_dy;
        dscale[ch] = sum_dy_xh;
        let coef = scale[ch] * cache.inv_std[ch] / count;
        for i in 0..n {
            let p = plane(i);
            for k in p..p + spatial {
                dx[k] = coef * (count * dout[k] - sum_dy - cache.x_hat[k] * sum_dy_xh);
            }
        }
    }
    (dx, dscale, dshift)
}

/// Non-overlapping `k×k` max pooling (see [`pooled`] for the output size). Returns the
/// pooled map and, per output, the flat input index that won (first maximum
/// in scan order).
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (pooled(h, k), pooled(w, k));
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * k * w + ox * k;
                for iy in oy * k..((oy + 1) * k).min(h) {
                    for ix in ox * k..((ox + 1) * k).min(w) {
                        let i = base + iy * w + ix;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

/// Adaptive average-pool bin `[start, end)` of output cell `i` out of `out` over `len` inputs.
pub(crate) fn adaptive_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    ((i * len) / out, ((i + 1) * len).div_ceil(out))
}

pub(crate) fn adaptive_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, ow, w);
                let mut s = 0.0;
                for iy in y0..y1 {
                    s += x[base + iy * w + x0..base + iy * w + x1].iter().sum::<f64>();
                }
                out[(p * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub(crate) fn adaptive_pool_backward(
    dout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, ow, w);
                let g = dout[(p * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for v in &mut dx[base + iy * w + x0..base + iy * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// `y[n, o] = Σ_i w[o, i] x[n, i] + b[o]`
pub(crate) fn linear_forward(
    x: &[f64],
    n: usize,
    inputs: usize,
    outputs: usize,
    wt: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut y = vec![0.0; n * outputs];
    for s in 0..n {
        let xs = &x[s * inputs..][..inputs];
        for o in 0..outputs {
            let row = &wt[o * inputs..][..inputs];
            y[s * outputs + o] =
                crate::tensor::dot(row, xs) + bias.map_or(0.0, |b| b[o]);
        }
    }
    y
}

pub(crate) fn linear_backward(
    x: &[f64],
    dout: &[f64],
    n: usize,
    inputs: usize,
    outputs: usize,
    wt: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * inputs];
    let mut dw = vec![0.0; outputs * inputs];
    let mut db = vec![0.0; outputs];
    for s in 0..n {
        let xs = &x[s * inputs..][..inputs];
        let dxs = &mut dx[s * inputs..][..inputs];
        for o in 0..outputs {
            let g = dout[s * outputs + o];
            db[o] += g;
            let row = &wt[o * inputs..][..inputs];
            let drow = &mut dw[o * inputs..][..inputs];
            for i in 0..inputs {
                drow[i] += g * xs[i];
                dxs[i] += g * row[i];
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn softmax_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * k];
    for s in 0..n {
        let row = &logits[s * k..][..k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&u| (u - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..k {
            p[s * k + j] = exps[j] / z;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges_cover_in_bounds_reads() {
        for (h, m, s, p) in [(5, 3, 1, 0), (8, 3, 2, 1), (7, 4, 3, 2), (1, 3, 2, 1)] {
            let g = ConvGeom { n: 1, c: 1, h, w: h, f: 1, m, stride: s, pad: p };
            let oh = g.out_h();
            for k in 0..m {
                let (lo, hi) = g.valid(k, h, oh);
                for o in 0..oh {
                    let i = (o * s + k) as isize - p as isize;
                    let inside = i >= 0 && (i as usize) < h;
                    assert_eq!(inside, (lo..hi).contains(&o), "h={h} m={m} s={s} p={p} k={k} o={o}");
                }
            }
        }
    }

    #[test]
    fn adaptive_bins_cover_input() {
        for (out, len) in [(4, 1), (6, 5), (4, 30), (3, 3), (6, 7)] {
            for i in 0..out {
                let (a, b) = adaptive_bin(i, out, len);
                assert!(a < b && b <= len);
            }
            assert_eq!(adaptive_bin(0, out, len).0, 0);
            assert_eq!(adaptive_bin(out - 1, out, len).1, len);
        }
    }

    #[test]
    fn maxpool_floor_with_small_dims() {
        // 2x3 input: the trailing column is dropped
        let x = [1.0, 5.0, 2.0, 3.0, 4.0, 9.0];
        let (y, arg) = maxpool_forward(&x, 1, 2, 3, 2);
        assert_eq!(y, vec![5.0]);
        assert_eq!(arg, vec![1]);
        // 1x3 input: the single row is pooled whole
        let (y, _) = maxpool_forward(&[1.0, 7.0, 2.0], 1, 1, 3, 2);
        assert_eq!(y, vec![7.0]);
    }
}
