//! Slice-level numeric kernels behind the tape ops.
//!
//! Every reduction runs in a fixed order so that results are bit-identical
//! from run to run.

use alloc::vec;
use alloc::vec::Vec;

use super::Dims5;

pub const KERNEL_TAPS: usize = 27;

/// Eight-lane dot product with a fixed reduction tree.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn sum(a: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.chunks_exact(8);
    let rem = chunks.remainder();
    for x in chunks {
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    let mut tail = 0.0f32;
    for x in rem {
        tail += x;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Logistic function, clamped into the open unit interval.
pub fn sigmoid_scalar(x: f32) -> f32 {
    const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;
    let y = if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, BELOW_ONE)
}

/// `c[m, n] += a[m, k] * b[k, n]`
pub(crate) fn gemm_nn(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    if n >= 8 {
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let alpha = a[i * k + p];
                if alpha != 0.0 {
                    axpy(row, alpha, &b[p * n..(p + 1) * n]);
                }
            }
        }
    } else {
        // Narrow outputs (deep layers at 1-2 voxels): transpose b so the
        // long k axis is contiguous.
        let mut bt = vec![0.0f32; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m, n] += a[k, m]^T * b[k, n]`
pub(crate) fn gemm_tn(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let alpha = a[p * m + i];
            if alpha != 0.0 {
                axpy(&mut c[i * n..(i + 1) * n], alpha, brow);
            }
        }
    }
}

/// Unfolds one `[C, D, H, W]` volume into `[C * 27, D * H * W]` columns for a
/// 3x3x3 kernel with unit stride and zero padding 1.
pub(crate) fn im2col(input: &[f32], c: usize, d: usize, h: usize, w: usize, cols: &mut [f32]) {
    let n = d * h * w;
    debug_assert_eq!(cols.len(), c * KERNEL_TAPS * n);
    for ci in 0..c {
        let plane = &input[ci * n..(ci + 1) * n];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ((ci * 3 + kd) * 3 + kh) * 3 + kw;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for z in 0..d {
                        let sz = z as isize + kd as isize - 1;
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let src = &plane[(sz as usize * h + sy as usize) * w..][..w];
                            shift_copy(out, src, kw);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn shift_copy(out: &mut [f32], src: &[f32], kw: usize) {
    let w = out.len();
    match kw {
        0 => {
            out[0] = 0.0;
            out[1..].copy_from_slice(&src[..w - 1]);
        }
        1 => out.copy_from_slice(src),
        _ => {
            out[..w - 1].copy_from_slice(&src[1..]);
            out[w - 1] = 0.0;
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the volume.
pub(crate) fn col2im_add(cols: &[f32], c: usize, d: usize, h: usize, w: usize, grad: &mut [f32]) {
    let n = d * h * w;
    for ci in 0..c {
        let plane = &mut grad[ci * n..(ci + 1) * n];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ((ci * 3 + kd) * 3 + kh) * 3 + kw;
                    let srcrow = &cols[row * n..(row + 1) * n];
                    for z in 0..d {
                        let sz = z as isize + kd as isize - 1;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let g = &srcrow[(z * h + y) * w..(z * h + y + 1) * w];
                            let dst = &mut plane[(sz as usize * h + sy as usize) * w..][..w];
                            match kw {
                                0 => {
                                    for x in 1..w {
                                        dst[x - 1] += g[x];
                                    }
                                }
                                1 => {
                                    for x in 0..w {
                                        dst[x] += g[x];
                                    }
                                }
                                _ => {
                                    for x in 0..w - 1 {
                                        dst[x + 1] += g[x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(input: &[f32], dims: Dims5, weight: &[f32], bias: &[f32], cout: usize) -> Vec<f32> {
    let n = dims.spatial();
    let k = dims.c * KERNEL_TAPS;
    let mut out = vec![0.0f32; dims.b * cout * n];
    let mut cols = vec![0.0f32; k * n];
    for b in 0..dims.b {
        let x = &input[b * dims.c * n..(b + 1) * dims.c * n];
        im2col(x, dims.c, dims.d, dims.h, dims.w, &mut cols);
        let y = &mut out[b * cout * n..(b + 1) * cout * n];
        for (co, row) in y.chunks_exact_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        gemm_nn(cout, n, k, weight, &cols, y);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv3d_backward(
    input: &[f32],
    dims: Dims5,
    weight: &[f32],
    cout: usize,
    grad_out: &[f32],
    need_input: bool,
) -> ConvGrads {
    let n = dims.spatial();
    let k = dims.c * KERNEL_TAPS;
    let mut gw = vec![0.0f32; cout * k];
    let mut gb = vec![0.0f32; cout];
    let mut gx = need_input.then(|| vec![0.0f32; input.len()]);
    let mut cols = vec![0.0f32; k * n];
    let mut gcols = if need_input { vec![0.0f32; k * n] } else { Vec::new() };
    for b in 0..dims.b {
        let x = &input[b * dims.c * n..(b + 1) * dims.c * n];
        let gy = &grad_out[b * cout * n..(b + 1) * cout * n];
        im2col(x, dims.c, dims.d, dims.h, dims.w, &mut cols);
        gemm_nt(cout, k, n, gy, &cols, &mut gw);
        for (co, row) in gy.chunks_exact(n).enumerate() {
            gb[co] += sum(row);
        }
        if let Some(gx) = gx.as_mut() {
            gcols.fill(0.0);
            gemm_tn(k, n, cout, weight, gy, &mut gcols);
            let gxb = &mut gx[b * dims.c * n..(b + 1) * dims.c * n];
            col2im_add(&gcols, dims.c, dims.d, dims.h, dims.w, gxb);
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// 2x2x2 max pooling with stride 2. Returns the pooled values and, per
/// output voxel, the flat input index of the first maximum in scan order.
pub(crate) fn maxpool3d_forward(input: &[f32], dims: Dims5) -> (Vec<f32>, Vec<u32>) {
    let (od, oh, ow) = (dims.d / 2, dims.h / 2, dims.w / 2);
    let planes = dims.b * dims.c;
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    let n = dims.spatial();
    for p in 0..planes {
        let base = p * n;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base + ((2 * z + dz) * dims.h + 2 * y + dy) * dims.w + 2 * x + dx;
                                let v = input[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool3d_forward(input: &[f32], dims: Dims5) -> Vec<f32> {
    let (od, oh, ow) = (dims.d / 2, dims.h / 2, dims.w / 2);
    let planes = dims.b * dims.c;
    let n = dims.spatial();
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    for p in 0..planes {
        let base = p * n;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0f32;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += input[base + ((2 * z + dz) * dims.h + 2 * y + dy) * dims.w + 2 * x + dx];
                            }
                        }
                    }
                    out.push(acc * 0.125);
                }
            }
        }
    }
    out
}

pub(crate) fn avgpool3d_backward(grad_out: &[f32], dims: Dims5) -> Vec<f32> {
    let (od, oh, ow) = (dims.d / 2, dims.h / 2, dims.w / 2);
    let n = dims.spatial();
    let mut gx = vec![0.0f32; dims.b * dims.c * n];
    let mut o = 0;
    for p in 0..dims.b * dims.c {
        let base = p * n;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let g = grad_out[o] * 0.125;
                    o += 1;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                gx[base + ((2 * z + dz) * dims.h + 2 * y + dy) * dims.w + 2 * x + dx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) const BN_EPS: f32 = 1e-5;

/// Per-channel batch statistics `(mean, biased variance)` over `B * D * H * W`.
pub(crate) fn channel_stats(input: &[f32], dims: Dims5) -> (Vec<f32>, Vec<f32>) {
    let n = dims.spatial();
    let count = (dims.b * n) as f64;
    let mut mean = vec![0.0f32; dims.c];
    let mut var = vec![0.0f32; dims.c];
    for c in 0..dims.c {
        let mut s = 0.0f64;
        for b in 0..dims.b {
            let off = (b * dims.c + c) * n;
            s += input[off..off + n].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0f64;
        for b in 0..dims.b {
            let off = (b * dims.c + c) * n;
            ss += input[off..off + n]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m as f32;
        var[c] = (ss / count) as f32;
    }
    (mean, var)
}

/// Applies `gamma * (x - mean) * inv_std + beta` per channel; returns
/// `(output, normalized input)`.
pub(crate) fn batchnorm_apply(
    input: &[f32],
    dims: Dims5,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    beta: &[f32],
    keep_xhat: bool,
) -> (Vec<f32>, Vec<f32>) {
    let n = dims.spatial();
    let mut out = vec![0.0f32; input.len()];
    let mut xhat = if keep_xhat {
        vec![0.0f32; input.len()]
    } else {
        Vec::new()
    };
    for b in 0..dims.b {
        for c in 0..dims.c {
            let off = (b * dims.c + c) * n;
            let (m, s, g, t) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for i in off..off + n {
                let xh = (input[i] - m) * s;
                if keep_xhat {
                    xhat[i] = xh;
                }
                out[i] = g * xh + t;
            }
        }
    }
    (out, xhat)
}

pub(crate) struct BnGrads {
    pub input: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub(crate) fn batchnorm_backward(
    grad_out: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    dims: Dims5,
) -> BnGrads {
    let n = dims.spatial();
    let count = (dims.b * n) as f32;
    let mut gx = vec![0.0f32; grad_out.len()];
    let mut ggamma = vec![0.0f32; dims.c];
    let mut gbeta = vec![0.0f32; dims.c];
    for c in 0..dims.c {
        let mut sdy = 0.0f64;
        let mut sdyx = 0.0f64;
        for b in 0..dims.b {
            let off = (b * dims.c + c) * n;
            for i in off..off + n {
                sdy += grad_out[i] as f64;
                sdyx += (grad_out[i] * xhat[i]) as f64;
            }
        }
        gbeta[c] = sdy as f32;
        ggamma[c] = sdyx as f32;
        let scale = gamma[c] * inv_std[c] / count;
        let (sdy, sdyx) = (sdy as f32, sdyx as f32);
        for b in 0..dims.b {
            let off = (b * dims.c + c) * n;
            for i in off..off + n {
                gx[i] = scale * (count * grad_out[i] - sdy - xhat[i] * sdyx);
            }
        }
    }
    BnGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    }
}
