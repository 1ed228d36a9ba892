//! Dense f64 kernels behind the graph ops.
//!
//! Parallelism rule: rayon only ever splits over disjoint output chunks, and
//! each output element is computed by a sequential loop in a fixed order, so
//! results are bit-identical regardless of thread count.

use rayon::prelude::*;

/// Work size below which parallel dispatch is not worth the overhead.
const PAR_THRESHOLD: usize = 1 << 14;

/// C = A @ B for a stack of `batch` independent [m,k] x [k,n] products.
/// Plain 2-D matmul is the `batch == 1` case.
///
/// Four output rows advance together so each B row loads once per quad.
pub fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    debug_assert_eq!(out.len(), batch * m * n);
    // a chunk never crosses a batch boundary when the quad divides m;
    // otherwise fall back to single-row chunks
    let rows_per = if m % 4 == 0 { 4 } else { 1 };
    let quad_body = |q: usize, chunk: &mut [f64]| {
        let rows = chunk.len() / n;
        let r0 = q * rows_per;
        let bi = r0 / m;
        let i0 = r0 % m;
        let a_base = bi * m * k + i0 * k;
        let b_mat = &b[bi * k * n..(bi + 1) * k * n];
        chunk.fill(0.0);
        if rows == 4 {
            let (c0, rest) = chunk.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for p in 0..k {
                let b_row = &b_mat[p * n..p * n + n];
                let a0 = a[a_base + p];
                let a1 = a[a_base + k + p];
                let a2 = a[a_base + 2 * k + p];
                let a3 = a[a_base + 3 * k + p];
                for j in 0..n {
                    let bv = b_row[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        } else {
            for (row_i, row) in chunk.chunks_mut(n).enumerate() {
                let a_row = &a[a_base + row_i * k..a_base + (row_i + 1) * k];
                for (p, &aip) in a_row.iter().enumerate() {
                    let b_row = &b_mat[p * n..p * n + n];
                    for (o, &bv) in row.iter_mut().zip(b_row) {
                        *o += aip * bv;
                    }
                }
            }
        }
    };
    if batch * m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(q, chunk)| quad_body(q, chunk));
    } else {
        for (q, chunk) in out.chunks_mut(rows_per * n).enumerate() {
            quad_body(q, chunk);
        }
    }
}

/// Swap the last two axes of a [batch, r, c] stack.
pub fn transpose_last(x: &[f64], batch: usize, r: usize, c: usize, out: &mut [f64]) {
    for bi in 0..batch {
        let src = &x[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// out[permuted index] = x[index].
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize], out: &mut [f64]) {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides = strides(&out_shape);
    let mut coords = vec![0usize; nd];
    for (flat, &v) in x.iter().enumerate() {
        let mut rem = flat;
        for d in 0..nd {
            coords[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        let mut o = 0;
        for d in 0..nd {
            o += coords[perm[d]] * out_strides[d];
        }
        out[o] = v;
    }
}

/// Inverse permutation.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Numerically stable softmax over contiguous rows of width `w`.
pub fn softmax_rows(x: &[f64], w: usize, out: &mut [f64]) {
    let body = |src: &[f64], dst: &mut [f64]| {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            let e = (v - max).exp();
            *d = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    };
    if x.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(w)
            .zip(x.par_chunks(w))
            .for_each(|(dst, src)| body(src, dst));
    } else {
        for (dst, src) in out.chunks_mut(w).zip(x.chunks(w)) {
            body(src, dst);
        }
    }
}

/// dL/dx for softmax given the forward output y: dx = y * (g - <g, y>).
pub fn softmax_backward(y: &[f64], g: &[f64], w: usize, dx: &mut [f64]) {
    for ((dst, yr), gr) in dx.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
}

/// Log-sum-exp of a row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    /// 3x3 kernel, zero padding 1, stride 1 or 2.
    pub fn new(batch: usize, in_ch: usize, h: usize, w: usize, out_ch: usize, stride: usize) -> Self {
        let oh = (h - 1) / stride + 1;
        let ow = (w - 1) / stride + 1;
        ConvDims {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            stride,
            oh,
            ow,
        }
    }
}

/// Valid output range [lo, hi) for one kernel tap: 0 <= o*s + t - 1 < extent.
#[inline]
fn tap_range(extent: usize, out_extent: usize, stride: usize, tap: usize) -> (usize, usize) {
    let lo = if tap == 0 {
        1usize.div_ceil(stride)
    } else {
        0
    };
    // o*s <= extent - tap  =>  o <= (extent - tap) / s
    let hi = if tap > extent {
        0
    } else {
        ((extent - tap) / stride + 1).min(out_extent)
    };
    (lo.min(hi), hi)
}

/// Direct 3x3 convolution, padding 1.
pub fn conv2d(x: &[f64], wgt: &[f64], bias: &[f64], d: &ConvDims, out: &mut [f64]) {
    let (oh, ow) = (d.oh, d.ow);
    let plane = oh * ow;
    out.par_chunks_mut(plane).enumerate().for_each(|(bc, o)| {
        let b = bc / d.out_ch;
        let oc = bc % d.out_ch;
        o.fill(bias[oc]);
        for ic in 0..d.in_ch {
            let xi = &x[(b * d.in_ch + ic) * d.h * d.w..(b * d.in_ch + ic + 1) * d.h * d.w];
            let wk = &wgt[(oc * d.in_ch + ic) * 9..(oc * d.in_ch + ic + 1) * 9];
            for ky in 0..3 {
                let (ylo, yhi) = tap_range(d.h, oh, d.stride, ky);
                for kx in 0..3 {
                    let wv = wk[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = tap_range(d.w, ow, d.stride, kx);
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - 1;
                        let orow = &mut o[oy * ow..oy * ow + ow];
                        let irow = &xi[iy * d.w..iy * d.w + d.w];
                        if d.stride == 1 {
                            if xlo >= xhi {
                                continue;
                            }
                            let src = &irow[xlo + kx - 1..xhi + kx - 1];
                            for (ov, &iv) in orow[xlo..xhi].iter_mut().zip(src) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[ox * d.stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_backward_input(g: &[f64], wgt: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let plane = d.h * d.w;
    dx.par_chunks_mut(plane).enumerate().for_each(|(bi, dxi)| {
        let b = bi / d.in_ch;
        let ic = bi % d.in_ch;
        dxi.fill(0.0);
        for oc in 0..d.out_ch {
            let go = &g[(b * d.out_ch + oc) * d.oh * d.ow..(b * d.out_ch + oc + 1) * d.oh * d.ow];
            let wk = &wgt[(oc * d.in_ch + ic) * 9..(oc * d.in_ch + ic + 1) * 9];
            for ky in 0..3 {
                let (ylo, yhi) = tap_range(d.h, d.oh, d.stride, ky);
                for kx in 0..3 {
                    let wv = wk[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = tap_range(d.w, d.ow, d.stride, kx);
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - 1;
                        let grow = &go[oy * d.ow..oy * d.ow + d.ow];
                        let drow = &mut dxi[iy * d.w..iy * d.w + d.w];
                        if d.stride == 1 {
                            if xlo >= xhi {
                                continue;
                            }
                            let dst = &mut drow[xlo + kx - 1..xhi + kx - 1];
                            for (dv, &gv) in dst.iter_mut().zip(&grow[xlo..xhi]) {
                                *dv += wv * gv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox * d.stride + kx - 1] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution weights.
pub fn conv2d_backward_weight(x: &[f64], g: &[f64], d: &ConvDims, dw: &mut [f64]) {
    dw.par_chunks_mut(9).enumerate().for_each(|(oi, dwk)| {
        let oc = oi / d.in_ch;
        let ic = oi % d.in_ch;
        dwk.fill(0.0);
        for b in 0..d.batch {
            let xi = &x[(b * d.in_ch + ic) * d.h * d.w..(b * d.in_ch + ic + 1) * d.h * d.w];
            let go = &g[(b * d.out_ch + oc) * d.oh * d.ow..(b * d.out_ch + oc + 1) * d.oh * d.ow];
            for ky in 0..3 {
                let (ylo, yhi) = tap_range(d.h, d.oh, d.stride, ky);
                for kx in 0..3 {
                    let (xlo, xhi) = tap_range(d.w, d.ow, d.stride, kx);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - 1;
                        let grow = &go[oy * d.ow..oy * d.ow + d.ow];
                        let irow = &xi[iy * d.w..iy * d.w + d.w];
                        if d.stride == 1 {
                            if xlo >= xhi {
                                continue;
                            }
                            let src = &irow[xlo + kx - 1..xhi + kx - 1];
                            for (&gv, &iv) in grow[xlo..xhi].iter().zip(src) {
                                acc += gv * iv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                acc += grow[ox] * irow[ox * d.stride + kx - 1];
                            }
                        }
                    }
                    dwk[ky * 3 + kx] += acc;
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution bias.
pub fn conv2d_backward_bias(g: &[f64], d: &ConvDims, db: &mut [f64]) {
    let plane = d.oh * d.ow;
    for (oc, dbv) in db.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in 0..d.batch {
            let go = &g[(b * d.out_ch + oc) * plane..(b * d.out_ch + oc + 1) * plane];
            acc += go.iter().sum::<f64>();
        }
        *dbv = acc;
    }
}

/// Nearest-neighbour 2x upsample of [n, h, w] planes.
pub fn upsample2(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            let srow = &src[(y / 2) * w..(y / 2) * w + w];
            let drow = &mut dst[y * 2 * w..(y + 1) * 2 * w];
            for x2 in 0..2 * w {
                drow[x2] = srow[x2 / 2];
            }
        }
    }
}

/// Backward of nearest 2x upsample: sum each 2x2 block.
pub fn upsample2_backward(g: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    for p in 0..planes {
        let go = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let g0 = &go[(2 * y) * 2 * w..(2 * y + 1) * 2 * w];
            let g1 = &go[(2 * y + 1) * 2 * w..(2 * y + 2) * 2 * w];
            let drow = &mut dst[y * w..y * w + w];
            for x2 in 0..w {
                drow[x2] = g0[2 * x2] + g0[2 * x2 + 1] + g1[2 * x2] + g1[2 * x2 + 1];
            }
        }
    }
}

/// Bilinear interpolation weights for one output coordinate.
/// Half-pixel centers, clamped at the borders.
#[inline]
pub fn bilinear_taps(out_i: usize, out_extent: usize, in_extent: usize) -> (usize, usize, f64) {
    let scale = in_extent as f64 / out_extent as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_extent - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_extent - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of [planes, h, w] to [planes, oh, ow].
pub fn resize_bilinear(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_taps(ox, ow, w);
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                dst[oy * ow + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
}

/// Transpose of `resize_bilinear`: scatter output grads back through the taps.
pub fn resize_bilinear_backward(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    for p in 0..planes {
        let go = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_taps(ox, ow, w);
                let gv = go[oy * ow + ox];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
}



#[cfg(test)]
mod bench_conv {
    use super::*;

    #[test]
    #[ignore]
    fn bench_conv2d() {
        let d = ConvDims::new(6, 64, 16, 16, 64, 1);
        let x: Vec<f64> = (0..d.batch * d.in_ch * d.h * d.w).map(|i| (i % 83) as f64 * 0.01).collect();
        let w: Vec<f64> = (0..d.out_ch * d.in_ch * 9).map(|i| (i % 67) as f64 * 0.001).collect();
        let b = vec![0.0; d.out_ch];
        let mut out = vec![0.0; d.batch * d.out_ch * d.oh * d.ow];
        let reps = 30;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv2d(&x, &w, &b, &d, &mut out);
        }
        let el = t0.elapsed().as_secs_f64();
        let flops = 2.0 * (d.batch * d.out_ch * d.oh * d.ow * d.in_ch * 9) as f64 * reps as f64;
        println!("conv fwd 6x64x16x16: {:.2} GFLOP/s", flops / el / 1e9);

        let mut dx = vec![0.0; x.len()];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv2d_backward_input(&out, &w, &d, &mut dx);
        }
        let el = t0.elapsed().as_secs_f64();
        println!("conv bwd-input: {:.2} GFLOP/s", flops / el / 1e9);

        let mut dw = vec![0.0; w.len()];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv2d_backward_weight(&x, &out, &d, &mut dw);
        }
        let el = t0.elapsed().as_secs_f64();
        println!("conv bwd-weight: {:.2} GFLOP/s", flops / el / 1e9);
    }
}
