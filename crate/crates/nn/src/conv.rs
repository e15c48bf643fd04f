//! Strided, dilated, zero-padded 2-D convolution via im2col and sgemm.
//!
//! Column buffers are built for bands of output rows so that memory stays
//! bounded for long inputs. Every reduction runs in a fixed order, which keeps
//! results bit-reproducible between runs.

use std::cell::RefCell;

use matrixmultiply::sgemm;

thread_local! {
    static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with a reusable zero-length-agnostic buffer of at least `len` elements.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Upper bound on im2col buffer elements per band.
const BAND_ELEMS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    /// Stride 1 with padding that preserves spatial size for odd kernels.
    pub fn same(kernel: (usize, usize), dilation: (usize, usize)) -> Self {
        Self {
            stride: (1, 1),
            dilation,
            padding: (dilation.0 * (kernel.0 - 1) / 2, dilation.1 * (kernel.1 - 1) / 2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    pub c_in: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub spec: Conv2dSpec,
}

impl Geometry {
    pub fn new(input: &[usize], weight: &[usize], spec: Conv2dSpec) -> Self {
        let (c_in, in_h, in_w) = (input[0], input[1], input[2]);
        let (c_out, wc_in, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        assert_eq!(c_in, wc_in, "conv2d: input has {c_in} channels, weight expects {wc_in}");
        let (out_h, out_w) = output_size((in_h, in_w), (kh, kw), spec);
        assert!(out_h > 0 && out_w > 0, "conv2d: empty output for input {input:?}");
        Self {
            c_in,
            in_h,
            in_w,
            c_out,
            kh,
            kw,
            out_h,
            out_w,
            spec,
        }
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.k() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.out_h * self.out_w) as u64 * self.c_out as u64 * self.k() as u64
    }
}

pub fn output_size(input: (usize, usize), kernel: (usize, usize), spec: Conv2dSpec) -> (usize, usize) {
    let dim = |n: usize, k: usize, s: usize, d: usize, p: usize| {
        let span = d * (k - 1) + 1;
        if n + 2 * p < span {
            0
        } else {
            (n + 2 * p - span) / s + 1
        }
    };
    (
        dim(input.0, kernel.0, spec.stride.0, spec.dilation.0, spec.padding.0),
        dim(input.1, kernel.1, spec.stride.1, spec.dilation.1, spec.padding.1),
    )
}

/// Range of output columns `ox` whose input column `ox*s + off` lies in `[0, n)`.
fn valid_range(out: usize, stride: usize, off: isize, n: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let hi = if (n as isize) <= off {
        0
    } else {
        (((n as isize - off - 1) as usize) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

fn im2col(g: &Geometry, x: &[f32], row0: usize, rows: usize, cols: &mut [f32]) {
    let Conv2dSpec {
        stride: (sh, sw),
        dilation: (dh, dw),
        padding: (ph, pw),
    } = g.spec;
    let n = rows * g.out_w;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[r * n..(r + 1) * n];
                let off_w = (kj * dw) as isize - pw as isize;
                let (lo, hi) = valid_range(g.out_w, sw, off_w, g.in_w);
                for oy in 0..rows {
                    let dst = &mut dst_row[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = ((row0 + oy) * sh + ki * dh) as isize - ph as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if sw == 1 && hi > lo {
                        let s0 = (lo as isize + off_w) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else if sw != 1 {
                        for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[(ox as isize * sw as isize + off_w) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[f32], row0: usize, rows: usize, dx: &mut [f32]) {
    let Conv2dSpec {
        stride: (sh, sw),
        dilation: (dh, dw),
        padding: (ph, pw),
    } = g.spec;
    let n = rows * g.out_w;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[r * n..(r + 1) * n];
                let off_w = (kj * dw) as isize - pw as isize;
                let (lo, hi) = valid_range(g.out_w, sw, off_w, g.in_w);
                for oy in 0..rows {
                    let iy = ((row0 + oy) * sh + ki * dh) as isize - ph as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &src_row[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, &v) in src.iter().enumerate().take(hi).skip(lo) {
                        dst[(ox as isize * sw as isize + off_w) as usize] += v;
                    }
                }
            }
        }
    }
}

/// Output `[c_out, out_h, out_w]`.
pub fn forward(g: &Geometry, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let p = g.out_h * g.out_w;
    let k = g.k();
    let mut out = vec![0.0f32; g.c_out * p];
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out[co * p..(co + 1) * p].fill(bv);
        }
    }
    if g.spec.stride == (1, 1) && g.c_out <= DIRECT_MAX_COUT {
        forward_direct(g, x, w, &mut out);
        return out;
    }
    let band = g.band_rows();
    with_scratch(k * band * g.out_w, |cols| {
        let mut row0 = 0;
        while row0 < g.out_h {
            let rows = band.min(g.out_h - row0);
            let n = rows * g.out_w;
            im2col(g, x, row0, rows, &mut cols[..k * n]);
            // out[:, band] += W[c_out, k] * cols[k, n]
            unsafe {
                sgemm(
                    g.c_out,
                    k,
                    n,
                    1.0,
                    w.as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    n as isize,
                    1,
                    1.0,
                    out.as_mut_ptr().add(row0 * g.out_w),
                    p as isize,
                    1,
                );
            }
            row0 += rows;
        }
    });
    out
}

/// Below this output width the shifted-axpy kernel beats im2col + sgemm.
const DIRECT_MAX_COUT: usize = 12;

fn forward_direct(g: &Geometry, x: &[f32], w: &[f32], out: &mut [f32]) {
    let (dh, dw) = g.spec.dilation;
    let (ph, pw) = g.spec.padding;
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for co in 0..g.c_out {
        let op = &mut out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let xp = &x[ci * plane_in..(ci + 1) * plane_in];
            for ki in 0..g.kh {
                let off_h = (ki * dh) as isize - ph as isize;
                let (ylo, yhi) = valid_range(g.out_h, 1, off_h, g.in_h);
                for kj in 0..g.kw {
                    let wv = w[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let off_w = (kj * dw) as isize - pw as isize;
                    let (xlo, xhi) = valid_range(g.out_w, 1, off_w, g.in_w);
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy as isize + off_h) as usize;
                        let orow = &mut op[oy * g.out_w + xlo..oy * g.out_w + xhi];
                        let s0 = iy * g.in_w + (xlo as isize + off_w) as usize;
                        for (o, &xv) in orow.iter_mut().zip(&xp[s0..s0 + (xhi - xlo)]) {
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient for stride 1: every tap is a dot product between an output
/// gradient plane and a shifted input plane.
fn weight_grad_stride1(g: &Geometry, x: &[f32], grad: &[f32]) -> Vec<f32> {
    let (dh, dw) = g.spec.dilation;
    let (ph, pw) = g.spec.padding;
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![0.0f32; g.c_out * g.c_in * g.kh * g.kw];
    for ci in 0..g.c_in {
        let xp = &x[ci * plane_in..(ci + 1) * plane_in];
        for co in 0..g.c_out {
            let gp = &grad[co * plane_out..(co + 1) * plane_out];
            for ki in 0..g.kh {
                let off_h = (ki * dh) as isize - ph as isize;
                let (ylo, yhi) = valid_range(g.out_h, 1, off_h, g.in_h);
                for kj in 0..g.kw {
                    let off_w = (kj * dw) as isize - pw as isize;
                    let (xlo, xhi) = valid_range(g.out_w, 1, off_w, g.in_w);
                    if xlo == xhi {
                        continue;
                    }
                    let mut acc = 0.0f32;
                    for oy in ylo..yhi {
                        let iy = (oy as isize + off_h) as usize;
                        let grow = &gp[oy * g.out_w + xlo..oy * g.out_w + xhi];
                        let s0 = iy * g.in_w + (xlo as isize + off_w) as usize;
                        acc += dot(grow, &xp[s0..s0 + (xhi - xlo)]);
                    }
                    out[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj] = acc;
                }
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// For stride 1 the input gradient is itself a convolution of the output
/// gradient with the spatially flipped, channel-transposed kernel.
fn input_grad_stride1(g: &Geometry, w: &[f32], grad: &[f32]) -> Vec<f32> {
    let (kh, kw) = (g.kh, g.kw);
    let mut wt = vec![0.0f32; g.c_in * g.c_out * kh * kw];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ki in 0..kh {
                for kj in 0..kw {
                    wt[((ci * g.c_out + co) * kh + (kh - 1 - ki)) * kw + (kw - 1 - kj)] =
                        w[((co * g.c_in + ci) * kh + ki) * kw + kj];
                }
            }
        }
    }
    let (dh, dw) = g.spec.dilation;
    let spec = Conv2dSpec {
        stride: (1, 1),
        dilation: (dh, dw),
        padding: (dh * (kh - 1) - g.spec.padding.0, dw * (kw - 1) - g.spec.padding.1),
    };
    let tg = Geometry::new(&[g.c_out, g.out_h, g.out_w], &[g.c_in, g.c_out, kh, kw], spec);
    debug_assert_eq!((tg.out_h, tg.out_w), (g.in_h, g.in_w));
    forward(&tg, grad, &wt, None)
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
pub fn backward(
    g: &Geometry,
    x: &[f32],
    w: &[f32],
    grad: &[f32],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let p = g.out_h * g.out_w;
    let k = g.k();
    let db = need_b.then(|| {
        (0..g.c_out)
            .map(|co| grad[co * p..(co + 1) * p].iter().sum())
            .collect()
    });
    if !need_x && !need_w {
        return (None, None, db);
    }
    let stride1 = g.spec.stride == (1, 1)
        && g.spec.padding.0 <= g.spec.dilation.0 * (g.kh - 1)
        && g.spec.padding.1 <= g.spec.dilation.1 * (g.kw - 1);
    let mut dx = need_x.then(|| {
        if stride1 {
            input_grad_stride1(g, w, grad)
        } else {
            vec![0.0f32; g.c_in * g.in_h * g.in_w]
        }
    });
    if stride1 {
        let dw = need_w.then(|| weight_grad_stride1(g, x, grad));
        return (dx, dw, db);
    }
    let mut dw = need_w.then(|| vec![0.0f32; g.c_out * k]);
    let band = g.band_rows();
    with_scratch(k * band * g.out_w, |cols| {
        let mut row0 = 0;
        while row0 < g.out_h {
            let rows = band.min(g.out_h - row0);
            let n = rows * g.out_w;
            let gband = unsafe { grad.as_ptr().add(row0 * g.out_w) };
            if let Some(dw) = dw.as_mut() {
                im2col(g, x, row0, rows, &mut cols[..k * n]);
                // dW[c_out, k] += G[c_out, n] * cols^T[n, k]
                unsafe {
                    sgemm(
                        g.c_out,
                        n,
                        k,
                        1.0,
                        gband,
                        p as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        n as isize,
                        1.0,
                        dw.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
            }
            if let (Some(dx), false) = (dx.as_mut(), stride1) {
                // dcols[k, n] = W^T[k, c_out] * G[c_out, n]
                unsafe {
                    sgemm(
                        k,
                        g.c_out,
                        n,
                        1.0,
                        w.as_ptr(),
                        1,
                        k as isize,
                        gband,
                        p as isize,
                        1,
                        0.0,
                        cols.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                col2im(g, &cols[..k * n], row0, rows, dx);
            }
            row0 += rows;
        }
    });
    (dx, dw, db)
}
