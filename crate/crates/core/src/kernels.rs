//! Slice-level forward and adjoint kernels behind the tape operations.

use std::cell::RefCell;
use std::thread::LocalKey;

/// Geometry of a 3-D cross-correlation over a `[C_in, D, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, input: [usize; 3]) -> Option<Self> {
        let mut output = [0; 3];
        for i in 0..3 {
            let span = input[i] + 2 * pad;
            if span < k || stride == 0 {
                return None;
            }
            output[i] = (span - k) / stride + 1;
        }
        Some(ConvGeom {
            cin,
            cout,
            k,
            stride,
            pad,
            input,
            output,
        })
    }

    /// Rows of the unfolded input: one per (input channel, kernel offset).
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
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

thread_local! {
    static COL: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static DCOL: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a thread-local buffer of length `len` with unspecified contents.
fn with_scratch<R>(key: &'static LocalKey<RefCell<Vec<f64>>>, len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    key.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Output positions `o` in `0..n` whose input index `o * stride + offset - pad`
/// falls inside `0..extent`.
fn valid_span(n: usize, stride: usize, offset: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset).div_ceil(stride).min(n);
    let hi = if extent + pad > offset {
        ((extent + pad - offset - 1) / stride + 1).min(n)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds `x` into `col` (`rows x L`), writing every element.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let l = od * oh * ow;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            let (z0, z1) = valid_span(od, s, kd, p, d);
            for kh in 0..k {
                let (y0, y1) = valid_span(oh, s, kh, p, h);
                for kw in 0..k {
                    let (x0, x1) = valid_span(ow, s, kw, p, w);
                    let dst = &mut col[row * l..(row + 1) * l];
                    for z in 0..od {
                        let plane = &mut dst[z * oh * ow..(z + 1) * oh * ow];
                        if z < z0 || z >= z1 {
                            plane.fill(0.0);
                            continue;
                        }
                        let iz = z * s + kd - p;
                        for y in 0..oh {
                            let out = &mut plane[y * ow..(y + 1) * ow];
                            if y < y0 || y >= y1 {
                                out.fill(0.0);
                                continue;
                            }
                            let src = &xc[(iz * h + y * s + kh - p) * w..][..w];
                            out[..x0].fill(0.0);
                            out[x1..].fill(0.0);
                            if s == 1 {
                                let i0 = x0 + kw - p;
                                out[x0..x1].copy_from_slice(&src[i0..i0 + x1 - x0]);
                            } else {
                                for (xo, o) in out[x0..x1].iter_mut().enumerate() {
                                    *o = src[(x0 + xo) * s + kw - p];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into `dx` additively.
fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let l = od * oh * ow;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            let (z0, z1) = valid_span(od, s, kd, p, d);
            for kh in 0..k {
                let (y0, y1) = valid_span(oh, s, kh, p, h);
                for kw in 0..k {
                    let (x0, x1) = valid_span(ow, s, kw, p, w);
                    let src = &col[row * l..(row + 1) * l];
                    for z in z0..z1 {
                        let iz = z * s + kd - p;
                        for y in y0..y1 {
                            let dst = &mut xc[(iz * h + y * s + kh - p) * w..][..w];
                            let v = &src[(z * oh + y) * ow + x0..(z * oh + y) * ow + x1];
                            if s == 1 {
                                let i0 = x0 + kw - p;
                                for (t, v) in dst[i0..i0 + v.len()].iter_mut().zip(v) {
                                    *t += v;
                                }
                            } else {
                                for (xo, v) in v.iter().enumerate() {
                                    dst[(x0 + xo) * s + kw - p] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let l = g.out_voxels();
    let r = g.rows();
    let mut out = vec![0.0; g.cout * l];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(l).enumerate() {
            chunk.fill(b[co]);
        }
    }
    if g.is_pointwise() {
        gemm(g.cout, r, l, w, (r, 1), x, (l, 1), 1.0, &mut out);
    } else {
        with_scratch(&COL, r * l, |col| {
            im2col(x, g, col);
            gemm(g.cout, r, l, w, (r, 1), col, (l, 1), 1.0, &mut out);
        });
    }
    out
}

/// Gradients of a convolution. `want_x` skips the input adjoint when the
/// input does not require a gradient.
pub(crate) fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let l = g.out_voxels();
    let r = g.rows();
    let dbias: Vec<f64> = dy.chunks(l).map(|c| c.iter().sum()).collect();

    // dW = dY * col^T
    let dw = want_w.then(|| {
        let mut dw = vec![0.0; g.cout * r];
        if g.is_pointwise() {
            gemm(g.cout, l, r, dy, (l, 1), x, (1, l), 0.0, &mut dw);
        } else {
            with_scratch(&COL, r * l, |col| {
                im2col(x, g, col);
                gemm(g.cout, l, r, dy, (l, 1), col, (1, l), 0.0, &mut dw);
            });
        }
        dw
    });

    // dcol = W^T * dY
    let dx = want_x.then(|| {
        if g.is_pointwise() {
            let mut dx = vec![0.0; r * l];
            gemm(r, g.cout, l, w, (1, r), dy, (l, 1), 0.0, &mut dx);
            dx
        } else {
            let mut dx = vec![0.0; x.len()];
            with_scratch(&DCOL, r * l, |dcol| {
                gemm(r, g.cout, l, w, (1, r), dy, (l, 1), 0.0, dcol);
                col2im(dcol, g, &mut dx);
            });
            dx
        }
    });
    (dx, dw, dbias)
}

/// 2x2x2 average pooling with stride 2 over each channel of `[C, D, H, W]`.
pub(crate) fn downsample2(x: &[f64], c: usize, [d, h, w]: [usize; 3]) -> Vec<f64> {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = vec![0.0; c * od * oh * ow];
    for ch in 0..c {
        let xc = &x[ch * d * h * w..];
        let oc = &mut out[ch * od * oh * ow..];
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let base = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo;
                            s += xc[base] + xc[base + 1];
                        }
                    }
                    oc[(z * oh + y) * ow + xo] = s * 0.125;
                }
            }
        }
    }
    out
}

pub(crate) fn downsample2_adjoint(dy: &[f64], c: usize, [d, h, w]: [usize; 3]) -> Vec<f64> {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut dx = vec![0.0; c * d * h * w];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for xi in 0..w {
                    dx[((ch * d + z) * h + y) * w + xi] = dy[((ch * od + z / 2) * oh + y / 2) * ow + xi / 2] * 0.125;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour doubling of every spatial axis.
pub(crate) fn upsample2(x: &[f64], c: usize, [d, h, w]: [usize; 3]) -> Vec<f64> {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; c * od * oh * ow];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let src = &x[((ch * d + z / 2) * h + y / 2) * w..][..w];
                let dst = &mut out[((ch * od + z) * oh + y) * ow..][..ow];
                for (xo, v) in dst.iter_mut().enumerate() {
                    *v = src[xo / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_adjoint(dy: &[f64], c: usize, [d, h, w]: [usize; 3]) -> Vec<f64> {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut dx = vec![0.0; c * d * h * w];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    dx[((ch * d + z / 2) * h + y / 2) * w + xo / 2] += dy[((ch * od + z) * oh + y) * ow + xo];
                }
            }
        }
    }
    dx
}

pub(crate) struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Group normalization of a `[C, ...]` array; `per_channel` is the number of
/// elements per channel.
pub(crate) fn group_norm_forward(
    x: &[f64],
    channels: usize,
    per_channel: usize,
    groups: usize,
    eps: f64,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, GroupStats) {
    let cpg = channels / groups;
    let n = (cpg * per_channel) as f64;
    let mut out = vec![0.0; x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(groups),
        rstd: Vec::with_capacity(groups),
    };
    for gi in 0..groups {
        let span = gi * cpg * per_channel..(gi + 1) * cpg * per_channel;
        let xs = &x[span.clone()];
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        for (ci, (src, dst)) in xs
            .chunks(per_channel)
            .zip(out[span].chunks_mut(per_channel))
            .enumerate()
        {
            let c = gi * cpg + ci;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * rstd * gain[c] + bias[c];
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

/// Returns `(dx, dgain, dbias)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    x: &[f64],
    dy: &[f64],
    channels: usize,
    per_channel: usize,
    groups: usize,
    gain: &[f64],
    stats: &GroupStats,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cpg = channels / groups;
    let n = (cpg * per_channel) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; channels];
    let mut dbias = vec![0.0; channels];
    for gi in 0..groups {
        let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
        let base = gi * cpg * per_channel;
        // sums of dxhat and dxhat * xhat over the group
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for ci in 0..cpg {
            let c = gi * cpg + ci;
            let off = base + ci * per_channel;
            for i in off..off + per_channel {
                let xhat = (x[i] - mean) * rstd;
                dgain[c] += dy[i] * xhat;
                dbias[c] += dy[i];
                let dxhat = dy[i] * gain[c];
                s1 += dxhat;
                s2 += dxhat * xhat;
            }
        }
        for ci in 0..cpg {
            let c = gi * cpg + ci;
            let off = base + ci * per_channel;
            for i in off..off + per_channel {
                let xhat = (x[i] - mean) * rstd;
                let dxhat = dy[i] * gain[c];
                dx[i] = rstd / n * (n * dxhat - s1 - xhat * s2);
            }
        }
    }
    (dx, dgain, dbias)
}
