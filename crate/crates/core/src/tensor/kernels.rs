//! Raw slice kernels shared by the graph forward and backward passes.

/// `out[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]ᵀ`.
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ * g[m,n]`.
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Stride and (possibly asymmetric) zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl Conv2dSpec {
    pub fn symmetric(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad_lo: pad,
            pad_hi: pad,
        }
    }

    /// Output extent `ceil(input / stride)` for an odd kernel, with the extra
    /// padding row/column placed at the end.
    pub fn same(kernel: usize, stride: usize) -> Self {
        if stride == 1 {
            return Self::symmetric(1, kernel / 2);
        }
        // Total padding k - stride keeps (H + pad - k) divisible by the stride for
        // H a multiple of the stride.
        let total = kernel.saturating_sub(stride);
        Self {
            stride,
            pad_lo: total / 2,
            pad_hi: total - total / 2,
        }
    }

    /// Output extent, or `None` when the window does not tile the padded input.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + self.pad_lo + self.pad_hi;
        if padded < kernel || self.stride == 0 || !(padded - kernel).is_multiple_of(self.stride) {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    /// Valid output index range along one axis for kernel offset `kk`.
    fn range(&self, spec: &Conv2dSpec, kk: usize, input: usize, output: usize) -> (usize, usize) {
        // i = o*stride + kk - pad_lo must lie in [0, input).
        let lo = if kk >= spec.pad_lo {
            0
        } else {
            (spec.pad_lo - kk).div_ceil(spec.stride)
        };
        let limit = input + spec.pad_lo; // o*stride + kk < limit
        let hi = if limit > kk {
            ((limit - kk - 1) / spec.stride + 1).min(output)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    d: ConvDims,
    spec: &Conv2dSpec,
) {
    let plane = d.ho * d.wo;
    for k in 0..d.k {
        let out_k = &mut out[k * plane..(k + 1) * plane];
        if let Some(b) = bias {
            out_k.iter_mut().for_each(|v| *v = b[k]);
        }
        for c in 0..d.c {
            let x_c = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.s {
                let (oy0, oy1) = d.range(spec, ky, d.h, d.ho);
                for kx in 0..d.s {
                    let wv = w[((k * d.c + c) * d.s + ky) * d.s + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = d.range(spec, kx, d.w, d.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * spec.stride + ky - spec.pad_lo;
                        let x_row = &x_c[iy * d.w..(iy + 1) * d.w];
                        let o_row = &mut out_k[oy * d.wo..(oy + 1) * d.wo];
                        if spec.stride == 1 {
                            let shift = ox0 + kx - spec.pad_lo;
                            for (o, &xv) in o_row[ox0..ox1].iter_mut().zip(&x_row[shift..]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                o_row[ox] += wv * x_row[ox * spec.stride + kx - spec.pad_lo];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_bias(g: &[f64], gb: &mut [f64], d: ConvDims) {
    let plane = d.ho * d.wo;
    for k in 0..d.k {
        gb[k] += g[k * plane..(k + 1) * plane].iter().sum::<f64>();
    }
}

pub(crate) fn conv2d_grad_input(
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    d: ConvDims,
    spec: &Conv2dSpec,
) {
    let plane = d.ho * d.wo;
    for k in 0..d.k {
        let g_k = &g[k * plane..(k + 1) * plane];
        for c in 0..d.c {
            let gx_c = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.s {
                let (oy0, oy1) = d.range(spec, ky, d.h, d.ho);
                for kx in 0..d.s {
                    let wv = w[((k * d.c + c) * d.s + ky) * d.s + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = d.range(spec, kx, d.w, d.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * spec.stride + ky - spec.pad_lo;
                        let g_row = &g_k[oy * d.wo..(oy + 1) * d.wo];
                        let x_row = &mut gx_c[iy * d.w..(iy + 1) * d.w];
                        if spec.stride == 1 {
                            let shift = ox0 + kx - spec.pad_lo;
                            for (xv, &gv) in x_row[shift..].iter_mut().zip(&g_row[ox0..ox1]) {
                                *xv += wv * gv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                x_row[ox * spec.stride + kx - spec.pad_lo] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_weight(
    x: &[f64],
    g: &[f64],
    gw: &mut [f64],
    d: ConvDims,
    spec: &Conv2dSpec,
) {
    let plane = d.ho * d.wo;
    for k in 0..d.k {
        let g_k = &g[k * plane..(k + 1) * plane];
        for c in 0..d.c {
            let x_c = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.s {
                let (oy0, oy1) = d.range(spec, ky, d.h, d.ho);
                for kx in 0..d.s {
                    let (ox0, ox1) = d.range(spec, kx, d.w, d.wo);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * spec.stride + ky - spec.pad_lo;
                        let g_row = &g_k[oy * d.wo..(oy + 1) * d.wo];
                        let x_row = &x_c[iy * d.w..(iy + 1) * d.w];
                        if spec.stride == 1 {
                            let shift = ox0 + kx - spec.pad_lo;
                            acc += g_row[ox0..ox1]
                                .iter()
                                .zip(&x_row[shift..])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in ox0..ox1 {
                                acc += g_row[ox] * x_row[ox * spec.stride + kx - spec.pad_lo];
                            }
                        }
                    }
                    gw[((k * d.c + c) * d.s + ky) * d.s + kx] += acc;
                }
            }
        }
    }
}

/// Per-output-coordinate source taps `(i0, i1, w0, w1)` of align-corners-false
/// bilinear sampling along one axis.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn resize_forward(
    x: &[f64],
    out: &mut [f64],
    channels: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for c in 0..channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
}

pub(crate) fn resize_backward(
    g: &[f64],
    gx: &mut [f64],
    channels: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for c in 0..channels {
        let src = &g[c * ho * wo..(c + 1) * ho * wo];
        let dst = &mut gx[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = src[oy * wo + ox];
                dst[y0 * w + x0] += gv * wy0 * wx0;
                dst[y0 * w + x1] += gv * wy0 * wx1;
                dst[y1 * w + x0] += gv * wy1 * wx0;
                dst[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat index of `dst`, the flat index of `src` it reads under
/// right-aligned broadcasting. Caller guarantees compatibility.
pub(crate) fn broadcast_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let offset = dst.len() - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0; dst.len()];
    for (i, (&e, &s)) in src.iter().zip(&src_strides).enumerate() {
        eff[offset + i] = if e == 1 { 0 } else { s };
    }
    gather_map(dst, &eff)
}

/// For each flat index of the permuted output, the flat source index.
pub(crate) fn permute_map(src: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let out_shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    gather_map(&out_shape, &eff)
}

fn gather_map(shape: &[usize], eff_strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            src += eff_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            src -= eff_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `(outer, axis, inner)` extents when viewing `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
