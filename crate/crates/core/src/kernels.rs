//! Numeric kernels shared by the forward and backward passes.

/// `c = op(a) * op(b) + beta * c`, where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// A transposed operand is stored in its untransposed layout (`k×m` or `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index dgemm touches.
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

/// Output extent of a convolution along one axis.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Geometry of a dense 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        conv_out(self.h, self.k, self.stride, self.pad)
    }

    pub fn out_w(&self) -> usize {
        conv_out(self.w, self.k, self.stride, self.pad)
    }

    /// Unfold `x` (C×H×W) into a `(C·k·k) × (Ho·Wo)` column matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_h(), self.out_w());
        let kk = self.k * self.k;
        let mut cols = vec![0.0; self.c * kk * ho * wo];
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * kk + ky * self.k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulate columns back into `dx`.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let kk = self.k * self.k;
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * kk + ky * self.k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution: `x` is C×H×W, `w` is O×C×k×k. Returns O×Ho×Wo.
pub fn conv2d(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out_ch: usize) -> Vec<f64> {
    let hw = g.out_h() * g.out_w();
    let ck = g.c * g.k * g.k;
    let mut out = vec![0.0; out_ch * hw];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.fill(b[o]);
        }
    }
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        gemm(out_ch, ck, hw, w, false, x, false, 1.0, &mut out);
    } else {
        let cols = g.im2col(x);
        gemm(out_ch, ck, hw, w, false, &cols, false, 1.0, &mut out);
    }
    out
}

/// Depthwise 3-D correlation with per-channel `k×k` kernels, stride 1, zero padding `pad`.
pub fn depthwise(c: usize, h: usize, w: usize, k: usize, pad: usize, x: &[f64], wt: &[f64]) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, k, 1, pad), conv_out(w, k, 1, pad));
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let kern = &wt[ch * k * k..(ch + 1) * k * k];
        let o = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += kern[ky * k + kx] * plane[iy as usize * w + ix as usize];
                        }
                    }
                }
                o[oy * wo + ox] = acc;
            }
        }
    }
    out
}

/// Backward of [`depthwise`]: accumulates into `dx` and `dw`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (ho, wo) = (conv_out(h, k, 1, pad), conv_out(w, k, 1, pad));
    let mut dx = dx;
    let mut dw = dw;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let kern = &wt[ch * k * k..(ch + 1) * k * k];
        let g = &dy[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let go = g[oy * wo + ox];
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = iy as usize * w + ix as usize;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[ch * h * w + xi] += kern[ky * k + kx] * go;
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[ch * k * k + ky * k + kx] += plane[xi] * go;
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation table for bilinear resampling along one axis with half-pixel centers.
#[derive(Clone, Debug)]
pub struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LerpAxis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (src.floor() as usize).min(input - 1);
            let h = (l + 1).min(input - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

pub fn bilinear(c: usize, h: usize, w: usize, oh: usize, ow: usize, x: &[f64]) -> Vec<f64> {
    let ay = LerpAxis::new(h, oh);
    let ax = LerpAxis::new(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (ay.lo[y], ay.hi[y], ay.frac[y]);
            for xx in 0..ow {
                let (x0, x1, fx) = (ax.lo[xx], ax.hi[xx], ax.frac[xx]);
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                o[y * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward(c: usize, h: usize, w: usize, oh: usize, ow: usize, dy: &[f64], dx: &mut [f64]) {
    let ay = LerpAxis::new(h, oh);
    let ax = LerpAxis::new(w, ow);
    for ch in 0..c {
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (ay.lo[y], ay.hi[y], ay.frac[y]);
            for xx in 0..ow {
                let (x0, x1, fx) = (ax.lo[xx], ax.hi[xx], ax.frac[xx]);
                let go = g[y * ow + xx];
                d[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += go * (1.0 - fy) * fx;
                d[y1 * w + x0] += go * fy * (1.0 - fx);
                d[y1 * w + x1] += go * fy * fx;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-row standardization; returns `(normalized, inverse std per row)`.
pub fn standardize_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(n);
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

/// Row-wise softmax; entries with `mask[i] == false` get probability zero.
pub fn softmax_rows(x: &[f64], m: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (row, o)) in x.chunks(m).zip(out.chunks_mut(m)).enumerate() {
        let allowed = |j: usize| mask.is_none_or(|mk| mk[r * m + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (j, (oi, &v)) in o.iter_mut().zip(row).enumerate() {
            if allowed(j) {
                *oi = (v - max).exp();
                sum += *oi;
            }
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    out
}
