//! Raw numeric kernels on flat row-major buffers.

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `ga[m×k] += g[m×n] · bᵀ`.
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb[k×n] += aᵀ · g[m×n]`.
pub fn matmul_grad_rhs(g: &[f64], a: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * n + t) * inner + i;
            let max = (0..n).map(|t| x[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..n {
                let e = (x[idx(t)] - max).exp();
                y[idx(t)] = e;
                sum += e;
            }
            for t in 0..n {
                y[idx(t)] /= sum;
            }
        }
    }
    y
}

pub fn softmax_grad(y: &[f64], g: &[f64], gx: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, n, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * n + t) * inner + i;
            let dot: f64 = (0..n).map(|t| g[idx(t)] * y[idx(t)]).sum();
            for t in 0..n {
                gx[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
            }
        }
    }
}

/// Normalizes rows of length `n`; returns `(normalized, inverse std per row)`.
pub fn layer_norm(x: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv[r] = s;
        for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (xhat, inv)
}

/// Gradient of the normalization step given `gxhat = dL/dxhat`.
pub fn layer_norm_grad(xhat: &[f64], inv: &[f64], gxhat: &[f64], gx: &mut [f64], n: usize) {
    let nf = n as f64;
    for (r, s) in inv.iter().enumerate() {
        let range = r * n..(r + 1) * n;
        let gh = &gxhat[range.clone()];
        let xh = &xhat[range.clone()];
        let sum_g: f64 = gh.iter().sum();
        let sum_gx: f64 = gh.iter().zip(xh).map(|(a, b)| a * b).sum();
        for ((o, g), x) in gx[range].iter_mut().zip(gh).zip(xh) {
            *o += s / nf * (nf * g - sum_g - x * sum_gx);
        }
    }
}

/// Geometry of a 3-D cross-correlation over `[C×W×H×D]` volumes.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        input: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if span < k || stride == 0 {
                return None;
            }
            output[a] = (span - k) / stride + 1;
        }
        Some(Self {
            cin,
            cout,
            k,
            stride,
            pad,
            input,
            output,
        })
    }

    fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    fn out_size(&self) -> usize {
        self.output.iter().product()
    }

    /// Output indices `o` with `o*stride + offset - pad` inside `0..n`.
    fn valid(&self, axis: usize, offset: usize) -> std::ops::Range<usize> {
        let (s, p, n) = (self.stride as i64, self.pad as i64, self.input[axis] as i64);
        let off = offset as i64;
        let lo = if p > off { (p - off + s - 1) / s } else { 0 };
        let hi_num = n - 1 + p - off;
        if hi_num < 0 {
            return 0..0;
        }
        let hi = (hi_num / s + 1).min(self.output[axis] as i64);
        (lo as usize)..(hi.max(lo) as usize)
    }

    /// Calls `f(weight_index, out_row, in_row, oz_range, iz_of_first)` for every
    /// contiguous output row touched by every kernel tap.
    #[inline(always)]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, std::ops::Range<usize>, usize)) {
        let [_, ih, id] = self.input;
        let [_, oh, od] = self.output;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let (isz, osz) = (self.in_size(), self.out_size());
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for a in 0..k {
                    let rx = self.valid(0, a);
                    for b in 0..k {
                        let ry = self.valid(1, b);
                        for c in 0..k {
                            let rz = self.valid(2, c);
                            if rz.is_empty() {
                                continue;
                            }
                            let widx = (((co * self.cin + ci) * k + a) * k + b) * k + c;
                            let iz0 = rz.start * s + c - p;
                            for ox in rx.clone() {
                                let ix = ox * s + a - p;
                                for oy in ry.clone() {
                                    let iy = oy * s + b - p;
                                    let orow = co * osz + (ox * oh + oy) * od;
                                    let irow = ci * isz + (ix * ih + iy) * id;
                                    f(widx, orow, irow, rz.clone(), iz0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.cout * g.out_size()];
    let s = g.stride;
    g.for_each_row(|widx, orow, irow, rz, iz0| {
        let wv = w[widx];
        let len = rz.len();
        let o = &mut out[orow + rz.start..orow + rz.end];
        if s == 1 {
            let i = &x[irow + iz0..irow + iz0 + len];
            for (ov, iv) in o.iter_mut().zip(i) {
                *ov += wv * iv;
            }
        } else {
            for (t, ov) in o.iter_mut().enumerate() {
                *ov += wv * x[irow + iz0 + t * s];
            }
        }
    });
    out
}

/// Accumulates input and weight gradients of [`conv3d`].
pub fn conv3d_grad(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    g: &ConvGeom,
) {
    let s = g.stride;
    if let Some(gx) = gx {
        g.for_each_row(|widx, orow, irow, rz, iz0| {
            let wv = w[widx];
            let go = &gout[orow + rz.start..orow + rz.end];
            if s == 1 {
                let len = rz.len();
                for (xv, gv) in gx[irow + iz0..irow + iz0 + len].iter_mut().zip(go) {
                    *xv += wv * gv;
                }
            } else {
                for (t, gv) in go.iter().enumerate() {
                    gx[irow + iz0 + t * s] += wv * gv;
                }
            }
        });
    }
    if let Some(gw) = gw {
        g.for_each_row(|widx, orow, irow, rz, iz0| {
            let go = &gout[orow + rz.start..orow + rz.end];
            let acc: f64 = if s == 1 {
                go.iter().zip(&x[irow + iz0..irow + iz0 + rz.len()]).map(|(a, b)| a * b).sum()
            } else {
                go.iter().enumerate().map(|(t, gv)| gv * x[irow + iz0 + t * s]).sum()
            };
            gw[widx] += acc;
        });
    }
}

/// Nearest-neighbour upsampling of `[C×W×H×D]` by an integer factor.
pub fn upsample_nearest(x: &[f64], c: usize, dims: [usize; 3], f: usize) -> Vec<f64> {
    let [w, h, d] = dims;
    let (ow, oh, od) = (w * f, h * f, d * f);
    let mut out = vec![0.0; c * ow * oh * od];
    for ch in 0..c {
        for i in 0..ow {
            for j in 0..oh {
                let src = ((ch * w + i / f) * h + j / f) * d;
                let dst = ((ch * ow + i) * oh + j) * od;
                for k in 0..od {
                    out[dst + k] = x[src + k / f];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_grad(g: &[f64], gx: &mut [f64], c: usize, dims: [usize; 3], f: usize) {
    let [w, h, d] = dims;
    let (ow, oh, od) = (w * f, h * f, d * f);
    for ch in 0..c {
        for i in 0..ow {
            for j in 0..oh {
                let src = ((ch * w + i / f) * h + j / f) * d;
                let dst = ((ch * ow + i) * oh + j) * od;
                for k in 0..od {
                    gx[src + k / f] += g[dst + k];
                }
            }
        }
    }
}
