//! Raw slice kernels shared by the forward and backward passes.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(grow, brow);
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, gj) in crow.iter_mut().zip(grow) {
                *cj += aip * gj;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn range(&self, k: usize, extent: usize) -> (usize, usize) {
        let shift = k as isize - self.pad();
        let lo = (-shift).max(0) as usize;
        let hi = (extent as isize - shift).min(extent as isize).max(0) as usize;
        (lo, hi)
    }
}

/// Unfolds one `C×H×W` image into `[C·K·K, H·W]` patch columns (zero padded).
fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = h * w;
    let pad = g.pad();
    cols.fill(0.0);
    for c in 0..g.in_ch {
        let iplane = &image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (y0, y1) = g.range(ky, h);
            for kx in 0..k {
                let (x0, x1) = g.range(kx, w);
                let row = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let iy = (y as isize + ky as isize - pad) as usize;
                    let ix0 = (x0 as isize + kx as isize - pad) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&iplane[iy * w + ix0..iy * w + ix0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back onto the image.
fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = h * w;
    let pad = g.pad();
    for c in 0..g.in_ch {
        let iplane = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (y0, y1) = g.range(ky, h);
            for kx in 0..k {
                let (x0, x1) = g.range(kx, w);
                let row = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let iy = (y as isize + ky as isize - pad) as usize;
                    let ix0 = (x0 as isize + kx as isize - pad) as usize;
                    let dst = &mut iplane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                    for (d, v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 2-d convolution over NCHW input with OCKK weights.
pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.height * g.width;
    let ckk = g.in_ch * g.kernel * g.kernel;
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let mut cols = vec![0.0; ckk * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * g.in_ch * plane..(n + 1) * g.in_ch * plane], &mut cols);
        let o = &mut out[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        for (ch, oplane) in o.chunks_mut(plane).enumerate() {
            oplane.fill(bias[ch]);
        }
        matmul_acc(weight, &cols, o, g.out_ch, ckk, plane);
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    mut dweight: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let plane = g.height * g.width;
    let ckk = g.in_ch * g.kernel * g.kernel;
    let ipl = g.in_ch * plane;
    let mut cols = vec![0.0; ckk * plane];
    for n in 0..g.batch {
        let d = &dout[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        if let Some(db) = dbias.as_deref_mut() {
            for (o, gplane) in d.chunks(plane).enumerate() {
                db[o] += gplane.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            im2col(g, &input[n * ipl..(n + 1) * ipl], &mut cols);
            matmul_nt_acc(d, &cols, dw, g.out_ch, plane, ckk);
        }
        if let Some(di) = dinput.as_deref_mut() {
            cols.fill(0.0);
            matmul_tn_acc(weight, d, &mut cols, g.out_ch, ckk, plane);
            col2im_add(g, &cols, &mut di[n * ipl..(n + 1) * ipl]);
        }
    }
}

/// 2×2 average pooling with stride 2 over the last two axes.
pub(crate) fn avgpool2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let ip = &input[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let s = ip[2 * y * w + 2 * x]
                    + ip[2 * y * w + 2 * x + 1]
                    + ip[(2 * y + 1) * w + 2 * x]
                    + ip[(2 * y + 1) * w + 2 * x + 1];
                out[(p * oh + y) * ow + x] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(dout: &[f64], dinput: &mut [f64], planes: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * dout[(p * oh + y) * ow + x];
                let base = p * h * w;
                dinput[base + 2 * y * w + 2 * x] += g;
                dinput[base + 2 * y * w + 2 * x + 1] += g;
                dinput[base + (2 * y + 1) * w + 2 * x] += g;
                dinput[base + (2 * y + 1) * w + 2 * x + 1] += g;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
