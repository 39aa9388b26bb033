//! Numeric forward/backward kernels shared by the tape and the value-level API.
//!
//! Feature maps are `[H, W, C]` row-major, so any map can be viewed as a
//! `[H*W, C]` matrix without copying.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // Row-major a is [m,k]; when transposed the storage is [k,m].
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output side length of a 3x3, padding-1 convolution.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len + 2 - 3) / stride + 1
}

/// Unfolds 3x3 zero-padded patches into a `[Ho*Wo, 9*C]` matrix.
pub fn im2col(x: &[f64], h: usize, w: usize, c: usize, stride: usize) -> Vec<f64> {
    let ho = conv_out_len(h, stride);
    let wo = conv_out_len(w, stride);
    let kc = 9 * c;
    let mut cols = vec![0.0; ho * wo * kc];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * kc..(oy * wo + ox + 1) * kc];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(cols: &[f64], h: usize, w: usize, c: usize, stride: usize) -> Vec<f64> {
    let ho = conv_out_len(h, stride);
    let wo = conv_out_len(w, stride);
    let kc = 9 * c;
    let mut x = vec![0.0; h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * kc..(oy * wo + ox + 1) * kc];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    for (d, s) in x[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// `y = x w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(n, inp, out, x, false, w, false, &mut y, 1.0);
    y
}

/// Gradients of [`linear`]: returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    n: usize,
    inp: usize,
    out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * inp];
    gemm(n, out, inp, grad, false, w, true, &mut dx, 0.0);
    let mut dw = vec![0.0; inp * out];
    gemm(inp, n, out, x, true, grad, false, &mut dw, 0.0);
    let mut db = vec![0.0; out];
    for row in grad.chunks_exact(out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `[rows, cols]` matrix.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for row in y.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    y
}

pub fn softmax_rows_backward(y: &[f64], grad: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((dxr, yr), gr) in dx
        .chunks_exact_mut(cols)
        .zip(y.chunks_exact(cols))
        .zip(grad.chunks_exact(cols))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, yv), gv) in dxr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameter-free normalisation of each row to zero mean, unit variance.
/// Returns the normalised rows and the per-row inverse standard deviation.
pub fn layer_norm_rows(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / cols);
    for (yr, xr) in y.chunks_exact_mut(cols).zip(x.chunks_exact(cols)) {
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in yr.iter_mut().zip(xr) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (y, inv_std)
}

pub fn layer_norm_rows_backward(y: &[f64], inv_std: &[f64], grad: &[f64], cols: usize) -> Vec<f64> {
    let n = cols as f64;
    let mut dx = vec![0.0; y.len()];
    for (((dxr, yr), gr), is) in dx
        .chunks_exact_mut(cols)
        .zip(y.chunks_exact(cols))
        .zip(grad.chunks_exact(cols))
        .zip(inv_std)
    {
        let mean_g = gr.iter().sum::<f64>() / n;
        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
        for ((d, g), yv) in dxr.iter_mut().zip(gr).zip(yr) {
            *d = is * (g - mean_g - yv * mean_gy);
        }
    }
    dx
}

/// Cosine similarity stabiliser added to the norm product.
pub const COSINE_EPS: f64 = 1e-8;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a.b / (|a||b| + eps)` clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b) + COSINE_EPS)).clamp(-1.0, 1.0)
}

/// Accumulates `upstream * d cos(a, b)` into `da` and `db`.
pub fn cosine_backward(a: &[f64], b: &[f64], upstream: f64, da: &mut [f64], db: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    let d = dot(a, b);
    let denom = na * nb + COSINE_EPS;
    let raw = d / denom;
    if !(-1.0..=1.0).contains(&raw) {
        return;
    }
    let inv = 1.0 / denom;
    let coef = d * inv * inv;
    let ka = if na > 0.0 { coef * nb / na } else { 0.0 };
    let kb = if nb > 0.0 { coef * na / nb } else { 0.0 };
    for i in 0..a.len() {
        da[i] += upstream * (b[i] * inv - ka * a[i]);
        db[i] += upstream * (a[i] * inv - kb * b[i]);
    }
}

/// Closed-form KL(q || p) between diagonal Gaussians given as (mean, log-variance).
pub fn kl_diag(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mq.len() {
        let diff = mq[i] - mp[i];
        kl += lp[i] - lq[i] + ((lq[i] - lp[i]).exp() + diff * diff * (-lp[i]).exp()) - 1.0;
    }
    0.5 * kl
}

/// Gradients of [`kl_diag`] with respect to `(mq, lq, mp, lp)`.
pub fn kl_diag_backward(
    mq: &[f64],
    lq: &[f64],
    mp: &[f64],
    lp: &[f64],
) -> [Vec<f64>; 4] {
    let d = mq.len();
    let mut g = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    for i in 0..d {
        let diff = mq[i] - mp[i];
        let inv_vp = (-lp[i]).exp();
        let ratio = (lq[i] - lp[i]).exp();
        g[0][i] = diff * inv_vp;
        g[1][i] = 0.5 * (ratio - 1.0);
        g[2][i] = -diff * inv_vp;
        g[3][i] = 0.5 * (1.0 - ratio - diff * diff * inv_vp);
    }
    g
}

/// Mean two-class cross-entropy over pixels of `[n, 2]` logits.
pub fn cross_entropy2(logits: &[f64], target: &[u8]) -> f64 {
    let mut total = 0.0;
    for (l, &t) in logits.chunks_exact(2).zip(target) {
        let max = l[0].max(l[1]);
        let lse = max + ((l[0] - max).exp() + (l[1] - max).exp()).ln();
        total += lse - l[t as usize];
    }
    total / target.len() as f64
}

pub fn cross_entropy2_backward(logits: &[f64], target: &[u8]) -> Vec<f64> {
    let n = target.len() as f64;
    let mut g = Vec::with_capacity(logits.len());
    for (l, &t) in logits.chunks_exact(2).zip(target) {
        let p1 = sigmoid(l[1] - l[0]);
        let p = [1.0 - p1, p1];
        for c in 0..2 {
            let onehot = if c == t as usize { 1.0 } else { 0.0 };
            g.push((p[c] - onehot) / n);
        }
    }
    g
}

/// Foreground probability of each `[fg_bg]` logit pair (channel 1 = foreground).
pub fn foreground_probability(logits: &[f64]) -> Vec<f64> {
    logits.chunks_exact(2).map(|l| sigmoid(l[1] - l[0])).collect()
}
