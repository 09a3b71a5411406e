//! Inner loops shared by forward and backward rules.

/// `out[m x n] += a[m x k] * b[k x n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &w) in a_row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &x) in out_row.iter_mut().zip(b_row) {
                *o += w * x;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(g_row, b_row);
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let w = a[i * k + p];
            if w == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &x) in out_row.iter_mut().zip(g_row) {
                *o += w * x;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Split `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Offset of padding for a symmetric ("same") dilated convolution.
pub(crate) fn same_padding(taps: usize, dilation: usize) -> usize {
    (taps - 1) * dilation / 2
}

/// `y[c,t] += sum_k w[c,k] * x[c, t + k*d - pad]`, zero outside `[0, T)`.
pub(crate) fn depthwise_forward(
    x: &[f64],
    w: &[f64],
    channels: usize,
    frames: usize,
    taps: usize,
    dilation: usize,
    y: &mut [f64],
) {
    let pad = same_padding(taps, dilation) as isize;
    for c in 0..channels {
        let xr = &x[c * frames..(c + 1) * frames];
        let yr = &mut y[c * frames..(c + 1) * frames];
        for k in 0..taps {
            let wk = w[c * taps + k];
            let shift = (k * dilation) as isize - pad;
            let (t0, t1) = valid_range(shift, frames);
            for t in t0..t1 {
                yr[t] += wk * xr[(t as isize + shift) as usize];
            }
        }
    }
}

/// Range of output frames `t` with `0 <= t + shift < frames`.
pub(crate) fn valid_range(shift: isize, frames: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (frames as isize - shift).clamp(0, frames as isize) as usize;
    (lo.min(hi), hi)
}
