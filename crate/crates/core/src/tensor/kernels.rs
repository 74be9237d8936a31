//! Slice-level numeric kernels shared by the value API and the tape.

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating in `p`-major order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
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
    c
}

/// `da += dc · bᵀ` for `dc[m×n]`, `b[k×n]`.
pub fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in drow.iter().zip(brow) {
                acc += x * y;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `db += aᵀ · dc` for `a[m×k]`, `dc[m×n]`.
pub fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(drow) {
                *d += aip * g;
            }
        }
    }
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[at(j)] /= sum;
            }
        }
    }
    y
}

pub fn softmax_grad(y: &[f64], dy: &[f64], dx: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += y[at(j)] * dy[at(j)];
            }
            for j in 0..len {
                dx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

/// Layer norm over rows of width `n`. Returns (output, normalized, inverse std per row).
pub fn layer_norm(
    x: &[f64],
    n: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[r] = is;
        for j in 0..n {
            let h = (row[j] - mean) * is;
            xhat[r * n + j] = h;
            y[r * n + j] = gain[j] * h + bias[j];
        }
    }
    (y, xhat, inv)
}

/// Output `[C × Ho·Wo]` column matrix of a `C×H×W` input for a `k×k` window.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let cols = ho * wo;
    let mut out = vec![0.0; c * k * k * cols];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out[row * cols + oi * wo + oj] = x[(ch * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols_grad: &[f64],
    dx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let cols = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[(ch * h + ii as usize) * w + jj as usize] += cols_grad[row * cols + oi * wo + oj];
                    }
                }
            }
        }
    }
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable convolution of each `h×w` plane with a symmetric 1-D kernel and
/// symmetric-reflect borders. The resulting operator is doubly stochastic when
/// the kernel sums to one, so it preserves both constants and total mass.
pub fn smooth_planes(x: &[f64], planes: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let jj = reflect(j as isize + t as isize - r, w);
                    acc += kv * x[base + i * w + jj];
                }
                tmp[base + i * w + j] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let ii = reflect(i as isize + t as isize - r, h);
                    acc += kv * tmp[base + ii * w + j];
                }
                out[base + i * w + j] = acc;
            }
        }
    }
    out
}

/// Nearest-neighbour upsample of `planes × h × w` by integer factors.
pub fn upsample_nearest(x: &[f64], planes: usize, h: usize, w: usize, fy: usize, fx: usize) -> Vec<f64> {
    let (oh, ow) = (h * fy, w * fx);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                out[(p * oh + i) * ow + j] = x[(p * h + i / fy) * w + j / fx];
            }
        }
    }
    out
}

/// Average pooling with a square non-overlapping window.
pub fn avg_pool(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..h.min(oh * f) {
            for j in 0..w.min(ow * f) {
                out[(p * oh + i / f) * ow + j / f] += x[(p * h + i) * w + j] * norm;
            }
        }
    }
    out
}
