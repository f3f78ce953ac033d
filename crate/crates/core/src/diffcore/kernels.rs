//! Forward and backward kernels on flat row-major buffers.

/// `y = x·w + b` for `x: n×din`, `w: din×dout`, `b: dout`.
pub fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        let yr = &mut y[i * dout..(i + 1) * dout];
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        let xr = &x[i * din..(i + 1) * din];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * dout..(k + 1) * dout];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// `dx = dy·wᵀ`.
pub fn affine_grad_input(dy: &[f64], w: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let dyr = &dy[i * dout..(i + 1) * dout];
        for k in 0..din {
            let wr = &w[k * dout..(k + 1) * dout];
            dx[i * din + k] = dyr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

/// `dw = xᵀ·dy`.
pub fn affine_grad_weight(x: &[f64], dy: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut dw = vec![0.0; din * dout];
    for i in 0..n {
        let dyr = &dy[i * dout..(i + 1) * dout];
        for k in 0..din {
            let xv = x[i * din + k];
            if xv == 0.0 {
                continue;
            }
            let dwr = &mut dw[k * dout..(k + 1) * dout];
            for (d, &g) in dwr.iter_mut().zip(dyr) {
                *d += xv * g;
            }
        }
    }
    dw
}

/// `db = Σ_rows dy`.
pub fn affine_grad_bias(dy: &[f64], n: usize, dout: usize) -> Vec<f64> {
    let mut db = vec![0.0; dout];
    for i in 0..n {
        for (d, &g) in db.iter_mut().zip(&dy[i * dout..(i + 1) * dout]) {
            *d += g;
        }
    }
    db
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Row-wise softmax over the first `width` columns of an `n×cols` buffer,
/// using max subtraction. Returns an `n×width` buffer.
pub fn softmax_rows(x: &[f64], n: usize, cols: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * width];
    for i in 0..n {
        let row = &x[i * cols..i * cols + width];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * width..(i + 1) * width];
        let mut sum = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            sum += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    out
}

/// Row-wise log-softmax over the first `width` columns (log-sum-exp form).
pub fn log_softmax_rows(x: &[f64], n: usize, cols: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * width];
    for i in 0..n {
        let row = &x[i * cols..i * cols + width];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[i * width..(i + 1) * width].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
