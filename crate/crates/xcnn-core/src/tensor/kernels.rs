//! Shared numeric kernels.
//!
//! Both the tape ops and the no-tape inference path call into these, which
//! guarantees forward results are identical whether or not gradients are
//! being recorded.
//!
//! Long reductions (dot products, channel statistics) accumulate in f64
//! regardless of the element type: summing thousands of 32-bit terms in
//! 32-bit loses enough digits to visibly perturb batch-norm statistics and
//! gradients downstream. Storage stays in the element width.

use super::Element;

/// out[m,n] = a[m,k] * b[k,n]
pub(crate) fn matmul<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    out: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        for v in acc.iter_mut() {
            *v = 0.0;
        }
        for p in 0..k {
            let av = a[i * k + p].to_f64();
            let row = &b[p * n..(p + 1) * n];
            for (d, &bv) in acc.iter_mut().zip(row) {
                *d += av * bv.to_f64();
            }
        }
        for (d, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *d = E::from_f64(v);
        }
    }
}

/// y[n,o] = x[n,f] . w[o,f]^T + b[o]
pub(crate) fn linear<E: Element>(
    n: usize,
    f: usize,
    o: usize,
    x: &[E],
    w: &[E],
    b: &[E],
    out: &mut [E],
) {
    debug_assert_eq!(out.len(), n * o);
    for i in 0..n {
        let xi = &x[i * f..(i + 1) * f];
        for j in 0..o {
            let wj = &w[j * f..(j + 1) * f];
            let mut acc = b[j].to_f64();
            for (xv, wv) in xi.iter().zip(wj) {
                acc += xv.to_f64() * wv.to_f64();
            }
            out[i * o + j] = E::from_f64(acc);
        }
    }
}

/// Cross-correlation of x[n,c,h,w] with w[o,c,k,k] plus bias, zero padding.
/// Output extents must already be validated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d<E: Element>(
    (n, c, h, w): (usize, usize, usize, usize),
    (oc, k, stride, pad): (usize, usize, usize, usize),
    x: &[E],
    weight: &[E],
    bias: &[E],
    out: &mut [E],
) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    debug_assert_eq!(out.len(), n * oc * oh * ow);
    for ni in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o].to_f64();
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let xrow = ((ni * c + ci) * h + iy) * w;
                            let wrow = ((o * c + ci) * k + ky) * k;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                acc += x[xrow + (ix - pad)].to_f64()
                                    * weight[wrow + kx].to_f64();
                            }
                        }
                    }
                    out[((ni * oc + o) * oh + oy) * ow + ox] = E::from_f64(acc);
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first maximum in scan
/// order (top-left first), and `argmax` records the flat input index each
/// output element was taken from so backward can route gradients there.
pub(crate) fn maxpool2x2<E: Element>(
    (n, c, h, w): (usize, usize, usize, usize),
    x: &[E],
    out: &mut [E],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), n * c * oh * ow);
    for img in 0..n * c {
        let base = img * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = img * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Per-channel mean and biased variance over batch x H x W, in f64 so
/// downstream normalization starts from full-precision statistics.
pub(crate) fn channel_stats<E: Element>(
    (n, c, h, w): (usize, usize, usize, usize),
    x: &[E],
) -> (Vec<f64>, Vec<f64>) {
    let m = (n * h * w) as f64;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x[((ni * c + ci) * h * w)..((ni * c + ci + 1) * h * w)];
            for &v in plane {
                sum[ci] += v.to_f64();
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x[((ni * c + ci) * h * w)..((ni * c + ci + 1) * h * w)];
            for &v in plane {
                let d = v.to_f64() - mean[ci];
                sq[ci] += d * d;
            }
        }
    }
    let var = sq.iter().map(|&s| s / m).collect();
    (mean, var)
}

/// y = gamma[c] * (x - mean[c]) * inv_std[c] + beta[c], evaluated in f64 and
/// rounded once at the output.
pub(crate) fn batchnorm_apply<E: Element>(
    (n, c, h, w): (usize, usize, usize, usize),
    x: &[E],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[E],
    beta: &[E],
    out: &mut [E],
) {
    let plane = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (g, b) = (gamma[ci].to_f64(), beta[ci].to_f64());
            for i in base..base + plane {
                out[i] = E::from_f64(g * (x[i].to_f64() - mu) * is + b);
            }
        }
    }
}

/// Row-wise softmax with max subtraction, rows of width `k`. The exp/sum
/// pipeline runs in f64 and rounds once per element.
pub(crate) fn softmax_rows<E: Element>(n: usize, k: usize, z: &[E], out: &mut [E]) {
    debug_assert_eq!(z.len(), n * k);
    let mut row64 = vec![0.0f64; k];
    for i in 0..n {
        let row = &z[i * k..(i + 1) * k];
        let mut mx = row[0];
        for &v in row {
            mx = mx.maximum(v);
        }
        let mut sum = 0.0f64;
        for (d, &v) in row64.iter_mut().zip(row) {
            *d = (v - mx).to_f64().exp();
            sum += *d;
        }
        for (o, &e) in out[i * k..(i + 1) * k].iter_mut().zip(&row64) {
            *o = E::from_f64(e / sum);
        }
    }
}

/// Index of the row maximum; ties resolve to the lowest index.
pub(crate) fn argmax_row<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let x = [3.0, -1.0, 2.0, 5.0];
        let mut out = [0.0f64; 4];
        matmul(2, 2, 2, &eye, &x, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax_row(&[1.0f32, 3.0, 3.0, 0.5]), 1);
        assert_eq!(argmax_row(&[2.0f32, 2.0, 2.0]), 0);
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let z = [1.0f64, 2.0, 3.0, 1000.0, 1000.0, 1000.0];
        let mut p = [0.0; 6];
        softmax_rows(2, 3, &z, &mut p);
        for row in p.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // max subtraction keeps huge logits finite and exact ties uniform
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
