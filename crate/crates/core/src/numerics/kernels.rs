//! Slice-level kernels shared by the autodiff graph and the incremental
//! decoder, so both paths produce bit-identical values.

use super::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `out = a[m,k] · b[k,n]`
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_acc_nt<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_acc_tn<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

pub(crate) fn add_row_bias<S: Scalar>(x: &mut [S], bias: &[S]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for &v in x {
        sum += (v - max).exp();
    }
    let log_z = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - log_z;
    }
}

/// Normalizes one row, returning `(xhat, inv_std)` side products for backward.
pub(crate) fn layer_norm_row<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    out: &mut [S],
    xhat: &mut [S],
) -> S {
    let n = S::of(x.len() as f64);
    let mean = x.iter().fold(S::zero(), |a, &b| a + b) / n;
    let var = x.iter().fold(S::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
    let inv_std = S::one() / (var + S::of(LN_EPS)).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = xhat[i] * gamma[i] + beta[i];
    }
    inv_std
}

/// Single-query, single-head scaled dot-product attention.
///
/// `keys`/`values` hold `n_keys` rows of width `d`; the head occupies columns
/// `head*dh .. (head+1)*dh`. Keys flagged invalid get zero probability. Writes
/// the probabilities into `probs` and the head output into `out` (length `dh`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<S: Scalar>(
    q: &[S],
    keys: &[S],
    values: &[S],
    d: usize,
    head: usize,
    dh: usize,
    n_keys: usize,
    valid: Option<&[bool]>,
    probs: &mut [S],
    out: &mut [S],
) {
    let off = head * dh;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let qh = &q[off..off + dh];
    let mut max = S::neg_infinity();
    for j in 0..n_keys {
        if valid.is_some_and(|m| !m[j]) {
            probs[j] = S::neg_infinity();
            continue;
        }
        let kh = &keys[j * d + off..j * d + off + dh];
        let mut s = S::zero();
        for (&a, &b) in qh.iter().zip(kh) {
            s += a * b;
        }
        s *= scale;
        probs[j] = s;
        if s > max {
            max = s;
        }
    }
    out.iter_mut().for_each(|o| *o = S::zero());
    if max == S::neg_infinity() {
        probs[..n_keys].iter_mut().for_each(|p| *p = S::zero());
        return;
    }
    let mut sum = S::zero();
    for p in probs[..n_keys].iter_mut() {
        *p = if *p == S::neg_infinity() {
            S::zero()
        } else {
            (*p - max).exp()
        };
        sum += *p;
    }
    for j in 0..n_keys {
        probs[j] /= sum;
        let pj = probs[j];
        if pj == S::zero() {
            continue;
        }
        let vh = &values[j * d + off..j * d + off + dh];
        for (o, &v) in out.iter_mut().zip(vh) {
            *o += pj * v;
        }
    }
}

pub(crate) fn sinusoid<S: Scalar>(max_len: usize, d: usize) -> Vec<S> {
    let mut table = vec![S::zero(); max_len * d];
    let half = d / 2;
    for pos in 0..max_len {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let angle = pos as f64 * freq;
            table[pos * d + i] = S::of(angle.sin());
            table[pos * d + half + i] = S::of(angle.cos());
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let g = [1.0, 0.0, 0.0, 1.0]; // 2x2
        let mut out = vec![0.0; 6];
        matmul_acc_tn(&a, &g, 2, 3, 2, &mut out); // aᵀ g: 3x2
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let b = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2
        let mut out2 = vec![0.0; 6];
        matmul_acc_nt(&g, &b, 2, 3, 2, &mut out2); // g bᵀ: 2x3
        assert_eq!(out2, vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn fully_masked_query_yields_zeros() {
        let q = [1.0, 1.0];
        let kv = [1.0, 2.0];
        let mut probs = [0.0];
        let mut out = [9.0, 9.0];
        attend(&q, &kv, &kv, 2, 0, 2, 1, Some(&[false]), &mut probs, &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(probs, [0.0]);
    }
}
