//! Tight inner loops shared by forward and backward passes. All three
//! matrix-product variants keep the innermost loop contiguous in both
//! operands so the compiler can vectorize them.

/// out += a (m×k) · b (k×n). `out` must be m×n and is accumulated into.
pub fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// c = a (m×k) · b (k×n).
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    mm_acc(a, b, &mut out, m, k, n);
    out
}

/// c = aᵀ (k×m) · b — i.e. a is stored m×k and used transposed. Result k×n.
pub fn mm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// c = a (m×k) · bᵀ — b is stored n×k and used transposed. Result m×n.
pub fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] = acc;
        }
    }
    out
}

/// Numerically stable softmax over each length-`d` row of `x`, in place on a
/// fresh buffer. Rows are strictly positive and sum to 1.
pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    debug_assert!(d > 0 && x.len() % d == 0);
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - m).exp();
            *o = e;
            z += e;
        }
        let inv = 1.0 / z;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_ones_2x3_3x2_is_all_threes() {
        let out = mm(&[1.0; 6], &[1.0; 6], 2, 3, 2);
        assert_eq!(out, vec![3.0; 4]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        // a: 2x3, b: 2x4 -> mm_at gives aᵀ·b : 3x4
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, -1.0, 2.0, 0.0, 1.5, 2.5, -0.5, 3.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        assert_eq!(mm_at(&a, &b, 2, 3, 4), mm(&at, &b, 3, 2, 4));
        // a: 2x3, b stored 4x3 -> mm_bt gives a·bᵀ : 2x4
        let b2 = [
            1.0, 0.0, -1.0, 2.0, 1.0, 0.5, 0.0, 3.0, 1.0, -2.0, 0.5, 1.5,
        ];
        let b2t = [
            1.0, 2.0, 0.0, -2.0, 0.0, 1.0, 3.0, 0.5, -1.0, 0.5, 1.0, 1.5,
        ]; // 3x4
        assert_eq!(mm_bt(&a, &b2, 2, 3, 4), mm(&a, &b2t, 2, 3, 4));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let out = softmax_rows(&[0.0, 0.0], 2);
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_large_logits() {
        // Spreads beyond ~745 underflow to exact zero in f64; within that
        // range rows stay strictly positive and normalized even when the
        // raw exponentials would overflow without max subtraction.
        let out = softmax_rows(&[400.0, -300.0, 3.0, 703.0, 700.0, 701.0], 3);
        for row in out.chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
