//! Small dense kernels on row-major slices.

/// Largest `f64` strictly below one.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, evaluated without overflow and kept strictly inside
/// `(0, 1)` even where the exact value rounds to 0 or 1.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

/// In-place softmax over a contiguous slice.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of the softmax input given the output `a` and upstream `da`.
pub fn softmax_backward(a: &[f64], da: &[f64], dz: &mut [f64]) {
    let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
    for ((d, &ai), &dai) in dz.iter_mut().zip(a).zip(da) {
        *d = ai * (dai - dot);
    }
}

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a^T (k x m -> m x k) * b (k x n)`, i.e. `a` is stored `k x m`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += api * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T`, with `b` stored `n x k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_and_open() {
        assert_eq!(sigmoid(0.0), 0.5);
        let hi = sigmoid(50.0);
        assert!(hi < 1.0 && hi > 1.0 - 1e-9);
        let lo = sigmoid(-50.0);
        assert!(lo > 0.0 && lo < 1e-9);
        assert!(sigmoid(-1000.0) > 0.0);
        assert!(sigmoid(1000.0) < 1.0);
        assert!((sigmoid(2.0) - 0.8807970779778823).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut z = vec![1000.0, 1000.0, -5.0];
        softmax_in_place(&mut z);
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((z[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        // a^T b where a is 3x2 stored: use b as a (3x2), a' = b^T (2x3)
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // a transposed, 3x2
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), vec![4.0, 5.0, 10.0, 11.0]);
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0]; // b transposed, 2x3
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let z = [0.3, -1.2, 0.8];
        let da = [0.5, -0.25, 1.0];
        let f = |z: &[f64]| {
            let mut a = z.to_vec();
            softmax_in_place(&mut a);
            a.iter().zip(&da).map(|(x, y)| x * y).sum::<f64>()
        };
        let mut a = z.to_vec();
        softmax_in_place(&mut a);
        let mut dz = [0.0; 3];
        softmax_backward(&a, &da, &mut dz);
        for i in 0..3 {
            let mut p = z;
            let mut m = z;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - dz[i]).abs() < 1e-8);
        }
    }
}
