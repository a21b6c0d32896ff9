// Plain loops with a fixed accumulation order. Every reduction runs in
// ascending index order so results are reproducible run to run.

/// `out[n,m] += a[n,k] * b[k,m]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,k] += g[n,m] * b[k,m]^T`
pub(crate) fn gemm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let g_row = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let b_row = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for (x, y) in g_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,m] += a[n,k]^T * g[n,m]`
pub(crate) fn gemm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * m..(p + 1) * m];
            for (x, &gv) in o.iter_mut().zip(g_row) {
                *x += av * gv;
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [0.5, -1.0, 2.0, 0.0, 1.0, 3.0]; // 3x2
        let mut ab = vec![0.0; 4];
        gemm_acc(&a, &b, &mut ab, 2, 3, 2);
        assert_eq!(ab, vec![7.5, 8.0, 18.0, 14.0]);

        // g * b^T with g 2x2 and b 3x2 -> 2x3
        let mut gbt = vec![0.0; 6];
        gemm_bt_acc(&ab, &b, &mut gbt, 2, 3, 2);
        let bt = [0.5, 2.0, 1.0, -1.0, 0.0, 3.0]; // 2x3
        let mut expected = vec![0.0; 6];
        gemm_acc(&ab, &bt, &mut expected, 2, 2, 3);
        assert_eq!(gbt, expected);

        // a^T * g with a 2x3, g 2x2 -> 3x2
        let mut atg = vec![0.0; 6];
        gemm_at_acc(&a, &ab, &mut atg, 2, 3, 2);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut expected = vec![0.0; 6];
        gemm_acc(&at, &ab, &mut expected, 3, 2, 2);
        assert_eq!(atg, expected);
    }
}
