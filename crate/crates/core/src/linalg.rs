//! Thin wrappers over `matrixmultiply` for row-major dense blocks.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major `a` (m x k, or k x m when `ta`),
/// `b` (k x n, or n x k when `tb`) and `c` (m x n).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reached with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// `y = a x` for row-major `a` (rows x cols), or `a^T x` when `transpose`.
pub fn gemv(rows: usize, cols: usize, a: &[f64], transpose: bool, x: &[f64], y: &mut [f64], beta: f64) {
    if transpose {
        gemm(cols, rows, 1, 1.0, a, true, x, false, beta, y);
    } else {
        gemm(rows, cols, 1, 1.0, a, false, x, false, beta, y);
    }
}

/// Contract axis `axis` of a row-major tensor of shape `shape` with `m` (rows x shape[axis]).
pub fn contract_axis(data: &[f64], shape: &[usize], axis: usize, m: &[f64], rows: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * rows * inner];
    for o in 0..outer {
        gemm(
            rows,
            mid,
            inner,
            1.0,
            m,
            false,
            &data[o * mid * inner..(o + 1) * mid * inner],
            false,
            0.0,
            &mut out[o * rows * inner..(o + 1) * rows * inner],
        );
    }
    out
}

/// Apply one matrix per axis: `(m_0 ⊗ m_1 ⊗ ...) data`, each `m_a` being `rows[a] x shape[a]`.
pub fn tensor_apply(data: &[f64], shape: &[usize], mats: &[&[f64]], rows: &[usize]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut sh = shape.to_vec();
    for a in 0..shape.len() {
        cur = contract_axis(&cur, &sh, a, mats[a], rows[a]);
        sh[a] = rows[a];
    }
    cur
}

/// Transpose of a row-major `rows x cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2 x 3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3 x 2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [5.0, 11.0, 14.0, 23.0]);
        let at = transpose(&a, 2, 3);
        let bt = transpose(&b, 3, 2);
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, 1.0, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn tensor_apply_matches_loops() {
        let data: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2 x 3
        let m0 = [1.0, 1.0]; // 1 x 2
        let m1 = [1.0, 0.0, -1.0, 0.5, 0.5, 0.5]; // 2 x 3
        let out = tensor_apply(&data, &[2, 3], &[&m0, &m1], &[1, 2]);
        // column sums: [3, 5, 7]
        assert_eq!(out, vec![3.0 - 7.0, 7.5]);
    }
}
