//! Thin safe wrapper over `matrixmultiply::sgemm`.

/// Row/column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: isize,
    pub cols: isize,
}

impl Layout {
    /// Row-major storage of a matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self {
            rows: cols as isize,
            cols: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self {
            rows: 1,
            cols: cols as isize,
        }
    }
}

fn max_index(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * l.rows + (cols - 1) as isize * l.cols) as usize
}

/// `c = beta * c + a · b` where `a` is m×k, `b` is k×n and `c` is m×n row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_index(m, k, la) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || max_index(k, n, lb) < b.len(), "gemm: rhs out of bounds");
    assert!(c.len() >= m * n, "gemm: output out of bounds");
    // SAFETY: every index reachable through the given strides was checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2, 3, 4, &a, Layout::row_major(3), &b, Layout::row_major(4), 1.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = 1.0 + (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f32>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ · a  (3x3)
        let mut g = vec![0.0; 9];
        gemm(3, 2, 3, &a, Layout::transposed(3), &a, Layout::row_major(3), 0.0, &mut g);
        for i in 0..3 {
            for j in 0..3 {
                let want: f32 = (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum();
                assert_eq!(g[i * 3 + j], want);
            }
        }
    }
}
