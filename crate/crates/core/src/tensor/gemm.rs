/// Strided view of a row-major-ish matrix living inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!(a.rows, c.rows, "output rows");
    assert_eq!(b.cols, c.cols, "output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(max_offset(a.rows, a.cols, a.row_stride, a.col_stride) < a.data.len().max(1));
    assert!(max_offset(b.rows, b.cols, b.row_stride, b.col_stride) < b.data.len().max(1));
    assert!(max_offset(c.rows, c.cols, c.row_stride, c.col_stride) < c.data.len());
    if a.cols == 0 {
        // empty inner dimension: a*b is the zero matrix
        for r in 0..c.rows {
            for k in 0..c.cols {
                let v = &mut c.data[r * c.row_stride + k * c.col_stride];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the max offsets
    // asserted above, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}
