//! Dense row-major matrix products over `f64`.
//!
//! The inner kernel is `matrixmultiply::dgemm`. Work is split across output
//! rows only, so every output element is reduced in the same order no matter
//! how many rows are computed together or how many threads run.

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` view.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length");
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Transposed view; no copy.
    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, row_stride: self.col_stride, col_stride: self.row_stride }
    }

    fn rows_from(self, start: usize, count: usize) -> Self {
        let offset = if count == 0 { 0 } else { start * self.row_stride };
        MatRef { data: &self.data[offset..], rows: count, ..self }
    }
}

#[cfg(feature = "parallel")]
const ROWS_PER_TASK: usize = 64;

/// `c = a * b` (or `c += a * b` when `accumulate`), with `c` row-major.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (m, n) = (a.rows, b.cols);
    assert_eq!(c.len(), m * n, "output buffer length");
    if m == 0 || n == 0 {
        return;
    }
    let chunk = |first_row: usize, out: &mut [f64]| {
        let rows = out.len() / n;
        let a = a.rows_from(first_row, rows);
        kernel(a, b, out, accumulate);
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if m > ROWS_PER_TASK && rayon::current_num_threads() > 1 {
            c.par_chunks_mut(ROWS_PER_TASK * n).enumerate().for_each(|(i, out)| chunk(i * ROWS_PER_TASK, out));
            return;
        }
    }
    chunk(0, c);
}

fn kernel(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // Bounds: the furthest element each view touches must be in range.
    assert!((m - 1) * a.row_stride + (k - 1) * a.col_stride < a.data.len());
    assert!((k - 1) * b.row_stride + (n - 1) * b.col_stride < b.data.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is an exclusively borrowed m x n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sum over rows of a row-major `rows x cols` matrix.
pub fn column_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}
