use rayon::prelude::*;

/// Rows of the output handled by one task. Fixed so that results do not
/// depend on the size of the thread pool.
const ROW_CHUNK: usize = 128;

/// Below this many multiply-adds the product runs as a single call.
const PARALLEL_THRESHOLD: usize = 1 << 18;

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`), with `c` a contiguous
/// row-major `a.rows x b.cols` buffer.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    let run = |row0: usize, out: &mut [f64]| {
        let rows = out.len() / n;
        // SAFETY: the views were built from slices covering every strided
        // element of `a` and `b`, and `out` holds exactly `rows * n` values.
        unsafe {
            let a_ptr = a.data.as_ptr().offset(row0 as isize * a.rs);
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_ptr,
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n < PARALLEL_THRESHOLD || m <= ROW_CHUNK {
        run(0, c);
    } else {
        c.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, out)| run(i * ROW_CHUNK, out));
    }
}
