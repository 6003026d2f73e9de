//! Safe wrappers over the strided GEMM kernel plus a few row-wise helpers.

use super::Element;

/// A strided read-only matrix view over a flat slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a, E> {
    data: &'a [E],
    rs: usize,
    cs: usize,
}

impl<'a, E: Element> MatRef<'a, E> {
    pub fn row_major(data: &'a [E], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [E], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `out (m×n) [+]= a (m×k) · b (k×n)`; accumulates when `accumulate` is set.
pub fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, E>,
    b: MatRef<'_, E>,
    out: &mut [E],
    accumulate: bool,
) {
    assert!(a.max_index(m, k) <= a.data.len(), "gemm: lhs out of bounds");
    assert!(b.max_index(k, n) <= b.data.len(), "gemm: rhs out of bounds");
    assert!(out.len() >= m * n, "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { E::one() } else { E::zero() };
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|x| *x = E::zero());
        }
        return;
    }
    // SAFETY: bounds asserted above; `out` is a distinct mutable borrow.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable log-sum-exp of a row.
pub fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    if max == E::neg_infinity() {
        return max;
    }
    let s: E = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn axpy<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
