//! Row-major matrix products on slices, split over row blocks of the output.

use super::Scalar;
use crate::exec;

/// Storage order of a GEMM operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Operand is stored as written (`rows x cols`, row-major).
    N,
    /// Operand is stored transposed (`cols x rows`, row-major).
    T,
}

const ROW_BLOCK: usize = 32;

/// `c[m x n] = a[m x k] * b[k x n] (+ c if accumulate)`.
///
/// `a` and `b` may be stored transposed as described by `op_a`/`op_b`.
/// Row blocks of `c` are computed independently, so the result does not
/// depend on how many threads run.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1isize),
        Op::T => (1isize, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1isize),
        Op::T => (1isize, k as isize),
    };
    let a_ptr = a.as_ptr() as usize;
    let b_ptr = b.as_ptr() as usize;
    exec::for_each_chunk_mut(c, ROW_BLOCK * n, |blk, c_rows| {
        let r0 = blk * ROW_BLOCK;
        let rows = c_rows.len() / n;
        // SAFETY: row block r0..r0+rows lies inside `a` (checked lengths above),
        // `b` is read-only and shared, and `c_rows` is this task's exclusive slice.
        unsafe {
            let a_blk = (a_ptr as *const T).offset(r0 as isize * rsa);
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a_blk,
                rsa,
                csa,
                b_ptr as *const T,
                rsb,
                csb,
                beta,
                c_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: Op, b: &[f64], tb: Op) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta == Op::N { a[i * k + p] } else { a[p * m + i] };
                    let bv = if tb == Op::N { b[p * n + j] } else { b[j * k + p] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_for_all_transposes() {
        let (m, k, n) = (70, 13, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 3) % 5) as f64 * 0.5).collect();
        for ta in [Op::N, Op::T] {
            for tb in [Op::N, Op::T] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, &mut c, false);
                let want = naive(m, k, n, &a, ta, &b, tb);
                assert_eq!(c, want);
                gemm(m, k, n, &a, ta, &b, tb, &mut c, true);
                let doubled: Vec<f64> = want.iter().map(|v| 2.0 * v).collect();
                assert_eq!(c, doubled);
            }
        }
    }
}
