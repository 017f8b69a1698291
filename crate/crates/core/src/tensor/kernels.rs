//! Matrix-multiply kernels used by the tape.
//!
//! All three variants parallelize over output rows; every output element is
//! written by exactly one thread with a fixed summation order, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

/// Work threshold below which the serial path is used.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// C[m x n] = A[m x k] * B[k x n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f64]| {
        out_row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    };
    if m * k * n < PAR_FLOP_THRESHOLD {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    } else {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    }
}

/// C[m x k] = A[m x n] * B^T, with B stored [k x n]. Used for dA = dC * B^T.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let row = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *o = s;
        }
    };
    if m * n * k < PAR_FLOP_THRESHOLD {
        for (i, out_row) in out.chunks_mut(k).enumerate() {
            row(i, out_row);
        }
    } else {
        out.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    }
}

/// C[k x n] = A^T * B, with A stored [m x k], B stored [m x n]. Used for dB = A^T * dC.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |p: usize, out_row: &mut [f64]| {
        out_row.fill(0.0);
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bij) in out_row.iter_mut().zip(b_row) {
                *o += aip * bij;
            }
        }
    };
    if m * k * n < PAR_FLOP_THRESHOLD {
        for (p, out_row) in out.chunks_mut(n).enumerate() {
            row(p, out_row);
        }
    } else {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, out_row)| row(p, out_row));
    }
}
