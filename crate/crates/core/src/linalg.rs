//! Tiny dense solvers for the small symmetric systems the pipeline builds
//! (spline normal equations, local LLC Gram matrices).

use crate::scalar::Real;

/// In-place Cholesky factorisation of a row-major `n x n` SPD matrix into its
/// lower triangle. Returns `false` if a pivot falls below
/// `rel_tol * max(diag)`.
pub fn cholesky_in_place<T: Real>(a: &mut [T], n: usize, rel_tol: T) -> bool {
    debug_assert_eq!(a.len(), n * n);
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(T::zero(), T::max);
    let floor = rel_tol * max_diag;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > floor) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L L^T x = b` for each of the `m` right-hand-side columns of the
/// row-major `n x m` matrix `b`, in place.
pub fn cholesky_solve<T: Real>(l: &[T], n: usize, b: &mut [T], m: usize) {
    debug_assert_eq!(b.len(), n * m);
    for c in 0..m {
        for i in 0..n {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
    }
}

/// Outcome of [`solve_spd`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveStatus {
    Exact,
    /// The system was near-singular; a ridge of the given size was added.
    Regularized(f64),
}

/// Solves the SPD system `a x = b` (`b` is `n x m`, overwritten with `x`).
/// If the factorisation breaks down, retries with `reg * trace(a) / n` added
/// to the diagonal. Returns `None` only if that also fails.
pub fn solve_spd<T: Real>(a: &[T], n: usize, b: &mut [T], m: usize, reg: T) -> Option<SolveStatus> {
    let mut l = a.to_vec();
    if cholesky_in_place(&mut l, n, T::of(1e-13)) {
        cholesky_solve(&l, n, b, m);
        return Some(SolveStatus::Exact);
    }
    let trace: T = (0..n).map(|i| a[i * n + i]).sum();
    let ridge = if trace > T::zero() {
        reg * trace / T::of_usize(n)
    } else {
        reg
    };
    l.copy_from_slice(a);
    for i in 0..n {
        l[i * n + i] += ridge;
    }
    if cholesky_in_place(&mut l, n, T::zero()) {
        cholesky_solve(&l, n, b, m);
        Some(SolveStatus::Regularized(ridge.as_f64()))
    } else {
        None
    }
}

/// `A^T A` for a row-major `r x c` matrix.
pub fn gram<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut g = vec![T::zero(); c * c];
    for row in a.chunks_exact(c).take(r) {
        for i in 0..c {
            let ri = row[i];
            if ri == T::zero() {
                continue;
            }
            for j in i..c {
                g[i * c + j] += ri * row[j];
            }
        }
    }
    for i in 0..c {
        for j in 0..i {
            g[i * c + j] = g[j * c + i];
        }
    }
    g
}
