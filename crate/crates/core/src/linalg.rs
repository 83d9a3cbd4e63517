//! Small dense complex kernels: pivoted LU determinants in log form and Gram
//! products.

use crate::channel::{CMat, C64};

/// `det = phase * exp(log_abs)`; a singular matrix has `log_abs = -inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDet {
    pub log_abs: f64,
    pub phase: C64,
}

impl LogDet {
    pub fn is_singular(&self) -> bool {
        self.log_abs == f64::NEG_INFINITY
    }

    pub fn value(&self) -> C64 {
        self.phase * self.log_abs.exp()
    }
}

/// Log-determinant of the row-major `n x n` matrix in `a`, by Gaussian
/// elimination with partial pivoting. `a` is overwritten.
pub fn log_det_in_place(a: &mut [C64], n: usize) -> LogDet {
    debug_assert_eq!(a.len(), n * n);
    let mut log_abs = 0.0;
    let mut phase = C64::new(1.0, 0.0);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].norm();
        for r in col + 1..n {
            let v = a[r * n + col].norm();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return LogDet {
                log_abs: f64::NEG_INFINITY,
                phase: C64::new(0.0, 0.0),
            };
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            phase = -phase;
        }
        let p = a[col * n + col];
        log_abs += best.ln();
        phase *= p / best;
        let inv = p.inv();
        for r in col + 1..n {
            let factor = a[r * n + col] * inv;
            if factor == C64::new(0.0, 0.0) {
                continue;
            }
            for c in col + 1..n {
                let upd = factor * a[col * n + c];
                a[r * n + c] -= upd;
            }
        }
    }
    LogDet { log_abs, phase }
}

pub fn log_det(m: &CMat) -> LogDet {
    assert_eq!(m.nrows(), m.ncols(), "log_det needs a square matrix");
    let n = m.nrows();
    let mut buf: Vec<C64> = (0..n * n).map(|i| m[(i / n, i % n)]).collect();
    log_det_in_place(&mut buf, n)
}

/// Row-major `k x k` Gram matrix `H^H H` of the row-major `rows x k` matrix.
pub fn gram_into(h: &[C64], rows: usize, k: usize, out: &mut [C64]) {
    for i in 0..k {
        for j in i..k {
            let mut acc = C64::new(0.0, 0.0);
            for r in 0..rows {
                acc += h[r * k + i].conj() * h[r * k + j];
            }
            out[i * k + j] = acc;
            out[j * k + i] = acc.conj();
        }
    }
}

/// Copy of the row-major `k x k` matrix with row and column `drop` removed.
pub fn principal_minor_into(a: &[C64], k: usize, drop: usize, out: &mut [C64]) {
    let mut idx = 0;
    for i in (0..k).filter(|&i| i != drop) {
        for j in (0..k).filter(|&j| j != drop) {
            out[idx] = a[i * k + j];
            idx += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinant_of_small_matrices() {
        let m = CMat::from_row_slice(
            2,
            2,
            &[C64::new(2.0, 0.0), C64::new(1.0, 1.0), C64::new(0.0, -1.0), C64::new(3.0, 0.0)],
        );
        let expected = C64::new(6.0, 0.0) - C64::new(1.0, 1.0) * C64::new(0.0, -1.0);
        let d = log_det(&m).value();
        assert!((d - expected).norm() < 1e-13);
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let z = C64::new(0.0, 0.0);
        let o = C64::new(1.0, 0.0);
        let m = CMat::from_row_slice(2, 2, &[z, o, o, z]);
        assert!((log_det(&m).value() - C64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn singular_matrix_reports_negative_infinity() {
        let o = C64::new(1.0, 0.0);
        let m = CMat::from_row_slice(2, 2, &[o, o, o, o]);
        assert!(log_det(&m).is_singular());
    }

    #[test]
    fn empty_matrix_has_unit_determinant() {
        let mut buf: Vec<C64> = vec![];
        let d = log_det_in_place(&mut buf, 0);
        assert_eq!(d.log_abs, 0.0);
        assert_eq!(d.value(), C64::new(1.0, 0.0));
    }

    #[test]
    fn matches_nalgebra_determinant() {
        let m = CMat::from_fn(5, 5, |i, j| C64::new((i * 7 + j * 3) as f64 % 5.0 - 2.0, (i + 2 * j) as f64 % 3.0));
        let ours = log_det(&m).value();
        let theirs = m.clone().lu().determinant();
        assert!((ours - theirs).norm() <= 1e-10 * theirs.norm().max(1.0));
    }
}
