//! Small dense linear solves.

use crate::error::{Error, Result};

/// Relative pivot threshold below which a system is reported as rank-deficient.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// Solves `a x = b` for square row-major `a` (size `n x n`) by LU with partial pivoting.
pub fn solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::ShapeMismatch {
            expected: n * n,
            actual: a.len(),
        });
    }
    if b.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            actual: b.len(),
        });
    }
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = PIVOT_TOLERANCE * scale.max(f64::MIN_POSITIVE);

    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs.is_nan() || pivot_abs <= tol {
            return Err(Error::RankDeficient {
                column: col,
                size: n,
                pivot: pivot_abs,
            });
        }
        if pivot_row != col {
            for j in 0..n {
                m.swap(col * n + j, pivot_row * n + j);
            }
            rhs.swap(col, pivot_row);
        }
        let pivot = m[col * n + col];
        for r in (col + 1)..n {
            let factor = m[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            m[r * n + col] = 0.0;
            for j in (col + 1)..n {
                m[r * n + j] -= factor * m[col * n + j];
            }
            rhs[r] -= factor * rhs[col];
        }
    }

    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for j in (row + 1)..n {
            acc -= m[row * n + j] * x[j];
        }
        x[row] = acc / m[row * n + row];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_system_requiring_pivoting() {
        // zero in the leading position forces a row swap
        let a = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let x_true = [1.0, -2.0, 0.5];
        let b: Vec<f64> = (0..3).map(|r| (0..3).map(|c| a[r * 3 + c] * x_true[c]).sum()).collect();
        let x = solve(&a, &b, 3).unwrap();
        for (got, want) in x.iter().zip(x_true) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn reports_singular_matrix() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(solve(&a, &[1.0, 2.0], 2), Err(Error::RankDeficient { .. })));
    }
}
