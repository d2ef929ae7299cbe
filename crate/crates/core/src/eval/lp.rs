//! Dense phase-one simplex for small feasibility problems `A x = b, x >= 0`.

use crate::error::{Error, Result};

const TOL: f64 = 1e-9;

/// Whether `A x = b` has a non-negative solution. `a` is row-major with
/// `rows` equations over `cols` unknowns. Uses Bland's rule, so it always
/// terminates; the iteration cap only guards against numerical trouble.
pub fn feasible(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<bool> {
    Ok(solve(a, b, rows, cols)?.is_some())
}

/// A non-negative solution of `A x = b` when one exists.
pub fn solve(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<Option<Vec<f64>>> {
    if a.len() != rows * cols || b.len() != rows {
        return Err(Error::LpFailure(format!(
            "system of {} coefficients and {} targets does not match {rows}x{cols}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::LpFailure("non-finite coefficients".into()));
    }
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    // columns: x (cols), artificials (rows), rhs
    let width = cols + rows + 1;
    let mut t = vec![0.0; (rows + 1) * width];
    for r in 0..rows {
        let sign = if b[r] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..cols {
            t[r * width + c] = sign * a[r * cols + c] / scale;
        }
        t[r * width + cols + r] = 1.0;
        t[r * width + width - 1] = sign * b[r] / scale;
    }
    // objective row: minimize the sum of artificials, written as reduced costs
    let obj = rows * width;
    for r in 0..rows {
        for c in 0..width {
            if c < cols || c == width - 1 {
                t[obj + c] -= t[r * width + c];
            }
        }
    }
    let mut basis: Vec<usize> = (cols..cols + rows).collect();
    let max_iter = 50 * (rows + cols + 10);
    for _ in 0..max_iter {
        // Bland: lowest-index column with negative reduced cost and a valid
        // pivot. Phase one is bounded, so a column without one only carries
        // rounding noise and is skipped.
        let choice = (0..cols + rows)
            .filter(|&c| t[obj + c] < -TOL)
            .find_map(|c| ratio_test(&t, &basis, width, rows, c).map(|r| (c, r)));
        let Some((enter, pr)) = choice else {
            let residual = -t[obj + width - 1];
            if !residual.is_finite() {
                return Err(Error::LpFailure("non-finite objective".into()));
            }
            if residual > TOL * 10.0 {
                return Ok(None);
            }
            let mut x = vec![0.0; cols];
            for (r, &bv) in basis.iter().enumerate() {
                if bv < cols {
                    x[bv] = t[r * width + width - 1];
                }
            }
            return Ok(Some(x));
        };
        let pivot = t[pr * width + enter];
        for c in 0..width {
            t[pr * width + c] /= pivot;
        }
        for r in 0..=rows {
            if r != pr {
                let f = t[r * width + enter];
                if f != 0.0 {
                    for c in 0..width {
                        t[r * width + c] -= f * t[pr * width + c];
                    }
                }
            }
        }
        basis[pr] = enter;
    }
    Err(Error::LpFailure("simplex iteration limit reached".into()))
}

/// Leaving row for column `enter`: smallest ratio, ties to the lowest basic index.
fn ratio_test(t: &[f64], basis: &[usize], width: usize, rows: usize, enter: usize) -> Option<usize> {
    let mut leave: Option<(usize, f64)> = None;
    for r in 0..rows {
        let coef = t[r * width + enter];
        if coef > TOL {
            let ratio = t[r * width + width - 1] / coef;
            leave = match leave {
                Some((lr, lratio)) if !(ratio < lratio - TOL || ((ratio - lratio).abs() <= TOL && basis[r] < basis[lr])) => {
                    Some((lr, lratio))
                }
                _ => Some((r, ratio)),
            };
        }
    }
    leave.map(|(r, _)| r)
}
