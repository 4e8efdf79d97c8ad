//! Cyclic Jacobi eigensolver for real symmetric matrices.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Off-diagonal magnitude below which the iteration has converged.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigen-decomposition `A = V diag(λ) Vᵀ`, eigenvalues descending, the
/// eigenvectors in the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
    pub sweeps: usize,
}

/// Flips every column so that its largest-magnitude entry is positive. Ties
/// in magnitude resolve to the first such entry.
pub fn canonicalize_signs(vectors: &mut Array2<f64>) {
    for mut col in vectors.columns_mut() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &x in col.iter() {
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

fn max_off_diagonal(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut m = 0.0f64;
    for p in 0..n {
        for q in p + 1..n {
            m = m.max(a[[p, q]].abs());
        }
    }
    m
}

pub fn sym_eig(a: &Array2<f64>) -> Result<SymEigen> {
    let (rows, cols) = a.dim();
    if rows != cols || rows == 0 {
        return Err(Error::Shape(format!("expected a non-empty square matrix, got {rows}x{cols}")));
    }
    if let Some(((i, j), v)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("entry ({i}, {j}) = {v}")));
    }
    let n = rows;
    for i in 0..n {
        for j in i + 1..n {
            let diff = (a[[i, j]] - a[[j, i]]).abs();
            if diff > SYMMETRY_TOL {
                return Err(Error::NotSymmetric { i, j, diff });
            }
        }
    }

    let mut a = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (a[[i, j]] + a[[j, i]]));
    let mut v = Array2::<f64>::eye(n);
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS && max_off_diagonal(&a) >= OFF_DIAGONAL_TOL {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[[p, p]], a[[q, q]]);
                // Below rounding of both diagonal entries: the rotation would
                // not change them, so the entry is zeroed outright.
                let g = 100.0 * apq.abs();
                if app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[[p, q]] = 0.0;
                    a[[q, p]] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: exact ties keep the solver's column order.
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let values = Array1::from_iter(order.iter().map(|&i| diag[i]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    canonicalize_signs(&mut vectors);
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}
