//! Dense helpers for the Sylvester analysis: Kronecker products, inversion and
//! numerical rank by Gaussian elimination with partial pivoting.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, ac) = a.dims2("kron")?;
    let (br, bc) = b.dims2("kron")?;
    let (rows, cols) = (ar * br, ac * bc);
    let mut out = vec![0.0; rows * cols];
    for i in 0..ar {
        for j in 0..ac {
            let aij = a.data()[i * ac + j];
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k) * cols + j * bc + l] = aij * b.data()[k * bc + l];
                }
            }
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Rank of a matrix: pivots at or below `rel_tol * max|m|` count as zero.
pub fn numerical_rank(m: &Tensor, rel_tol: f64) -> Result<usize> {
    rank_below(m, rel_tol * m.max_abs())
}

/// Rank counting only pivots strictly above the absolute `threshold`.
pub fn rank_below(m: &Tensor, threshold: f64) -> Result<usize> {
    let (rows, cols) = m.dims2("numerical_rank")?;
    if m.max_abs() == 0.0 {
        return Ok(0);
    }
    let mut a = m.data().to_vec();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let (pivot_row, pivot) = (rank..rows)
            .map(|r| (r, a[r * cols + col].abs()))
            .fold((rank, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot <= threshold {
            continue;
        }
        if pivot_row != rank {
            for c in 0..cols {
                a.swap(pivot_row * cols + c, rank * cols + c);
            }
        }
        let p = a[rank * cols + col];
        for r in (rank + 1)..rows {
            let f = a[r * cols + col] / p;
            if f == 0.0 {
                continue;
            }
            for c in col..cols {
                a[r * cols + c] -= f * a[rank * cols + c];
            }
        }
        rank += 1;
    }
    Ok(rank)
}

/// Gauss-Jordan inverse with partial pivoting. Fails when a pivot falls to
/// `rel_tol * max|a|` or below.
pub fn inverse(a: &Tensor, rel_tol: f64) -> Result<Tensor> {
    let (n, c) = a.dims2("inverse")?;
    if n != c {
        return Err(Error::dim("inverse", format!("matrix [{n}x{c}] is not square")));
    }
    let scale = a.max_abs();
    let mut m = a.data().to_vec();
    let mut inv = Tensor::identity(n).into_data();
    for col in 0..n {
        let (pr, pv) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pv.is_nan() || pv <= rel_tol * scale {
            return Err(Error::SingularMoment(format!(
                "pivot {pv:e} in column {col} at or below {:e}",
                rel_tol * scale
            )));
        }
        if pr != col {
            for k in 0..n {
                m.swap(pr * n + k, col * n + k);
                inv.swap(pr * n + k, col * n + k);
            }
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                m[r * n + k] -= f * m[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    Tensor::matrix(n, n, inv)
}

/// Induced 1-norm (max column sum).
pub fn norm1(a: &Tensor) -> f64 {
    let (r, c) = (a.rows(), a.shape().get(1).copied().unwrap_or(1));
    (0..c)
        .map(|j| (0..r).map(|i| a.data()[i * c + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Tensor::identity(2);
        let k = kron(&a, &i).unwrap();
        assert_eq!(
            k.data(),
            &[
                1.0, 0.0, 2.0, 0.0, //
                0.0, 1.0, 0.0, 2.0, //
                3.0, 0.0, 4.0, 0.0, //
                0.0, 3.0, 0.0, 4.0
            ]
        );
    }

    #[test]
    fn rank_cases() {
        assert_eq!(numerical_rank(&Tensor::zeros(&[3, 3]), 1e-10).unwrap(), 0);
        assert_eq!(numerical_rank(&Tensor::identity(4), 1e-10).unwrap(), 4);
        let r1 = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![-1.0, -2.0, -3.0]]).unwrap();
        assert_eq!(numerical_rank(&r1, 1e-10).unwrap(), 1);
        let r2 = Tensor::from_rows(&[vec![0.0, 1.0, 1.0], vec![0.0, 2.0, 2.0], vec![1.0, 0.0, 1.0]]).unwrap();
        assert_eq!(numerical_rank(&r2, 1e-10).unwrap(), 2);
    }

    #[test]
    fn inverse_round_trip_and_singular() {
        let a = Tensor::from_rows(&[vec![4.0, 7.0, 2.0], vec![3.0, 6.0, 1.0], vec![2.0, 5.0, 3.0]]).unwrap();
        let inv = inverse(&a, 1e-12).unwrap();
        let prod = a.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&Tensor::identity(3)).unwrap() < 1e-12);

        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(inverse(&s, 1e-12), Err(Error::SingularMoment(_))));
    }
}
