//! Small dense linear-algebra helpers for the low-rank diagnostics.
//!
//! The singular values of a product `B * M * A` (with inner dimension r)
//! are computed from the r-by-r core `R_B * M * R_A^T`, where `R_B`, `R_A`
//! are the triangular factors of thin QR decompositions of `B` and `A^T`.
//! Eigenvalues of the symmetrized core come from a cyclic Jacobi sweep.

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.at(i, p);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    *out.at_mut(i, j) += a * other.at(p, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.at_mut(j, i) = self.at(i, j);
            }
        }
        out
    }
}

/// Upper-triangular R factor of a thin Householder QR of an m-by-n matrix
/// (m >= n not required; R is min(m,n)-by-n padded to n-by-n).
pub fn qr_r_factor(a: &Mat) -> Mat {
    let (m, n) = (a.rows, a.cols);
    let mut w = a.data.clone();
    let steps = m.min(n);
    for k in 0..steps {
        // Householder vector for column k below the diagonal
        let mut norm = 0.0;
        for i in k..m {
            norm += w[i * n + k] * w[i * n + k];
        }
        norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if w[k * n + k] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; m - k];
        v[0] = w[k * n + k] - alpha;
        for i in k + 1..m {
            v[i - k] = w[i * n + k];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        for j in k..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * w[i * n + j];
            }
            let scale = 2.0 * dot / vtv;
            for i in k..m {
                w[i * n + j] -= scale * v[i - k];
            }
        }
    }
    let mut r = Mat::zeros(n, n);
    for i in 0..steps {
        for j in i..n {
            *r.at_mut(i, j) = w[i * n + j];
        }
    }
    r
}

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
pub fn sym_eigenvalues(s: &Mat) -> Vec<f64> {
    assert_eq!(s.rows, s.cols, "sym_eigenvalues needs a square matrix");
    let n = s.rows;
    let mut a = s.data.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s_ = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s_ * akq;
                    a[k * n + q] = s_ * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s_ * aqk;
                    a[q * n + k] = s_ * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Singular values of `b * core * a` where `b` is d_out-by-r, `core` is
/// r-by-r, and `a` is r-by-d_in. Returned in descending order.
pub fn low_rank_singular_values(b: &Mat, core: &Mat, a: &Mat) -> Vec<f64> {
    let rb = qr_r_factor(b); // r x r
    let ra = qr_r_factor(&a.transpose()); // r x r (factor of A^T)
    // product = R_B * core * R_A^T, an r x r matrix with the same singular
    // values as the full d_out x d_in delta
    let prod = rb.matmul(core).matmul(&ra.transpose());
    let gram = prod.transpose().matmul(&prod);
    let mut sv: Vec<f64> = sym_eigenvalues(&gram)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Count singular values above `tol * sigma_max`.
pub fn numerical_rank(singular_values: &[f64], tol: f64) -> usize {
    let smax = singular_values.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > tol * smax).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_diagonal() {
        let m = Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, -1.0]]);
        let mut e = sym_eigenvalues(&m);
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((e[0] + 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn qr_reproduces_column_norm_for_single_column() {
        let a = Mat::from_rows(&[vec![3.0], vec![4.0]]);
        let r = qr_r_factor(&a);
        assert!((r.at(0, 0).abs() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn singular_values_of_known_product() {
        // b = I2, core = diag(2, 0.5), a = I2 => singular values {2, 0.5}
        let b = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let core = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]);
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sv = low_rank_singular_values(&b, &core, &a);
        assert!((sv[0] - 2.0).abs() < 1e-12 && (sv[1] - 0.5).abs() < 1e-12);
        assert_eq!(numerical_rank(&sv, 1e-9), 2);
    }
}
