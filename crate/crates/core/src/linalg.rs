//! Small dense linear algebra in f64: SPD solves and symmetric
//! eigendecomposition.

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.at(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · self`, exploiting symmetry.
    pub fn gram(&self) -> Mat {
        let n = self.cols;
        let mut g = Mat::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                for j in i..n {
                    g.data[i * n + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    /// Column means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (a, &v) in m.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.rows.max(1) as f64);
        m
    }

    pub fn subtract_row(&mut self, v: &[f64]) {
        for r in 0..self.rows {
            for (x, &m) in self.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(v) {
                *x -= m;
            }
        }
    }
}

/// Solves `A X = B` for symmetric positive-definite `A` by Cholesky.
pub fn cholesky_solve(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.rows;
    if a.cols != n || b.rows != n {
        return Err(Error::Solve(format!("shapes {}x{} and {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let scale = (0..n).map(|i| a.at(i, i).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if !(d > 1e-12 * scale) {
            return Err(Error::Solve(format!("matrix is singular or not positive definite at pivot {j}")));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x.at(i, c);
            for k in 0..i {
                s -= l.at(i, k) * x.at(k, c);
            }
            x.set(i, c, s / l.at(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.at(i, c);
            for k in i + 1..n {
                s -= l.at(k, i) * x.at(k, c);
            }
            x.set(i, c, s / l.at(i, i));
        }
    }
    Ok(x)
}

/// Eigenvalues (descending) and matching unit eigenvectors (as columns) of a
/// symmetric matrix, by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let norm: f64 = m.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.at(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.at(k, p), m.at(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.at(p, k), m.at(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.at(j, j).total_cmp(&m.at(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m.at(i, i)).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new, v.at(k, old));
        }
    }
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> Mat {
        let x = Mat::from_rows(n + 3, n, (0..(n + 3) * n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut g = x.gram();
        for i in 0..n {
            g.data[i * n + i] += 0.1;
        }
        g
    }

    #[test]
    fn cholesky_solves_spd_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_spd(6, &mut rng);
        let b = Mat::from_rows(6, 2, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let x = cholesky_solve(&a, &b).unwrap();
        let back = a.matmul(&x);
        for (p, q) in back.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_matrix_is_solve_error() {
        let a = Mat::zeros(3, 3);
        assert!(matches!(cholesky_solve(&a, &Mat::zeros(3, 1)), Err(Error::Solve(_))));
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_spd(7, &mut rng);
        let (vals, vecs) = symmetric_eigen(&a);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let mut d = Mat::zeros(7, 7);
        for i in 0..7 {
            d.set(i, i, vals[i]);
        }
        let rec = vecs.matmul(&d).matmul(&vecs.transpose());
        for (p, q) in rec.data.iter().zip(&a.data) {
            assert!((p - q).abs() < 1e-9);
        }
        let orth = vecs.transpose().matmul(&vecs);
        for i in 0..7 {
            for j in 0..7 {
                assert!((orth.at(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn diagonal_matrix_eigenvalues() {
        let a = Mat::from_rows(3, 3, vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]);
        let (vals, _) = symmetric_eigen(&a);
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
    }
}
