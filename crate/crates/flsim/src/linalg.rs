//! Dense linear algebra for the quasi-Newton kernel.
//!
//! Everything here operates on small matrices (at most 2N x 2N, N being the
//! history window size) or on flat parameter vectors. No BLAS, no sparse
//! formats; the window matrices are tiny and the p-dimensional vectors only
//! ever enter through dot products.

use crate::error::{Error, Result};

/// Absolute pivot floor for the Cholesky factorization. Gram matrices of
/// nearly-aligned global steps can be close to singular.
pub const EPS_PD: f64 = 1e-12;

/// Relative tolerance for the symmetry precondition in [`cholesky`].
pub const EPS_SYM: f64 = 1e-9;

/// Flat real-valued parameter or update vector. The universal currency
/// between modules: model weights, client updates, and window differences
/// all live here.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Builds a vector, rejecting NaN/Inf entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamVector entry"));
        }
        Ok(Self { values })
    }

    /// Internal constructor for arithmetic results on already-validated inputs.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(())
    }

    /// Inner product.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// (l1, l2) norms in one pass.
    pub fn norms(&self) -> (f64, f64) {
        let mut l1 = 0.0;
        let mut sq = 0.0;
        for v in &self.values {
            l1 += v.abs();
            sq += v * v;
        }
        (l1, sq.sqrt())
    }

    pub fn l2(&self) -> f64 {
        self.norms().1
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self::from_raw(
            self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self::from_raw(
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_raw(self.values.iter().map(|v| c * v).collect())
    }

    /// self += c * other
    pub fn axpy_in_place(&mut self, c: f64, other: &Self) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }
}

/// Small dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SmallMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch { expected: c, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SmallMatrix entry"));
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, got: x.len() });
        }
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(y)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// Largest relative deviation from symmetry, scaled by the largest entry.
    fn asymmetry(&self) -> f64 {
        let mut max_dev = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                max_abs = max_abs.max(self.get(i, j).abs());
                if j > i {
                    max_dev = max_dev.max((self.get(i, j) - self.get(j, i)).abs());
                }
            }
        }
        if max_abs == 0.0 {
            0.0
        } else {
            max_dev / max_abs
        }
    }
}

/// Lower-triangular Cholesky factor C of a symmetric positive-definite
/// matrix, C * C^T = m.
///
/// Inputs asymmetric beyond [`EPS_SYM`] (relative) are rejected; smaller
/// floating-point asymmetry is averaged away before factorization. A pivot
/// at or below [`EPS_PD`] reports the failing index.
pub fn cholesky(m: &SmallMatrix) -> Result<SmallMatrix> {
    if m.rows != m.cols {
        return Err(Error::DimensionMismatch { expected: m.rows, got: m.cols });
    }
    let dev = m.asymmetry();
    if dev > EPS_SYM {
        return Err(Error::NotSymmetric { deviation: dev });
    }
    if dev > 0.0 {
        log::debug!("cholesky: symmetrizing input (relative deviation {dev:.3e})");
    }
    let n = m.rows;
    let sym = |i: usize, j: usize| 0.5 * (m.get(i, j) + m.get(j, i));
    let mut c = SmallMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = sym(i, j);
            for k in 0..j {
                s -= c.get(i, k) * c.get(j, k);
            }
            if i == j {
                if s <= EPS_PD {
                    return Err(Error::NotPositiveDefinite { index: i, pivot: s });
                }
                c.set(i, j, s.sqrt());
            } else {
                c.set(i, j, s / c.get(j, j));
            }
        }
    }
    Ok(c)
}

/// Solves (t or t^T) x = rhs for a triangular t of the stated orientation.
pub fn solve_triangular(
    t: &SmallMatrix,
    rhs: &[f64],
    lower: bool,
    transposed: bool,
) -> Result<Vec<f64>> {
    if t.rows != t.cols {
        return Err(Error::DimensionMismatch { expected: t.rows, got: t.cols });
    }
    let n = t.rows;
    if rhs.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: rhs.len() });
    }
    for i in 0..n {
        if t.get(i, i) == 0.0 {
            return Err(Error::SingularMatrix { index: i });
        }
    }
    // Transposing flips the effective orientation.
    let effective_lower = lower != transposed;
    let entry = |i: usize, j: usize| if transposed { t.get(j, i) } else { t.get(i, j) };
    let mut x = vec![0.0; n];
    if effective_lower {
        for i in 0..n {
            let mut s = rhs[i];
            for j in 0..i {
                s -= entry(i, j) * x[j];
            }
            x[i] = s / entry(i, i);
        }
    } else {
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for j in i + 1..n {
                s -= entry(i, j) * x[j];
            }
            x[i] = s / entry(i, i);
        }
    }
    Ok(x)
}

/// Solves the stacked 2N system of the compact quasi-Newton representation:
/// q = M2^-1 * M1^-1 * [rhs_top; rhs_bot], with
///
/// ```text
/// M1 = [ D^1/2        0  ]      M2 = [ -D^1/2   D^-1/2 L^T ]
///      [ -L D^-1/2    J  ]           [  0       J^T        ]
/// ```
///
/// so that M1 * M2 equals the middle matrix [[-D, L^T], [L, sigma*S^T*S]]
/// whenever J J^T = sigma*S^T*S + L D^-1 L^T. M1 is solved by forward block
/// substitution, M2 by backward block substitution; no inverse is formed.
pub fn solve_lbfgs_block(
    d: &[f64],
    l: &SmallMatrix,
    j: &SmallMatrix,
    rhs_top: &[f64],
    rhs_bot: &[f64],
) -> Result<Vec<f64>> {
    let n = d.len();
    if l.rows != n || l.cols != n || j.rows != n || j.cols != n {
        return Err(Error::DimensionMismatch { expected: n, got: l.rows.max(j.rows) });
    }
    if rhs_top.len() != n || rhs_bot.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: rhs_top.len().min(rhs_bot.len()) });
    }
    for (i, &di) in d.iter().enumerate() {
        if di <= 0.0 {
            return Err(Error::NotPositiveDefinite { index: i, pivot: di });
        }
    }
    // Forward block substitution through M1. The top half D^-1/2 rhs_top
    // cancels against the backward pass, leaving only D^-1 rhs_top terms.
    let scaled: Vec<f64> = rhs_top.iter().zip(d).map(|(r, di)| r / di).collect();
    let l_scaled = l.matvec(&scaled)?;
    let rhs2: Vec<f64> = rhs_bot.iter().zip(&l_scaled).map(|(a, b)| a + b).collect();
    let x_bot = solve_triangular(j, &rhs2, true, false)?;

    // Backward block substitution through M2.
    let q_bot = solve_triangular(j, &x_bot, true, true)?;
    // -D^1/2 q_top = x_top - D^-1/2 L^T q_bot  =>  q_top = (L^T q_bot - rhs_top) / D
    let lt_q = l.transpose().matvec(&q_bot)?;
    let q_top: Vec<f64> = (0..n).map(|i| (lt_q[i] - rhs_top[i]) / d[i]).collect();

    let mut q = q_top;
    q.extend(q_bot);
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rel_err(got: &[f64], want: &[f64]) -> f64 {
        let num: f64 = got
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn dot_basic() {
        let a = ParamVector::new(vec![1.0, 2.0]).unwrap();
        let b = ParamVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(a.dot(&b).unwrap(), 11.0);
        let z = ParamVector::zeros(2);
        assert_eq!(a.dot(&z).unwrap(), 0.0);
    }

    #[test]
    fn dot_matches_naive_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut naive = 0.0;
        for i in 0..64 {
            naive += a[i] * b[i];
        }
        let pa = ParamVector::new(a).unwrap();
        let pb = ParamVector::new(b).unwrap();
        let got = pa.dot(&pb).unwrap();
        assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1.0));
    }

    #[test]
    fn dot_dimension_mismatch() {
        let a = ParamVector::zeros(2);
        let b = ParamVector::zeros(3);
        assert!(matches!(a.dot(&b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn norms_basic() {
        let a = ParamVector::new(vec![3.0, -4.0]).unwrap();
        assert_eq!(a.norms(), (7.0, 5.0));
        assert_eq!(ParamVector::zeros(3).norms(), (0.0, 0.0));
    }

    #[test]
    fn norms_match_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let v: Vec<f64> = (0..37).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (mut l1, mut sq) = (0.0, 0.0);
        for x in &v {
            l1 += x.abs();
            sq += x * x;
        }
        let p = ParamVector::new(v).unwrap();
        let (g1, g2) = p.norms();
        assert!((g1 - l1).abs() <= 1e-12 * l1);
        assert!((g2 - sq.sqrt()).abs() <= 1e-12 * sq.sqrt());
    }

    #[test]
    fn cholesky_identity() {
        let c = cholesky(&SmallMatrix::identity(3)).unwrap();
        assert_eq!(c, SmallMatrix::identity(3));
    }

    #[test]
    fn cholesky_hand_checked_2x2() {
        let m = SmallMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let c = cholesky(&m).unwrap();
        assert!((c.get(0, 0) - 2.0).abs() < 1e-14);
        assert!((c.get(0, 1)).abs() < 1e-14);
        assert!((c.get(1, 0) - 1.0).abs() < 1e-14);
        assert!((c.get(1, 1) - 2.0f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 10;
        // A = R^T R + I is SPD.
        let mut r = SmallMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                r.set(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        let mut a = r.transpose().matmul(&r).unwrap();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 1.0);
        }
        let c = cholesky(&a).unwrap();
        let back = c.matmul(&c.transpose()).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                num += (back.get(i, j) - a.get(i, j)).powi(2);
                den += a.get(i, j).powi(2);
            }
        }
        assert!((num / den).sqrt() <= 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = SmallMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match cholesky(&m) {
            Err(Error::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let m = SmallMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn solve_triangular_identity_and_hand_case() {
        let id = SmallMatrix::identity(3);
        let rhs = vec![1.0, 2.0, 3.0];
        assert_eq!(solve_triangular(&id, &rhs, true, false).unwrap(), rhs);

        let t = SmallMatrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let x = solve_triangular(&t, &[2.0, 3.0], true, false).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_triangular_residual_random() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let n = 8;
        let mut t = SmallMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                t.set(i, j, rng.gen_range(-1.0..1.0));
            }
            t.set(i, i, rng.gen_range(0.5..2.0));
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for &(lower, transposed) in &[(true, false), (true, true)] {
            let x = solve_triangular(&t, &rhs, lower, transposed).unwrap();
            let back = if transposed {
                t.transpose().matvec(&x).unwrap()
            } else {
                t.matvec(&x).unwrap()
            };
            assert!(rel_err(&back, &rhs) <= 1e-10, "residual too large");
        }
    }

    #[test]
    fn solve_triangular_singular() {
        let t = SmallMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            solve_triangular(&t, &[1.0, 1.0], true, false),
            Err(Error::SingularMatrix { index: 1 })
        ));
    }

    #[test]
    fn lbfgs_block_identity_case() {
        let n = 3;
        let d = vec![1.0; n];
        let l = SmallMatrix::zeros(n, n);
        let j = SmallMatrix::identity(n);
        let u = vec![1.0, -2.0, 3.0];
        let w = vec![0.5, 0.25, -1.0];
        let q = solve_lbfgs_block(&d, &l, &j, &u, &w).unwrap();
        assert_eq!(&q[..n], &[-1.0, 2.0, -3.0]);
        assert_eq!(&q[n..], &w[..]);
    }

    #[test]
    fn lbfgs_block_zero_rhs() {
        let n = 2;
        let d = vec![2.0, 3.0];
        let mut l = SmallMatrix::zeros(n, n);
        l.set(1, 0, 0.7);
        let j = cholesky(&SmallMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.5]]).unwrap()).unwrap();
        let q = solve_lbfgs_block(&d, &l, &j, &[0.0; 2], &[0.0; 2]).unwrap();
        assert!(q.iter().all(|v| *v == 0.0));
    }

    /// Dense explicit-inverse oracle: forms M1 and M2 as full 2N x 2N
    /// matrices, multiplies, and solves by Gaussian elimination.
    fn dense_block_oracle(
        d: &[f64],
        l: &SmallMatrix,
        j: &SmallMatrix,
        rhs_top: &[f64],
        rhs_bot: &[f64],
    ) -> Vec<f64> {
        let n = d.len();
        let m2 = 2 * n;
        let mut m1 = SmallMatrix::zeros(m2, m2);
        let mut m2m = SmallMatrix::zeros(m2, m2);
        for i in 0..n {
            let s = d[i].sqrt();
            m1.set(i, i, s);
            m2m.set(i, i, -s);
            for k in 0..n {
                // M1 lower-left: -L D^-1/2 ; M2 upper-right: D^-1/2 L^T
                m1.set(n + i, k, -l.get(i, k) / d[k].sqrt());
                m2m.set(i, n + k, l.get(k, i) / s);
            }
            for k in 0..n {
                m1.set(n + i, n + k, j.get(i, k));
                m2m.set(n + i, n + k, j.get(k, i));
            }
        }
        let prod = m1.matmul(&m2m).unwrap();
        // Gaussian elimination with partial pivoting on [prod | rhs].
        let mut a: Vec<Vec<f64>> = (0..m2)
            .map(|i| {
                let mut row: Vec<f64> = (0..m2).map(|jx| prod.get(i, jx)).collect();
                row.push(if i < n { rhs_top[i] } else { rhs_bot[i - n] });
                row
            })
            .collect();
        for col in 0..m2 {
            let piv = (col..m2).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            let pv = a[col][col];
            for r in col + 1..m2 {
                let f = a[r][col] / pv;
                for c in col..=m2 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
        let mut x = vec![0.0; m2];
        for r in (0..m2).rev() {
            let mut s = a[r][m2];
            for c in r + 1..m2 {
                s -= a[r][c] * x[c];
            }
            x[r] = s / a[r][r];
        }
        x
    }

    #[test]
    fn lbfgs_block_matches_dense_inverse_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = rng.gen_range(1..=5);
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let mut l = SmallMatrix::zeros(n, n);
            for i in 0..n {
                for jx in 0..i {
                    l.set(i, jx, rng.gen_range(-1.0..1.0));
                }
            }
            // SPD seed for the J factor.
            let mut r = SmallMatrix::zeros(n, n);
            for i in 0..n {
                for jx in 0..n {
                    r.set(i, jx, rng.gen_range(-1.0..1.0));
                }
            }
            let mut spd = r.transpose().matmul(&r).unwrap();
            for i in 0..n {
                spd.set(i, i, spd.get(i, i) + 1.0);
            }
            let j = cholesky(&spd).unwrap();
            let rhs_top: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rhs_bot: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = solve_lbfgs_block(&d, &l, &j, &rhs_top, &rhs_bot).unwrap();
            let want = dense_block_oracle(&d, &l, &j, &rhs_top, &rhs_bot);
            assert!(rel_err(&got, &want) <= 1e-9, "trial {trial}: mismatch");
        }
    }
}
