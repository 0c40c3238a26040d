//! Quasi-Newton Hessian-vector products over a sliding window of global-model
//! and global-update differences.
//!
//! The window stores up to N pairs (dw, dg). The product uses the compact
//! representation: with S and Y the matrices whose columns are the stored dw
//! and dg (oldest first), D = diag(S^T Y), L the strictly lower triangle of
//! S^T Y, and sigma = dg_last . dw_last / (dw_last . dw_last),
//!
//! ```text
//! H v = sigma*v - [Y  sigma*S] * q,
//! q   = M2^-1 M1^-1 [Y^T v; sigma*S^T v],    J J^T = sigma*S^T*S + L D^-1 L^T
//! ```
//!
//! which equals the dense BFGS recursion started from sigma*I and updated
//! with the stored pairs oldest to newest. [`HistoryWindow::dense_bfgs_oracle`]
//! materializes that recursion directly and exists to cross-check the
//! compact path.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lbfgs_block, ParamVector, SmallMatrix};

/// Curvature admission floor: a pair is stored only if dg . dw exceeds
/// EPS_CURV * ||dw||^2. Attack-distorted global updates can produce
/// non-positive curvature, which would break the factorization.
pub const EPS_CURV: f64 = 1e-10;

/// Outcome of a [`HistoryWindow::push_pair`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissionReport {
    pub admitted: bool,
    /// dg . dw for the offered pair.
    pub curvature: f64,
}

/// Ring buffer of the last N admitted (dw, dg) difference pairs, oldest first.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    capacity: usize,
    dim: usize,
    pairs: VecDeque<(ParamVector, ParamVector)>,
}

impl HistoryWindow {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be at least 1");
        Self { capacity, dim, pairs: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Drops all stored pairs (used on training restart; the post-restart
    /// trajectory is discontinuous).
    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Offers a difference pair. Admitted iff dg . dw > EPS_CURV * ||dw||^2;
    /// admission evicts the oldest pair once the window is full.
    pub fn push_pair(&mut self, dw: ParamVector, dg: ParamVector) -> Result<AdmissionReport> {
        if dw.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: dw.dim() });
        }
        if dg.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: dg.dim() });
        }
        let curvature = dg.dot(&dw)?;
        let dw_sq = dw.dot(&dw)?;
        let admitted = curvature > EPS_CURV * dw_sq && dw_sq > 0.0;
        if admitted {
            if self.pairs.len() == self.capacity {
                self.pairs.pop_front();
            }
            self.pairs.push_back((dw, dg));
        }
        Ok(AdmissionReport { admitted, curvature })
    }

    /// Scaling factor from the most recent pair.
    fn sigma(&self) -> Result<f64> {
        let (dw, dg) = self.pairs.back().ok_or(Error::EmptyWindow)?;
        Ok(dg.dot(dw)? / dw.dot(dw)?)
    }

    /// Hessian-vector product H v through the compact representation.
    pub fn hvp(&self, v: &ParamVector) -> Result<ParamVector> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyWindow);
        }
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.dim() });
        }
        let m = self.pairs.len();
        let sigma = self.sigma()?;

        // Gram matrices S^T S and S^T Y for the stored pairs.
        let mut sts = SmallMatrix::zeros(m, m);
        let mut sty = SmallMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                sts.set(i, j, self.pairs[i].0.dot(&self.pairs[j].0)?);
                sty.set(i, j, self.pairs[i].0.dot(&self.pairs[j].1)?);
            }
        }
        let d: Vec<f64> = (0..m).map(|i| sty.get(i, i)).collect();
        let mut l = SmallMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..i {
                l.set(i, j, sty.get(i, j));
            }
        }

        // J J^T = sigma * S^T S + L D^-1 L^T
        let mut a = SmallMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let mut v_ld = 0.0;
                for k in 0..m.min(i).min(j) {
                    v_ld += l.get(i, k) * l.get(j, k) / d[k];
                }
                a.set(i, j, sigma * sts.get(i, j) + v_ld);
            }
        }
        let j_factor = cholesky(&a)?;

        let rhs_top: Vec<f64> = (0..m).map(|i| self.pairs[i].1.dot(v)).collect::<Result<_>>()?;
        let rhs_bot: Vec<f64> =
            (0..m).map(|i| Ok(sigma * self.pairs[i].0.dot(v)?)).collect::<Result<_>>()?;
        let q = solve_lbfgs_block(&d, &l, &j_factor, &rhs_top, &rhs_bot)?;

        // sigma*v - Y q_top - sigma * S q_bot
        let mut out = v.scale(sigma);
        for i in 0..m {
            out.axpy_in_place(-q[i], &self.pairs[i].1)?;
            out.axpy_in_place(-sigma * q[m + i], &self.pairs[i].0)?;
        }
        Ok(out)
    }

    /// Explicit p x p quasi-Hessian from the rank-two update recursion
    ///
    /// ```text
    /// B <- B - (B dw dw^T B) / (dw^T B dw) + (dg dg^T) / (dg^T dw)
    /// ```
    ///
    /// applied over the stored pairs oldest to newest, starting from
    /// sigma * I with the same sigma as [`Self::hvp`] so the two routes
    /// describe the same matrix. Intended for test-scale dimensions.
    pub fn dense_bfgs_oracle(&self) -> Result<SmallMatrix> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyWindow);
        }
        let p = self.dim;
        let sigma = self.sigma()?;
        let mut b = SmallMatrix::zeros(p, p);
        for i in 0..p {
            b.set(i, i, sigma);
        }
        for (dw, dg) in &self.pairs {
            let bs = b.matvec(dw.as_slice())?;
            let s_bs: f64 = dw.as_slice().iter().zip(&bs).map(|(a, c)| a * c).sum();
            if s_bs <= 0.0 {
                return Err(Error::NotPositiveDefinite { index: 0, pivot: s_bs });
            }
            let ys = dg.dot(dw)?;
            if ys <= 0.0 {
                return Err(Error::NotPositiveDefinite { index: 0, pivot: ys });
            }
            for i in 0..p {
                for j in 0..p {
                    let upd = -bs[i] * bs[j] / s_bs
                        + dg.as_slice()[i] * dg.as_slice()[j] / ys;
                    b.set(i, j, b.get(i, j) + upd);
                }
            }
        }
        Ok(b)
    }
}
