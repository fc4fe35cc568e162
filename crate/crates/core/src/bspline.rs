//! Cubic B-spline bases with equally spaced knots and difference penalties.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Cubic B-spline basis on `[lo, hi]` with `n_basis` functions. A single
/// function means the constant basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    lo: f64,
    hi: f64,
    n_basis: usize,
    knots: Vec<f64>,
}

const DEGREE: usize = 3;

impl BSplineBasis {
    pub fn new(lo: f64, hi: f64, n_basis: usize) -> Self {
        assert!(n_basis >= 1, "basis needs at least one function");
        let mut knots = Vec::new();
        if n_basis > DEGREE {
            let n_inner = n_basis - DEGREE - 1;
            let h = (hi - lo) / (n_inner + 1) as f64;
            for j in 0..(n_basis + DEGREE + 1) {
                knots.push(lo + (j as f64 - DEGREE as f64) * h);
            }
        }
        BSplineBasis {
            lo,
            hi,
            n_basis,
            knots,
        }
    }

    pub fn len(&self) -> usize {
        self.n_basis
    }

    pub fn is_empty(&self) -> bool {
        self.n_basis == 0
    }

    /// Nonzero basis values at `x`: `(first index, values)`.
    pub fn eval_sparse(&self, x: f64) -> (usize, Vec<f64>) {
        if self.n_basis <= DEGREE {
            // Low-dimensional fallback: monomials in the rescaled argument.
            let u = if self.hi > self.lo {
                (x - self.lo) / (self.hi - self.lo)
            } else {
                0.0
            };
            return (0, (0..self.n_basis).map(|k| u.powi(k as i32)).collect());
        }
        let x = x.clamp(self.lo, self.hi);
        let h = self.knots[1] - self.knots[0];
        // Span index `mu` with knots[mu] <= x < knots[mu+1], restricted to the
        // valid range [DEGREE, n_basis - 1].
        let mut mu = ((x - self.knots[0]) / h).floor() as usize;
        mu = mu.clamp(DEGREE, self.n_basis - 1);
        // de Boor triangle.
        let mut n = [0.0f64; DEGREE + 1];
        n[0] = 1.0;
        let t = &self.knots;
        for d in 1..=DEGREE {
            let mut saved = 0.0;
            for r in 0..d {
                let left = t[mu + r + 1];
                let right = t[mu + r + 1 - d];
                let denom = left - right;
                let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + (left - x) * temp;
                saved = (x - right) * temp;
            }
            n[d] = saved;
        }
        (mu - DEGREE, n.to_vec())
    }

    pub fn eval_dense(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis];
        let (start, vals) = self.eval_sparse(x);
        for (k, v) in vals.into_iter().enumerate() {
            out[start + k] = v;
        }
        out
    }

    /// Second-order difference penalty `D^T D` (zero when fewer than three
    /// functions).
    pub fn penalty(&self) -> DMatrix<f64> {
        difference_penalty(self.n_basis)
    }
}

/// `D^T D` for the second-order difference operator on `n` coefficients.
pub fn difference_penalty(n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    if n < 3 {
        return p;
    }
    for r in 0..n - 2 {
        let d = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
        for &(i, a) in &d {
            for &(j, b) in &d {
                p[(i, j)] += a * b;
            }
        }
    }
    p
}
