//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Trapezoid weights for a (not necessarily uniform) increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    if n < 2 {
        return w;
    }
    for i in 0..n - 1 {
        let h = grid[i + 1] - grid[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Cholesky factorization with diagonal jitter escalated from `1e-12` to
/// `1e-6` times the mean diagonal. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, 0.0));
    }
    let n = a.nrows().max(1);
    let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = 1e-12;
    while rel <= 1e-6 * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut aj = a.clone();
        for i in 0..a.nrows() {
            aj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(aj) {
            return Ok((c, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::IllConditioned {
        jitter: 1e-6 * scale,
    })
}

/// Solve a symmetric positive definite system, repairing mild indefiniteness
/// with jitter.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (c, _) = cholesky_with_jitter(a)?;
    Ok(c.solve(b))
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn inverse_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (c, _) = cholesky_with_jitter(a)?;
    Ok(symmetrize(&c.inverse()))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        // Sign convention: largest-magnitude entry positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

/// Project a symmetric matrix onto the PSD cone by clipping eigenvalues below
/// `rel_floor * max_eigenvalue` to zero. Returns the projection and the number
/// of clipped directions.
pub fn project_psd(a: &DMatrix<f64>, rel_floor: f64) -> (DMatrix<f64>, usize) {
    let (vals, vecs) = sym_eigen_desc(a);
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    let mut clipped = 0;
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= rel_floor * top || lam <= 0.0 {
            clipped += 1;
            continue;
        }
        let v = vecs.column(k);
        out += lam * v * v.transpose();
    }
    (symmetrize(&out), clipped)
}

/// Log-determinant from a Cholesky factor.
pub fn log_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

/// `x^T A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += a[(i, j)] * x[i];
        }
        acc += col * x[j];
    }
    acc
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (8 points).
pub(crate) const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_2, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_2, 0.101_228_536_290_376_26),
];

/// Gauss-Legendre integral of `f` over `[a, b]`.
pub(crate) fn gl_integrate(a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GL8.iter().map(|&(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let grid: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let w = trapezoid_weights(&grid);
        let integral: f64 = grid.iter().zip(&w).map(|(x, w)| (2.0 * x + 1.0) * w).sum();
        assert!((integral - 2.0).abs() < 1e-14);
    }

    #[test]
    fn gl8_is_exact_for_degree_15() {
        let v = gl_integrate(0.0, 2.0, |x| x.powi(15));
        assert!((v - 2f64.powi(16) / 16.0).abs() < 1e-9);
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let (_, jitter) = cholesky_with_jitter(&a).unwrap();
        assert!(jitter > 0.0);
    }

    #[test]
    fn psd_projection_clips_negative_direction() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]);
        let (p, clipped) = project_psd(&a, 1e-10);
        assert_eq!(clipped, 1);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(p[(1, 1)].abs() < 1e-14);
    }
}
