//! Trace maximization over centered, scaled-orthogonal matrices:
//!
//! ```text
//! max tr(Z Vᵀ)   s.t.   V Vᵀ = n I_r,   V 1 = 0
//! ```
//!
//! Solved in closed form from the eigendecomposition of the `r × r` matrix
//! `Z J Zᵀ`, where `J = I − 11ᵀ/n`. `J` is only ever applied implicitly, by
//! subtracting row means, so nothing of size `n × n` is formed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Dense centering matrix `I − 11ᵀ/n`. Only for tests and small checks; use
/// [`center_rows`] to apply it.
pub fn centering_matrix(n: usize) -> DMatrix<f64> {
    let inv = 1.0 / n as f64;
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - inv } else { -inv })
}

/// `M J`: subtracts each row's mean.
pub fn center_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols() as f64;
    let means: DVector<f64> = m.column_sum() / n;
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col -= &means;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct CenteredOrthogonalProblem<'a> {
    z: &'a DMatrix<f64>,
}

impl<'a> CenteredOrthogonalProblem<'a> {
    /// `z` is `r × n`.
    pub fn new(z: &'a DMatrix<f64>) -> Result<Self> {
        let (r, n) = z.shape();
        if r == 0 || r + 1 > n {
            return Err(Error::Invalid(format!(
                "code length r = {r} needs 1 <= r <= n - 1 with n = {n}"
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trace-maximization target".into()));
        }
        Ok(Self { z })
    }

    pub fn bits(&self) -> usize {
        self.z.nrows()
    }

    pub fn samples(&self) -> usize {
        self.z.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct CenteredOrthogonalSolution {
    pub v: DMatrix<f64>,
    pub objective: f64,
    /// Numerical rank of `Z J Zᵀ`.
    pub rank_used: usize,
    /// Whether the maximizer is unique (full rank).
    pub unique: bool,
}

/// Orthonormalizes `col` against `basis` (assumed orthonormal) with two
/// passes of modified Gram-Schmidt. Returns `None` if nothing is left.
fn orthonormalize_against(col: &mut DVector<f64>, basis: &[DVector<f64>]) -> Option<()> {
    let start = col.norm();
    if start == 0.0 {
        return None;
    }
    for _ in 0..2 {
        for b in basis {
            let proj = b.dot(col);
            col.axpy(-proj, b, 1.0);
        }
    }
    let norm = col.norm();
    if norm <= 1e-10 * start {
        return None;
    }
    *col /= norm;
    Some(())
}

fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

pub fn solve_centered_orthogonal(
    problem: CenteredOrthogonalProblem<'_>,
    rank_tol: f64,
    seed: u64,
) -> Result<CenteredOrthogonalSolution> {
    let z = problem.z;
    let (r, n) = z.shape();

    let zc = center_rows(z);
    let gram = &zc * zc.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lambda_max = eig.eigenvalues[order[0]];
    let threshold = rank_tol * lambda_max;
    let rank = if lambda_max > 0.0 {
        order
            .iter()
            .take_while(|&&j| eig.eigenvalues[j] > threshold)
            .count()
    } else {
        0
    };

    let eigvecs: Vec<DVector<f64>> = order
        .iter()
        .map(|&j| {
            let mut v = eig.eigenvectors.column(j).into_owned();
            fix_sign(&mut v);
            v
        })
        .collect();

    // Left factor: leading eigenvectors, then the null-space eigenvectors
    // re-orthonormalized.
    let mut left: Vec<DVector<f64>> = Vec::with_capacity(r);
    for (idx, v) in eigvecs.iter().enumerate() {
        let mut v = v.clone();
        if idx >= rank {
            orthonormalize_against(&mut v, &left).ok_or_else(|| {
                Error::Invalid("eigenvector basis is degenerate".into())
            })?;
        }
        left.push(v);
    }

    // Right factor, n-dimensional, kept orthogonal to the constant vector.
    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut right: Vec<DVector<f64>> = Vec::with_capacity(r + 1);
    right.push(ones);
    for (idx, v) in left.iter().take(rank).enumerate() {
        let lambda = eig.eigenvalues[order[idx]];
        let mut k = zc.tr_mul(v) / lambda.sqrt();
        orthonormalize_against(&mut k, &right)
            .ok_or_else(|| Error::Invalid("leading eigenvector collapsed".into()))?;
        right.push(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while right.len() < r + 1 {
        let mut k = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        if orthonormalize_against(&mut k, &right).is_some() {
            right.push(k);
        }
    }

    let left = DMatrix::from_columns(&left);
    let right = DMatrix::from_columns(&right[1..]);
    let v = (left * right.transpose()) * (n as f64).sqrt();
    let objective = z.dot(&v);
    Ok(CenteredOrthogonalSolution {
        v,
        objective,
        rank_used: rank,
        unique: rank == r,
    })
}

/// `‖V Vᵀ − nI‖_F` and `‖V 1‖₂`.
pub fn constraint_residuals(v: &DMatrix<f64>) -> (f64, f64) {
    let (r, n) = v.shape();
    let gram = v * v.transpose() - DMatrix::identity(r, r) * n as f64;
    (gram.norm(), v.column_sum().norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(r: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, n, |_, _| rng.sample(StandardNormal))
    }

    fn assert_feasible(v: &DMatrix<f64>) {
        let (r, n) = v.shape();
        let (orth, bal) = constraint_residuals(v);
        assert!(orth <= 1e-8 * n as f64, "orthogonality residual {orth}");
        assert!(bal <= 1e-8 * ((n * r) as f64).sqrt(), "balance residual {bal}");
    }

    #[test]
    fn centering_matrix_examples() {
        let j = centering_matrix(2);
        assert_eq!(j.as_slice(), &[0.5, -0.5, -0.5, 0.5]);
        let j = centering_matrix(5);
        assert!((&j * DVector::from_element(5, 1.0)).amax() < 1e-15);
        assert!((&j * &j - &j).amax() < 1e-15);
        let m = random(3, 5, 1);
        assert!((center_rows(&m) - &m * &j).amax() < 1e-14);
    }

    #[test]
    fn feasible_target_is_its_own_maximizer() {
        let (r, n) = (3, 9);
        let v0 = solve_centered_orthogonal(
            CenteredOrthogonalProblem::new(&random(r, n, 4)).unwrap(),
            DEFAULT_RANK_TOL,
            0,
        )
        .unwrap()
        .v;
        assert_feasible(&v0);
        let sol =
            solve_centered_orthogonal(CenteredOrthogonalProblem::new(&v0).unwrap(), DEFAULT_RANK_TOL, 1)
                .unwrap();
        assert!(sol.unique);
        assert!((sol.objective - (n * r) as f64).abs() < 1e-9);
        assert!((&sol.v - &v0).amax() < 1e-9);
    }

    #[test]
    fn zero_target_gives_feasible_non_unique_solution() {
        let z = DMatrix::zeros(2, 6);
        let sol =
            solve_centered_orthogonal(CenteredOrthogonalProblem::new(&z).unwrap(), DEFAULT_RANK_TOL, 3)
                .unwrap();
        assert_eq!(sol.rank_used, 0);
        assert!(!sol.unique);
        assert_eq!(sol.objective, 0.0);
        assert_feasible(&sol.v);
    }

    #[test]
    fn rank_deficient_target_still_feasible_for_any_seed() {
        // Rank-1 Z with r = 4: three directions come from the random completion.
        let u = random(4, 1, 2);
        let w = random(1, 10, 3);
        let z = &u * &w;
        for seed in 0..5 {
            let sol = solve_centered_orthogonal(
                CenteredOrthogonalProblem::new(&z).unwrap(),
                DEFAULT_RANK_TOL,
                seed,
            )
            .unwrap();
            assert_eq!(sol.rank_used, 1);
            assert_feasible(&sol.v);
        }
    }

    #[test]
    fn full_rank_is_seed_independent() {
        let z = random(3, 8, 5);
        let a = solve_centered_orthogonal(CenteredOrthogonalProblem::new(&z).unwrap(), DEFAULT_RANK_TOL, 1)
            .unwrap();
        let b = solve_centered_orthogonal(CenteredOrthogonalProblem::new(&z).unwrap(), DEFAULT_RANK_TOL, 2)
            .unwrap();
        assert!(a.unique);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn scale_equivariance() {
        let z = random(2, 7, 8);
        let base = solve_centered_orthogonal(CenteredOrthogonalProblem::new(&z).unwrap(), DEFAULT_RANK_TOL, 0)
            .unwrap();
        for alpha in [0.01, 3.0, 250.0] {
            let zs = &z * alpha;
            let scaled =
                solve_centered_orthogonal(CenteredOrthogonalProblem::new(&zs).unwrap(), DEFAULT_RANK_TOL, 0)
                    .unwrap();
            let expected = alpha * base.objective;
            assert!((scaled.objective - expected).abs() <= 1e-10 * expected.abs());
        }
    }

    #[test]
    fn rejects_infeasible_and_non_finite() {
        assert!(CenteredOrthogonalProblem::new(&DMatrix::zeros(4, 4)).is_err());
        let mut z = DMatrix::zeros(2, 5);
        z[(0, 0)] = f64::INFINITY;
        assert!(CenteredOrthogonalProblem::new(&z).is_err());
    }

    /// Random feasible matrix: orthonormalize random centered rows and scale by √n.
    fn random_feasible(r: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut rows = vec![ones];
        while rows.len() < r + 1 {
            let mut v = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
            if orthonormalize_against(&mut v, &rows).is_some() {
                rows.push(v);
            }
        }
        DMatrix::from_columns(&rows[1..]).transpose() * (n as f64).sqrt()
    }

    #[test]
    fn beats_random_feasible_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let z = random(2, 6, 17);
        let sol = solve_centered_orthogonal(CenteredOrthogonalProblem::new(&z).unwrap(), DEFAULT_RANK_TOL, 0)
            .unwrap();
        let best = (0..100_000)
            .map(|_| z.dot(&random_feasible(2, 6, &mut rng)))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(sol.objective >= best, "{} < {best}", sol.objective);
        // The bound is nearly attained by sampling at this size.
        assert!(best > 0.95 * sol.objective);
    }
}
