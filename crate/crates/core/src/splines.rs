//! Cubic B-spline bases, the second-order random-walk penalty, and the
//! spectral split of a penalized spline term into an unpenalized linear
//! column plus a penalized basis with a spherical coefficient prior.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;

/// Default number of basis functions per covariate.
pub const DEFAULT_BASIS_SIZE: usize = 20;

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const ZERO_EIGEN_REL: f64 = 1e-10;

/// Equidistant knots with the boundary knots extended by the same spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    knots: Vec<f64>,
    lower: f64,
    upper: f64,
}

impl KnotGrid {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior(&self) -> &[f64] {
        &self.knots[DEGREE + 1..self.knots.len() - DEGREE - 1]
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - DEGREE - 1
    }

    pub fn span(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn clamp(&self, x: f64) -> (f64, bool) {
        let c = x.clamp(self.lower, self.upper);
        (c, c != x)
    }
}

pub fn make_knots(x: &[f64], n_interior: usize) -> Result<KnotGrid> {
    if n_interior == 0 {
        return Err(Error::invalid("at least one interior knot is required"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariate"));
    }
    let lower = x.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(upper > lower) {
        return Err(Error::Degenerate("covariate has fewer than two distinct values".into()));
    }
    let step = (upper - lower) / (n_interior + 1) as f64;
    let n_knots = n_interior + 2 + 2 * DEGREE;
    let knots = (0..n_knots)
        .map(|j| {
            let offset = j as isize - DEGREE as isize;
            if offset == n_interior as isize + 1 {
                upper
            } else {
                lower + offset as f64 * step
            }
        })
        .collect();
    Ok(KnotGrid { knots, lower, upper })
}

/// Nonzero basis values at `x` and the index of the first of them.
fn basis_nonzero(x: f64, grid: &KnotGrid) -> (usize, [f64; DEGREE + 1]) {
    let t = &grid.knots;
    let k = grid.n_basis();
    // span index i with t[i] <= x < t[i+1], closed at the upper boundary
    let mut i = DEGREE;
    while i < k - 1 && x >= t[i + 1] {
        i += 1;
    }
    let mut n = [0.0; DEGREE + 1];
    let mut left = [0.0; DEGREE + 1];
    let mut right = [0.0; DEGREE + 1];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = x - t[i + 1 - j];
        right[j] = t[i + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (i - DEGREE, n)
}

pub fn bspline_row(x: f64, grid: &KnotGrid) -> Result<Vec<f64>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("covariate"));
    }
    if x < grid.lower || x > grid.upper {
        return Err(Error::invalid(format!(
            "value {x} outside knot span [{}, {}]",
            grid.lower, grid.upper
        )));
    }
    let mut row = vec![0.0; grid.n_basis()];
    let (first, vals) = basis_nonzero(x, grid);
    row[first..first + DEGREE + 1].copy_from_slice(&vals);
    Ok(row)
}

/// `S x K` basis matrix, one row per covariate value.
pub fn bspline_basis(x: &[f64], grid: &KnotGrid) -> Result<DMatrix<f64>> {
    let mut b = DMatrix::zeros(x.len(), grid.n_basis());
    for (s, &xs) in x.iter().enumerate() {
        let row = bspline_row(xs, grid)?;
        for (j, v) in row.into_iter().enumerate() {
            b[(s, j)] = v;
        }
    }
    Ok(b)
}

#[derive(Debug, Clone)]
pub struct SplinePenalty {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
}

/// `D2^T D2` for the `(K-2) x K` second-difference operator.
pub fn rw2_precision(k: usize) -> Result<SplinePenalty> {
    if k < 3 {
        return Err(Error::invalid(format!("second-order penalty needs K >= 3, got {k}")));
    }
    let mut d = DMatrix::zeros(k - 2, k);
    for r in 0..k - 2 {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    Ok(SplinePenalty {
        matrix: d.transpose() * d,
        rank: k - 2,
    })
}

/// Moore-Penrose inverse of a symmetric matrix and its numerical rank.
pub fn symmetric_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > ZERO_EIGEN_REL * max {
            rank += 1;
            let v = eig.eigenvectors.column(j);
            out += (v * v.transpose()) / lam;
        }
    }
    (out, rank)
}

/// Mixed-model form of one covariate's spline term.
#[derive(Debug, Clone)]
pub struct DecomposedBasis {
    pub basis: DMatrix<f64>,
    /// `U+ Lambda+^{1/2}`, `S x (K-2)`.
    pub b_tilde: DMatrix<f64>,
    pub x_col: DVector<f64>,
    pub eigvals: DVector<f64>,
    pub u_plus: DMatrix<f64>,
    /// Largest discarded eigenvalue of `B K^- B^T`.
    pub discarded_max: f64,
    /// `K^- B^T U+ Lambda+^{-1/2}`; maps a raw basis row onto the penalized columns.
    pub projection: DMatrix<f64>,
}

pub fn decompose_penalty(b: &DMatrix<f64>, pen: &SplinePenalty, x: &[f64]) -> Result<DecomposedBasis> {
    let (s, k) = b.shape();
    if pen.matrix.nrows() != k || x.len() != s {
        return Err(Error::Shape(format!(
            "basis {s}x{k}, penalty {}x{}, covariate length {}",
            pen.matrix.nrows(),
            pen.matrix.ncols(),
            x.len()
        )));
    }
    let (ginv, _) = symmetric_pinv(&pen.matrix);
    let cov = b * &ginv * b.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let keep = pen.rank;
    let max = eig.eigenvalues[order[0]].max(0.0);
    let threshold = ZERO_EIGEN_REL * max;
    let positive = order.iter().filter(|&&j| eig.eigenvalues[j] > threshold).count();
    if positive < keep {
        return Err(Error::Degenerate(format!(
            "basis yields {positive} positive eigenvalues, need {keep} (S = {s}, K = {k})"
        )));
    }
    let mut u_plus = DMatrix::zeros(s, keep);
    let mut eigvals = DVector::zeros(keep);
    for (c, &j) in order.iter().take(keep).enumerate() {
        u_plus.set_column(c, &eig.eigenvectors.column(j));
        eigvals[c] = eig.eigenvalues[j];
    }
    let discarded_max = order.get(keep).map_or(0.0, |&j| eig.eigenvalues[j]);
    let mut b_tilde = u_plus.clone();
    let mut inv_sqrt = u_plus.clone();
    for c in 0..keep {
        let root = eigvals[c].sqrt();
        b_tilde.column_mut(c).scale_mut(root);
        inv_sqrt.column_mut(c).scale_mut(1.0 / root);
    }
    let projection = &ginv * b.transpose() * inv_sqrt;
    Ok(DecomposedBasis {
        basis: b.clone(),
        b_tilde,
        x_col: DVector::from_column_slice(x),
        eigvals,
        u_plus,
        discarded_max,
        projection,
    })
}

/// `Z_m = [x_m | B~_m]`, `S x (K-1)`.
#[derive(Debug, Clone)]
pub struct GroupDesign {
    pub z: DMatrix<f64>,
    pub group_id: usize,
}

pub fn build_group_design(dec: &DecomposedBasis, m: usize) -> GroupDesign {
    let (s, p) = dec.b_tilde.shape();
    let mut z = DMatrix::zeros(s, p + 1);
    z.set_column(0, &dec.x_col);
    z.columns_mut(1, p).copy_from(&dec.b_tilde);
    GroupDesign { z, group_id: m }
}

/// Everything needed to evaluate one covariate's smooth term in and out of sample.
#[derive(Debug, Clone)]
pub struct CovariateSmooth {
    pub grid: KnotGrid,
    pub decomposition: DecomposedBasis,
    pub design: GroupDesign,
}

impl CovariateSmooth {
    /// `x` is the standardized training covariate; `k` the basis size.
    pub fn new(x: &[f64], k: usize, m: usize) -> Result<Self> {
        if k < 5 {
            return Err(Error::invalid(format!("basis size must be at least 5, got {k}")));
        }
        let grid = make_knots(x, k - DEGREE - 1)?;
        let b = bspline_basis(x, &grid)?;
        let pen = rw2_precision(k)?;
        let decomposition = decompose_penalty(&b, &pen, x)?;
        let design = build_group_design(&decomposition, m);
        Ok(Self {
            grid,
            decomposition,
            design,
        })
    }

    pub fn n_penalized(&self) -> usize {
        self.decomposition.b_tilde.ncols()
    }

    /// Penalized-basis row for a new standardized value, clamped into the
    /// training span; the flag reports whether clamping happened.
    pub fn penalized_row(&self, x_new: f64) -> Result<(Vec<f64>, bool)> {
        let (xc, clamped) = self.grid.clamp(x_new);
        let raw = DVector::from_vec(bspline_row(xc, &self.grid)?);
        let row = self.decomposition.projection.transpose() * raw;
        Ok((row.iter().copied().collect(), clamped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct recursive Cox-de Boor definition.
    fn cox_de_boor(x: f64, i: usize, p: usize, t: &[f64], last_span: usize) -> f64 {
        if p == 0 {
            // closed on the right at the upper boundary
            let inside = if x == t[last_span + 1] {
                t[i] < x && x <= t[i + 1]
            } else {
                t[i] <= x && x < t[i + 1]
            };
            return if inside { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(x, i, p - 1, t, last_span);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + p + 1] - x) / d2 * cox_de_boor(x, i + 1, p - 1, t, last_span);
        }
        v
    }

    fn random_x(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn knots_unit_interval() {
        let g = make_knots(&[0.0, 0.3, 1.0], 3).unwrap();
        let interior = g.interior();
        assert_eq!(interior.len(), 3);
        for (a, b) in interior.iter().zip([0.25, 0.5, 0.75]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(g.n_basis(), 7);
        assert!(make_knots(&[1.0, 1.0], 3).is_err());
        assert!(make_knots(&[0.0, 1.0], 0).is_err());
    }

    #[test]
    fn knots_shift_equivariant() {
        let x = random_x(30, 1);
        let shifted: Vec<f64> = x.iter().map(|v| v + 7.5).collect();
        let a = make_knots(&x, 6).unwrap();
        let b = make_knots(&shifted, 6).unwrap();
        for (p, q) in a.knots().iter().zip(b.knots()) {
            assert!((q - p - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_partition_of_unity_and_support() {
        let x = random_x(200, 2);
        let g = make_knots(&x, 8).unwrap();
        let b = bspline_basis(&x, &g).unwrap();
        for r in 0..b.nrows() {
            let row = b.row(r);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(row.iter().filter(|&&v| v != 0.0).count() <= 4);
        }
        for &knot in g.interior().iter().chain([g.span().0, g.span().1].iter()) {
            let row = bspline_row(knot, &g).unwrap();
            assert!(row.iter().filter(|&&v| v.abs() > 1e-14).count() <= 3);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(bspline_row(g.span().1 + 0.1, &g).is_err());
    }

    #[test]
    fn basis_matches_recursive_definition() {
        let x = random_x(60, 3);
        let g = make_knots(&x, 5).unwrap();
        let b = bspline_basis(&x, &g).unwrap();
        let last_span = g.n_basis() - 1;
        for (s, &xs) in x.iter().enumerate() {
            for j in 0..g.n_basis() {
                let oracle = cox_de_boor(xs, j, DEGREE, g.knots(), last_span);
                assert!((b[(s, j)] - oracle).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn basis_rows_follow_permutation() {
        let x = random_x(25, 4);
        let g = make_knots(&x, 6).unwrap();
        let b = bspline_basis(&x, &g).unwrap();
        let perm: Vec<usize> = (0..x.len()).rev().collect();
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let pb = bspline_basis(&px, &g).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(pb.row(r), b.row(i));
        }
    }

    #[test]
    fn rw2_null_space_and_quadratic_form() {
        let pen = rw2_precision(5).unwrap();
        let eig = SymmetricEigen::new(pen.matrix.clone());
        let nonzero = eig.eigenvalues.iter().filter(|&&v| v > 1e-10).count();
        assert_eq!(nonzero, 3);
        let k = 9;
        let pen = rw2_precision(k).unwrap();
        let ones = DVector::from_element(k, 1.0);
        let idx = DVector::from_fn(k, |i, _| (i + 1) as f64);
        assert!((&pen.matrix * ones).norm() < 1e-12);
        assert!((&pen.matrix * idx).norm() < 1e-12);
        for r in 0..k {
            assert!(pen.matrix.row(r).sum().abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let g = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
            let quad = (g.transpose() * &pen.matrix * &g)[(0, 0)];
            let direct: f64 = (0..k - 2).map(|i| (g[i] - 2.0 * g[i + 1] + g[i + 2]).powi(2)).sum();
            assert!((quad - direct).abs() < 1e-12);
        }
        assert!(rw2_precision(2).is_err());
    }

    #[test]
    fn decomposition_identities() {
        let x = random_x(40, 6);
        let k = 12;
        let g = make_knots(&x, k - 4).unwrap();
        let b = bspline_basis(&x, &g).unwrap();
        let pen = rw2_precision(k).unwrap();
        let dec = decompose_penalty(&b, &pen, &x).unwrap();
        assert_eq!(dec.eigvals.len(), k - 2);
        let (ginv, rank) = symmetric_pinv(&pen.matrix);
        assert_eq!(rank, k - 2);
        let cov = &b * ginv * b.transpose();
        let recon = &dec.u_plus * DMatrix::from_diagonal(&dec.eigvals) * dec.u_plus.transpose();
        assert!((&cov - recon).norm() / cov.norm() < 1e-10);
        let outer = &dec.b_tilde * dec.b_tilde.transpose();
        assert!((&cov - outer).norm() / cov.norm() < 1e-10);
        let gram = dec.u_plus.transpose() * &dec.u_plus;
        assert!((gram - DMatrix::identity(k - 2, k - 2)).norm() < 1e-10);
        let min_kept = dec.eigvals.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min_kept > ZERO_EIGEN_REL * dec.eigvals[0]);
        assert!(dec.discarded_max.abs() * 100.0 < min_kept);
    }

    #[test]
    fn decomposition_rejects_too_few_rows() {
        let x = random_x(5, 7);
        let k = 12;
        let g = make_knots(&x, k - 4).unwrap();
        let b = bspline_basis(&x, &g).unwrap();
        let pen = rw2_precision(k).unwrap();
        assert!(matches!(decompose_penalty(&b, &pen, &x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn group_design_layout() {
        let x = random_x(30, 8);
        let sm = CovariateSmooth::new(&x, 10, 2).unwrap();
        let z = &sm.design.z;
        assert_eq!(z.ncols(), 9);
        assert_eq!(sm.design.group_id, 2);
        for s in 0..x.len() {
            assert_eq!(z[(s, 0)], x[s]);
        }
        let omega = 0.7;
        let cov_tilde = &sm.decomposition.b_tilde * sm.decomposition.b_tilde.transpose() * (omega * omega);
        let (ginv, _) = symmetric_pinv(&rw2_precision(10).unwrap().matrix);
        let b = &sm.decomposition.basis;
        let cov_raw = b * ginv * b.transpose() * (omega * omega);
        assert!((&cov_tilde - &cov_raw).norm() / cov_raw.norm() < 1e-10);
    }

    #[test]
    fn out_of_sample_projection_reproduces_training_rows() {
        let x = random_x(35, 9);
        let sm = CovariateSmooth::new(&x, 10, 0).unwrap();
        for (s, &xs) in x.iter().enumerate() {
            let (row, clamped) = sm.penalized_row(xs).unwrap();
            assert!(!clamped);
            for (c, v) in row.iter().enumerate() {
                assert!((v - sm.decomposition.b_tilde[(s, c)]).abs() < 1e-9);
            }
        }
        let (_, clamped) = sm.penalized_row(10.0).unwrap();
        assert!(clamped);
    }
}
