//! B-spline basis systems and the L2 geometry of coefficient matrices.
//!
//! Curves live in L2 over a closed interval. A [`BasisSystem`] fixes a
//! clamped B-spline basis of a given order and size on that interval and
//! precomputes its Gram matrix `F` together with a symmetric square root,
//! so that inner products and norms of basis-expanded functions reduce to
//! finite-dimensional expressions: for coefficient rows `a`, `b`,
//! `<f, g> = a F b'` and `||f|| = ||F^{1/2} b'||_2`.
//!
//! Multivariate functional data enters as coefficient matrices with one row
//! per dimension; [`BasisSystem::l2_inner`] and [`BasisSystem::l2_norms`]
//! extend the identities row-wise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::real::{cnt, cst, Real};

/// Clamped B-spline basis with uniform interior knots.
#[derive(Debug, Clone)]
pub struct BasisSystem<T: Real> {
    order: usize,
    size: usize,
    domain: (T, T),
    /// Full knot vector of length `size + order`: the boundary knots are
    /// repeated `order` times, interior knots are equidistant.
    knots: Vec<T>,
    gram: DMatrix<T>,
    gram_sqrt: DMatrix<T>,
    gram_sqrt_inv: DMatrix<T>,
}

impl<T: Real> BasisSystem<T> {
    /// Builds a B-spline basis of `order` (1 = piecewise constant,
    /// 4 = cubic) with `size` basis functions on `domain`.
    pub fn bspline(order: usize, size: usize, domain: (T, T)) -> Result<Self> {
        if order == 0 {
            return Err(Error::param("basis order must be at least 1"));
        }
        if size < order {
            return Err(Error::param(format!(
                "basis size {size} must be at least the order {order}"
            )));
        }
        let (t0, t1) = domain;
        if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::param("domain must be a finite interval (t0, t1) with t0 < t1"));
        }

        let mut knots = Vec::with_capacity(size + order);
        let interior = size - order;
        let width = (t1 - t0) / cnt::<T>(interior + 1);
        for _ in 0..order {
            knots.push(t0);
        }
        for i in 1..=interior {
            knots.push(t0 + width * cnt::<T>(i));
        }
        for _ in 0..order {
            knots.push(t1);
        }

        let mut basis = BasisSystem {
            order,
            size,
            domain,
            knots,
            gram: DMatrix::zeros(0, 0),
            gram_sqrt: DMatrix::zeros(0, 0),
            gram_sqrt_inv: DMatrix::zeros(0, 0),
        };
        basis.gram = basis.compute_gram();
        let (sqrt, sqrt_inv) = symmetric_sqrt(&basis.gram)?;
        basis.gram_sqrt = sqrt;
        basis.gram_sqrt_inv = sqrt_inv;
        Ok(basis)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn domain(&self) -> (T, T) {
        self.domain
    }

    /// Gram matrix `F` with entries `∫ φ_i φ_j`.
    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    /// Symmetric square root of the Gram matrix.
    pub fn gram_sqrt(&self) -> &DMatrix<T> {
        &self.gram_sqrt
    }

    /// Inverse of [`Self::gram_sqrt`].
    pub fn gram_sqrt_inv(&self) -> &DMatrix<T> {
        &self.gram_sqrt_inv
    }

    /// Evaluates all basis functions at `t`.
    ///
    /// `t` must lie inside the domain; the right endpoint is included.
    pub fn eval_at(&self, t: T) -> Result<DVector<T>> {
        let (t0, t1) = self.domain;
        if !(t >= t0 && t <= t1) {
            return Err(Error::param("evaluation point outside the basis domain"));
        }
        Ok(self.eval_unchecked(t))
    }

    fn eval_unchecked(&self, t: T) -> DVector<T> {
        let k = self.order;
        let n_knots = self.knots.len();
        // Level 1: indicators of [knots[i], knots[i+1]). The last nonempty
        // span is closed on the right so the endpoint evaluates cleanly.
        let mut level = vec![T::zero(); n_knots - 1];
        let last_span = self.size - 1;
        for (i, v) in level.iter_mut().enumerate() {
            let lo = self.knots[i];
            let hi = self.knots[i + 1];
            let inside = if i == last_span {
                t >= lo && t <= hi
            } else {
                t >= lo && t < hi
            };
            if inside && lo < hi {
                *v = T::one();
            }
        }
        for m in 2..=k {
            for i in 0..(n_knots - m) {
                let mut value = T::zero();
                let d1 = self.knots[i + m - 1] - self.knots[i];
                if d1 > T::zero() {
                    value += (t - self.knots[i]) / d1 * level[i];
                }
                let d2 = self.knots[i + m] - self.knots[i + 1];
                if d2 > T::zero() {
                    value += (self.knots[i + m] - t) / d2 * level[i + 1];
                }
                level[i] = value;
            }
        }
        DVector::from_fn(self.size, |i, _| level[i])
    }

    /// Evaluation matrix over a grid: row `g`, column `m` holds `φ_m(grid[g])`.
    pub fn eval_matrix(&self, grid: &[T]) -> Result<DMatrix<T>> {
        let mut out = DMatrix::zeros(grid.len(), self.size);
        for (g, &t) in grid.iter().enumerate() {
            let row = self.eval_at(t)?;
            out.row_mut(g).copy_from(&row.transpose());
        }
        Ok(out)
    }

    /// Least-squares projection of sampled curves onto the basis.
    ///
    /// `samples` holds one curve per column, sampled at `grid`. Returns the
    /// `size x n_curves` coefficient matrix. The normal equations get a tiny
    /// ridge only if their condition number exceeds 1e12.
    pub fn project(&self, grid: &[T], samples: &DMatrix<T>) -> Result<DMatrix<T>> {
        if samples.nrows() != grid.len() {
            return Err(Error::shape(format!(
                "samples have {} rows but the grid has {} points",
                samples.nrows(),
                grid.len()
            )));
        }
        let mut distinct = grid.to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).expect("grid times must be comparable"));
        distinct.dedup();
        if distinct.len() < self.size {
            return Err(Error::rank(format!(
                "{} distinct grid points cannot identify {} basis coefficients",
                distinct.len(),
                self.size
            )));
        }

        let phi = self.eval_matrix(grid)?;
        let mut normal = phi.transpose() * &phi;
        let eig = normal.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(T::zero(), |a, b| a.max(b));
        let min = eig.eigenvalues.iter().cloned().fold(max, |a, b| a.min(b));
        if !(min > T::zero()) || max / min > cst(1e12) {
            let ridge = cst::<T>(1e-10) * normal.trace() / cnt(self.size);
            for i in 0..self.size {
                normal[(i, i)] += ridge;
            }
        }
        let rhs = phi.transpose() * samples;
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::numerical("projection normal equations are not positive definite"))?;
        Ok(chol.solve(&rhs))
    }

    /// L2 inner product of two coefficient matrices (one function per row):
    /// `Σ_j a_j F b_j'`.
    pub fn l2_inner(&self, a: &DMatrix<T>, b: &DMatrix<T>) -> T {
        debug_assert_eq!(a.shape(), b.shape());
        debug_assert_eq!(a.ncols(), self.size);
        (a * &self.gram).dot(b)
    }

    /// Row-wise L2 norms of a coefficient matrix: `||F^{1/2} b_j'||_2`.
    pub fn l2_norms(&self, b: &DMatrix<T>) -> DVector<T> {
        debug_assert_eq!(b.ncols(), self.size);
        let q = b * &self.gram_sqrt;
        DVector::from_fn(q.nrows(), |j, _| q.row(j).norm())
    }

    fn compute_gram(&self) -> DMatrix<T> {
        let (nodes, weights) = gauss_legendre::<T>(self.order + 1);
        let mut gram = DMatrix::zeros(self.size, self.size);
        let half = cst::<T>(0.5);
        // Nonempty spans run between consecutive distinct knots.
        for j in (self.order - 1)..self.size {
            let lo = self.knots[j];
            let hi = self.knots[j + 1];
            if !(lo < hi) {
                continue;
            }
            let mid = (lo + hi) * half;
            let scale = (hi - lo) * half;
            for (x, w) in nodes.iter().zip(&weights) {
                let t = mid + scale * *x;
                let phi = self.eval_unchecked(t);
                let wt = *w * scale;
                gram.syger(wt, &phi, &phi, T::one());
            }
        }
        // syger fills one triangle; symmetrize.
        for i in 0..self.size {
            for j in 0..i {
                gram[(j, i)] = gram[(i, j)];
            }
        }
        gram
    }
}

/// Symmetric square root and its inverse via eigendecomposition.
fn symmetric_sqrt<T: Real>(mat: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let eig = mat.clone().symmetric_eigen();
    let n = mat.nrows();
    let max = eig.eigenvalues.iter().cloned().fold(T::zero(), |a, b| a.max(b));
    let floor = max * cst::<T>(1e-14);
    let mut sqrt_vals = DVector::zeros(n);
    let mut inv_vals = DVector::zeros(n);
    for i in 0..n {
        let lambda = eig.eigenvalues[i];
        if lambda <= floor {
            return Err(Error::numerical(
                "Gram matrix is numerically singular; basis functions are not independent",
            ));
        }
        sqrt_vals[i] = lambda.sqrt();
        inv_vals[i] = T::one() / lambda.sqrt();
    }
    let v = &eig.eigenvectors;
    let sqrt = v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose();
    let inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    Ok((sqrt, inv))
}

/// Gauss-Legendre nodes and weights on [-1, 1], computed by Newton iteration
/// on the Legendre polynomial. Nodes are accurate to f64 roundoff, which is
/// where every supported scalar starts.
fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes.push(cst::<T>(-x));
        weights.push(cst::<T>(2.0 / ((1.0 - x * x) * dp * dp)));
    }
    (nodes, weights)
}

/// Value and derivative of the Legendre polynomial P_n at x.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = (n as f64) * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
