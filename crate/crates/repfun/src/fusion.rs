//! Fusion operators and transformed design matrices.
//!
//! Both estimators in this crate pull the same trick: a penalty that couples
//! coefficient functions across dimensions is rewritten as a plain group
//! lasso in transformed coordinates. The pieces are
//!
//! * [`FuTransform`]: the nearest-neighbor fusion operator `L = W - I`, its
//!   full-row-rank reduction `L0`, an orthonormal basis `T` of the null
//!   space of `L0` (which controls the otherwise unpenalized directions),
//!   and the invertible stack `D = [L0; T]`.
//! * [`GfulTransform`]: the group-fusion operator `G_α = [(1-α)R; α M̄]`
//!   acting on dimensions permuted into group order, where `R` holds scaled
//!   within-group centering factors and `M̄` the normalized group means.
//! * [`TransformedDesign`]: the basis-expanded design matrix in the
//!   transformed coordinates, the penalty blocks with their weights and
//!   meaning, and the back-map from solver coefficients to coefficient
//!   functions.
//!
//! Throughout, a subject's expansion coefficients form a `p x M` matrix
//! `A`, a coefficient function estimate is `B` (`p x M`), and the solver
//! vector `γ` stacks the rows of `H B F^{1/2}` for the relevant operator
//! `H`. Predictions are invariant under the rewrite: design row `i` dotted
//! with `γ` equals the L2 inner product of subject `i` with `B`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSystem;
use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::geometry::{ConditionGrouping, NeighborMap};
use crate::real::{cnt, cst, Real};

/// What a zeroed-out penalty block means for the fitted coefficients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PenaltyRole {
    /// Zero block fuses this pair of dimensions.
    Fuse(usize, usize),
    /// Zero block kills the null-space components (no equality statement).
    Complement,
    /// Zero block fuses every dimension in this input group.
    FuseGroup(usize),
    /// Zero block zeroes the mean function of this input group.
    GroupMean(usize),
    /// Zero block zeroes the coefficients of these dimensions.
    Vanish(Vec<usize>),
}

/// Nearest-neighbor fusion operator and its reduction.
#[derive(Debug, Clone)]
pub struct FuTransform<T: Real> {
    l: DMatrix<T>,
    l0: DMatrix<T>,
    t_basis: DMatrix<T>,
    d: DMatrix<T>,
    d_inv: DMatrix<T>,
    eta: T,
    r: usize,
    /// Per `L0` row: the (dimension, neighbor) pair the row compares.
    row_pairs: Vec<(usize, usize)>,
    /// Per `L0` row: whether it is a doubled two-cycle row.
    merged: Vec<bool>,
}

impl<T: Real> FuTransform<T> {
    pub fn p(&self) -> usize {
        self.l.nrows()
    }

    /// `L = W - I` with one row per dimension.
    pub fn l(&self) -> &DMatrix<T> {
        &self.l
    }

    /// Full-row-rank reduction of `L` (same weighted penalty value).
    pub fn l0(&self) -> &DMatrix<T> {
        &self.l0
    }

    /// Orthonormal rows spanning the null space of `L0`.
    pub fn t_basis(&self) -> &DMatrix<T> {
        &self.t_basis
    }

    /// Invertible stack `[L0; T]`.
    pub fn d(&self) -> &DMatrix<T> {
        &self.d
    }

    pub fn d_inv(&self) -> &DMatrix<T> {
        &self.d_inv
    }

    /// Frobenius norm of the null-space basis, used in the complement weight.
    pub fn eta(&self) -> T {
        self.eta
    }

    /// Row rank of `L0`.
    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn row_pairs(&self) -> &[(usize, usize)] {
        &self.row_pairs
    }

    pub fn merged_rows(&self) -> &[bool] {
        &self.merged
    }

    /// Weight of the null-complement penalty block.
    pub fn complement_weight(&self) -> T {
        let extra = self.p() - self.r;
        if extra == 0 {
            T::zero()
        } else {
            cnt::<T>(extra).sqrt() / self.eta
        }
    }
}

/// Builds the fusion operator for a nearest-neighbor map.
///
/// Two-cycle pairs contribute one doubled row anchored at the smaller index;
/// all other rows carry over unchanged, in dimension order. The null space
/// of the reduction has dimension equal to the number of two-cycles.
pub fn build_fu_transform<T: Real>(map: &NeighborMap) -> Result<FuTransform<T>> {
    let p = map.p();
    if p < 2 {
        return Err(Error::param("fusion needs at least two dimensions"));
    }
    let mut l = DMatrix::zeros(p, p);
    for j in 0..p {
        let v = map.neighbor(j);
        if v == j || v >= p {
            return Err(Error::param(format!("neighbor map sends {j} to invalid {v}")));
        }
        l[(j, j)] = -T::one();
        l[(j, v)] += T::one();
    }

    let in_two_cycle: Vec<bool> = (0..p).map(|j| map.neighbor(map.neighbor(j)) == j).collect();
    let n_cycles = in_two_cycle.iter().filter(|&&b| b).count() / 2;
    let r = p - n_cycles;

    let mut l0 = DMatrix::zeros(r, p);
    let mut row_pairs = Vec::with_capacity(r);
    let mut merged = Vec::with_capacity(r);
    let mut row = 0;
    for j in 0..p {
        let v = map.neighbor(j);
        if in_two_cycle[j] {
            if j < v {
                l0.row_mut(row).copy_from(&(l.row(j) * cst::<T>(2.0)));
                row_pairs.push((j, v));
                merged.push(true);
                row += 1;
            }
        } else {
            l0.row_mut(row).copy_from(&l.row(j));
            row_pairs.push((j, v));
            merged.push(false);
            row += 1;
        }
    }
    debug_assert_eq!(row, r);

    let t_basis = null_space_basis(&l0, p - r)?;
    let eta = t_basis.norm();

    let mut d = DMatrix::zeros(p, p);
    d.rows_mut(0, r).copy_from(&l0);
    d.rows_mut(r, p - r).copy_from(&t_basis);
    let d_inv = d
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::rank("fusion stack [L0; T] is singular"))?;

    Ok(FuTransform { l, l0, t_basis, d, d_inv, eta, r, row_pairs, merged })
}

/// Orthonormal basis of the null space of `mat`, as rows, via the
/// eigendecomposition of `mat' mat`. `dim` is the structurally known null
/// dimension; a mismatch with the numerical rank is an error.
fn null_space_basis<T: Real>(mat: &DMatrix<T>, dim: usize) -> Result<DMatrix<T>> {
    let p = mat.ncols();
    if dim == 0 {
        return Ok(DMatrix::zeros(0, p));
    }
    let gram = mat.transpose() * mat;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).expect("eigenvalues are finite")
    });
    let max = eig.eigenvalues[order[p - 1]].max(T::one());
    let tol = max * cst::<T>(1e-10);
    if eig.eigenvalues[order[dim - 1]] > tol || eig.eigenvalues[order[dim]] <= tol {
        return Err(Error::rank(
            "numerical null space does not match the structural null dimension",
        ));
    }
    let mut basis = DMatrix::zeros(dim, p);
    for (row, &idx) in order[..dim].iter().enumerate() {
        let mut v = eig.eigenvectors.column(idx).transpose();
        // Deterministic sign: first significant entry positive.
        if let Some(first) = v.iter().find(|x| x.abs() > cst(1e-8)) {
            if *first < T::zero() {
                v = -v;
            }
        }
        basis.row_mut(row).copy_from(&v);
    }
    Ok(basis)
}

/// Group-fusion operator for a fixed mixing weight `alpha`.
#[derive(Debug, Clone)]
pub struct GfulTransform<T: Real> {
    alpha: T,
    /// Permutation taking original dimensions to group order:
    /// `perm[u]` = original dimension at permuted position `u`.
    perm: Vec<usize>,
    group_sizes: Vec<usize>,
    membership: DMatrix<T>,
    membership_norm: DMatrix<T>,
    r_block: DMatrix<T>,
    g_alpha: DMatrix<T>,
    h: DMatrix<T>,
    h_inv: DMatrix<T>,
    /// Per input group: row range of its fusion components in the
    /// transformed vector (empty for singleton groups).
    fusion_ranges: Vec<Range<usize>>,
    /// Per input group: row index of its mean component.
    mean_rows: Vec<usize>,
}

impl<T: Real> GfulTransform<T> {
    pub fn p(&self) -> usize {
        self.h.nrows()
    }

    pub fn k(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// Group membership indicator in original dimension order (K x p).
    pub fn membership(&self) -> &DMatrix<T> {
        &self.membership
    }

    /// Row-normalized membership (rows sum to one).
    pub fn membership_norm(&self) -> &DMatrix<T> {
        &self.membership_norm
    }

    /// Stacked scaled centering factors in permuted coordinates
    /// ((p - K) x p).
    pub fn r_block(&self) -> &DMatrix<T> {
        &self.r_block
    }

    /// `[(1-α) R; α M̄]` in permuted coordinates.
    pub fn g_alpha(&self) -> &DMatrix<T> {
        &self.g_alpha
    }

    /// `G_α S`: the operator applied to dimensions in original order.
    pub fn h(&self) -> &DMatrix<T> {
        &self.h
    }

    pub fn h_inv(&self) -> &DMatrix<T> {
        &self.h_inv
    }

    pub fn fusion_ranges(&self) -> &[Range<usize>] {
        &self.fusion_ranges
    }

    pub fn mean_rows(&self) -> &[usize] {
        &self.mean_rows
    }
}

/// Builds the group-fusion operator. `alpha` must lie strictly between 0
/// and 1; the endpoints degenerate (rank loss) and are handled upstream.
pub fn build_gful_transform<T: Real>(
    grouping: &ConditionGrouping,
    alpha: T,
) -> Result<GfulTransform<T>> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::param("alpha must lie strictly in (0, 1)"));
    }
    let p = grouping.p();
    let k = grouping.k();
    let groups = grouping.groups();
    let group_sizes = grouping.sizes();

    let perm: Vec<usize> = groups.iter().flatten().copied().collect();
    debug_assert_eq!(perm.len(), p);

    // Scaled centering factors, block-diagonal in permuted coordinates.
    let mut r_block = DMatrix::zeros(p - k, p);
    let mut fusion_ranges = Vec::with_capacity(k);
    let mut row_off = 0;
    let mut col_off = 0;
    for pk in &group_sizes {
        let pk = *pk;
        if pk >= 2 {
            let rk = centering_factor::<T>(pk);
            let scale = cnt::<T>(pk).sqrt();
            r_block
                .view_mut((row_off, col_off), (pk - 1, pk))
                .copy_from(&(rk * scale));
            fusion_ranges.push(row_off..row_off + pk - 1);
            row_off += pk - 1;
        } else {
            fusion_ranges.push(row_off..row_off);
        }
        col_off += pk;
    }

    // Normalized membership in permuted coordinates.
    let mut mbar_perm = DMatrix::zeros(k, p);
    let mut col_off = 0;
    for (g, pk) in group_sizes.iter().enumerate() {
        for c in 0..*pk {
            mbar_perm[(g, col_off + c)] = T::one() / cnt::<T>(*pk);
        }
        col_off += pk;
    }

    let mut g_alpha = DMatrix::zeros(p, p);
    let one_minus = T::one() - alpha;
    g_alpha.rows_mut(0, p - k).copy_from(&(&r_block * one_minus));
    g_alpha.rows_mut(p - k, k).copy_from(&(&mbar_perm * alpha));

    let mut s = DMatrix::zeros(p, p);
    for (u, &orig) in perm.iter().enumerate() {
        s[(u, orig)] = T::one();
    }
    let h = &g_alpha * &s;
    let h_inv = h
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::rank("group-fusion operator is singular"))?;

    let mut membership = DMatrix::zeros(k, p);
    let mut membership_norm = DMatrix::zeros(k, p);
    for (dim, &g) in grouping.labels().iter().enumerate() {
        membership[(g, dim)] = T::one();
        membership_norm[(g, dim)] = T::one() / cnt::<T>(group_sizes[g]);
    }

    let mean_rows = (0..k).map(|g| p - k + g).collect();

    Ok(GfulTransform {
        alpha,
        perm,
        group_sizes,
        membership,
        membership_norm,
        r_block,
        g_alpha,
        h,
        h_inv,
        fusion_ranges,
        mean_rows,
    })
}

/// The `(n-1) x n` upper-trapezoidal factor from the QR decomposition of the
/// centering matrix `I - (1/n) 1 1'`. Satisfies `Rk 1 = 0` and
/// `||Rk u||^2 = Σ (u_i - mean u)^2`.
fn centering_factor<T: Real>(n: usize) -> DMatrix<T> {
    let inv = T::one() / cnt::<T>(n);
    let centering = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            T::one() - inv
        } else {
            -inv
        }
    });
    let qr = centering.qr();
    let r_full = qr.r();
    let mut rk = r_full.rows(0, n - 1).into_owned();
    // Deterministic sign: positive diagonal.
    for i in 0..(n - 1) {
        if rk[(i, i)] < T::zero() {
            let mut row = rk.row_mut(i);
            row.neg_mut();
        }
    }
    rk
}

/// Kronecker lift `Z ⊗ I_m`, which applies `Z` across dimension blocks of a
/// stacked coefficient vector.
pub fn kron_lift<T: Real>(z: &DMatrix<T>, m: usize) -> DMatrix<T> {
    let mut out = DMatrix::zeros(z.nrows() * m, z.ncols() * m);
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let v = z[(i, j)];
            if v != T::zero() {
                for d in 0..m {
                    out[(i * m + d, j * m + d)] = v;
                }
            }
        }
    }
    out
}

/// Design matrix in transformed coordinates plus the penalty layout and
/// back-map. Produced by [`fu_design`], [`gful_design`], and [`gl_design`].
#[derive(Debug, Clone)]
pub struct TransformedDesign<T: Real> {
    pub design: DMatrix<T>,
    pub ranges: Vec<Range<usize>>,
    pub weights: Vec<T>,
    pub roles: Vec<PenaltyRole>,
    h: DMatrix<T>,
    h_inv: DMatrix<T>,
    gram_sqrt: DMatrix<T>,
    gram_sqrt_inv: DMatrix<T>,
    p: usize,
    m: usize,
}

impl<T: Real> TransformedDesign<T> {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn basis_size(&self) -> usize {
        self.m
    }

    /// Solver coefficients for a given coefficient matrix: rows of
    /// `H B F^{1/2}` stacked.
    pub fn gamma_from_beta(&self, beta: &DMatrix<T>) -> DVector<T> {
        let transformed = &self.h * beta * &self.gram_sqrt;
        flatten_rows(&transformed)
    }

    /// Coefficient matrix recovered from solver coefficients:
    /// `H^{-1} Γ F^{-1/2}`.
    pub fn beta_from_gamma(&self, gamma: &DVector<T>) -> DMatrix<T> {
        let gamma_rows = unflatten_rows(gamma, self.p, self.m);
        &self.h_inv * gamma_rows * &self.gram_sqrt_inv
    }
}

pub(crate) fn flatten_rows<T: Real>(mat: &DMatrix<T>) -> DVector<T> {
    let (p, m) = mat.shape();
    DVector::from_fn(p * m, |i, _| mat[(i / m, i % m)])
}

pub(crate) fn unflatten_rows<T: Real>(vec: &DVector<T>, p: usize, m: usize) -> DMatrix<T> {
    DMatrix::from_fn(p, m, |i, j| vec[i * m + j])
}

/// Shared design assembly: row `i` holds the stacked rows of
/// `H^{-T} A_i F^{1/2}`, so that dotting with `γ` reproduces the L2 inner
/// product of subject `i` with the back-mapped coefficients.
fn assemble_design<T: Real>(
    dataset: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    h_inv: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let p = dataset.p();
    let m = dataset.basis_size();
    if m != basis.size() {
        return Err(Error::shape(format!(
            "dataset coefficients have {m} columns but the basis has {} functions",
            basis.size()
        )));
    }
    if h_inv.nrows() != p {
        return Err(Error::shape(format!(
            "operator acts on {} dimensions but the dataset has {p}",
            h_inv.nrows()
        )));
    }
    let h_inv_t = h_inv.transpose();
    let mut design = DMatrix::zeros(dataset.n(), p * m);
    for (i, a) in dataset.coeffs().iter().enumerate() {
        let tilde = &h_inv_t * a * basis.gram_sqrt();
        for j in 0..p {
            for c in 0..m {
                design[(i, j * m + c)] = tilde[(j, c)];
            }
        }
    }
    Ok(design)
}

/// Design for the nearest-neighbor fusion estimator: one penalty block per
/// `L0` row plus one weighted block for the null-space complement.
pub fn fu_design<T: Real>(
    dataset: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    transform: &FuTransform<T>,
) -> Result<TransformedDesign<T>> {
    let p = transform.p();
    if dataset.p() != p {
        return Err(Error::shape(format!(
            "dataset has {} dimensions, transform expects {p}",
            dataset.p()
        )));
    }
    let m = dataset.basis_size();
    let design = assemble_design(dataset, basis, transform.d_inv())?;

    let r = transform.rank();
    let mut ranges = Vec::with_capacity(r + 1);
    let mut weights = Vec::with_capacity(r + 1);
    let mut roles = Vec::with_capacity(r + 1);
    for (j, &(dim, neighbor)) in transform.row_pairs().iter().enumerate() {
        ranges.push(j * m..(j + 1) * m);
        weights.push(T::one());
        roles.push(PenaltyRole::Fuse(dim, neighbor));
    }
    if p > r {
        ranges.push(r * m..p * m);
        weights.push(transform.complement_weight());
        roles.push(PenaltyRole::Complement);
    }

    Ok(TransformedDesign {
        design,
        ranges,
        weights,
        roles,
        h: transform.d().clone(),
        h_inv: transform.d_inv().clone(),
        gram_sqrt: basis.gram_sqrt().clone(),
        gram_sqrt_inv: basis.gram_sqrt_inv().clone(),
        p,
        m,
    })
}

/// Design for the group-fusion estimator: one block per non-singleton group
/// (its within-group fusion components) and one block per group mean, all
/// with unit weight. The group-size scaling lives inside the operator.
pub fn gful_design<T: Real>(
    dataset: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    transform: &GfulTransform<T>,
) -> Result<TransformedDesign<T>> {
    let p = transform.p();
    if dataset.p() != p {
        return Err(Error::shape(format!(
            "dataset has {} dimensions, transform expects {p}",
            dataset.p()
        )));
    }
    let m = dataset.basis_size();
    let design = assemble_design(dataset, basis, transform.h_inv())?;

    let k = transform.k();
    let mut ranges = Vec::with_capacity(2 * k);
    let mut weights = Vec::with_capacity(2 * k);
    let mut roles = Vec::with_capacity(2 * k);
    for (g, range) in transform.fusion_ranges().iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        ranges.push(range.start * m..range.end * m);
        weights.push(T::one());
        roles.push(PenaltyRole::FuseGroup(g));
    }
    for (g, &row) in transform.mean_rows().iter().enumerate() {
        ranges.push(row * m..(row + 1) * m);
        weights.push(T::one());
        roles.push(PenaltyRole::GroupMean(g));
    }

    Ok(TransformedDesign {
        design,
        ranges,
        weights,
        roles,
        h: transform.h().clone(),
        h_inv: transform.h_inv().clone(),
        gram_sqrt: basis.gram_sqrt().clone(),
        gram_sqrt_inv: basis.gram_sqrt_inv().clone(),
        p,
        m,
    })
}

/// Design for plain group lasso on the coefficient functions.
///
/// Without a grouping every dimension is its own unit-weight block. With a
/// grouping, dimensions are permuted into group order and each group forms
/// one block weighted by the square root of its size.
pub fn gl_design<T: Real>(
    dataset: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    grouping: Option<&ConditionGrouping>,
) -> Result<TransformedDesign<T>> {
    let p = dataset.p();
    let m = dataset.basis_size();

    let (h, ranges_dims, weights, roles) = match grouping {
        None => {
            let ranges: Vec<Range<usize>> = (0..p).map(|j| j..j + 1).collect();
            let weights = vec![T::one(); p];
            let roles = (0..p).map(|j| PenaltyRole::Vanish(vec![j])).collect();
            (DMatrix::identity(p, p), ranges, weights, roles)
        }
        Some(grouping) => {
            if grouping.p() != p {
                return Err(Error::shape(format!(
                    "grouping covers {} dimensions, dataset has {p}",
                    grouping.p()
                )));
            }
            let groups = grouping.groups();
            let perm: Vec<usize> = groups.iter().flatten().copied().collect();
            let mut s = DMatrix::zeros(p, p);
            for (u, &orig) in perm.iter().enumerate() {
                s[(u, orig)] = T::one();
            }
            let mut ranges = Vec::with_capacity(groups.len());
            let mut weights = Vec::with_capacity(groups.len());
            let mut roles = Vec::with_capacity(groups.len());
            let mut off = 0;
            for members in &groups {
                ranges.push(off..off + members.len());
                weights.push(cnt::<T>(members.len()).sqrt());
                roles.push(PenaltyRole::Vanish(members.clone()));
                off += members.len();
            }
            (s, ranges, weights, roles)
        }
    };

    let h_inv = h.transpose(); // identity or permutation: inverse = transpose
    let design = assemble_design(dataset, basis, &h_inv)?;
    let ranges = ranges_dims.into_iter().map(|r| r.start * m..r.end * m).collect();

    Ok(TransformedDesign {
        design,
        ranges,
        weights,
        roles,
        h,
        h_inv,
        gram_sqrt: basis.gram_sqrt().clone(),
        gram_sqrt_inv: basis.gram_sqrt_inv().clone(),
        p,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tests::two_cluster_layout;
    use crate::geometry::{nearest_neighbor_map, Metric};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_map() -> NeighborMap {
        nearest_neighbor_map(&two_cluster_layout(), Metric::Euclidean).unwrap()
    }

    fn toy_grouping() -> ConditionGrouping {
        // Groups {0,5,7}, {1,4}, {2,3,6}.
        ConditionGrouping::from_labels(&[0, 1, 2, 2, 1, 0, 2, 0]).unwrap()
    }

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn toy_l_and_l0_match_hand_construction() {
        let tr = build_fu_transform::<f64>(&toy_map()).unwrap();
        #[rustfmt::skip]
        let l_expected = DMatrix::from_row_slice(8, 8, &[
            -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
             0.0,-1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
             0.0, 0.0,-1.0, 1.0, 0.0, 0.0, 0.0, 0.0,
             0.0, 0.0, 0.0,-1.0, 1.0, 0.0, 0.0, 0.0,
             0.0, 0.0, 0.0, 1.0,-1.0, 0.0, 0.0, 0.0,
             1.0, 0.0, 0.0, 0.0, 0.0,-1.0, 0.0, 0.0,
             1.0, 0.0, 0.0, 0.0, 0.0, 0.0,-1.0, 0.0,
             1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,-1.0,
        ]);
        assert_eq!(tr.l(), &l_expected);

        #[rustfmt::skip]
        let l0_expected = DMatrix::from_row_slice(6, 8, &[
            -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0,
             0.0,-1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
             0.0, 0.0,-1.0, 1.0, 0.0, 0.0, 0.0, 0.0,
             0.0, 0.0, 0.0,-2.0, 2.0, 0.0, 0.0, 0.0,
             1.0, 0.0, 0.0, 0.0, 0.0,-1.0, 0.0, 0.0,
             1.0, 0.0, 0.0, 0.0, 0.0, 0.0,-1.0, 0.0,
        ]);
        assert_eq!(tr.l0(), &l0_expected);
        assert_eq!(tr.rank(), 6);
        assert_eq!(
            tr.row_pairs(),
            &[(0, 7), (1, 4), (2, 3), (3, 4), (5, 0), (6, 0)]
        );
        assert_eq!(tr.merged_rows(), &[true, false, false, true, false, false]);
    }

    #[test]
    fn null_basis_is_orthonormal_and_annihilated() {
        let tr = build_fu_transform::<f64>(&toy_map()).unwrap();
        let t = tr.t_basis();
        assert_eq!(t.shape(), (2, 8));
        assert_relative_eq!(&(t * t.transpose()), &DMatrix::identity(2, 2), epsilon = 1e-12);
        assert!((tr.l0() * t.transpose()).abs().max() <= 1e-12);
        // Orthonormal rows: Frobenius norm is sqrt of the null dimension.
        assert_relative_eq!(tr.eta(), 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(tr.complement_weight(), 1.0, epsilon = 1e-12);
        // D is genuinely invertible.
        let prod = tr.d() * tr.d_inv();
        assert_relative_eq!(&prod, &DMatrix::identity(8, 8), epsilon = 1e-10);
    }

    #[test]
    fn reduction_preserves_weighted_penalty() {
        // || L f ||_{2,1} == || L0 f ||_{2,1} for arbitrary coefficients.
        let basis = crate::basis::BasisSystem::<f64>::bspline(4, 6, (0.0, 1.0)).unwrap();
        let tr = build_fu_transform::<f64>(&toy_map()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let f = random_matrix(&mut rng, 8, 6);
            let full: f64 = basis.l2_norms(&(tr.l() * &f)).sum();
            let reduced: f64 = basis.l2_norms(&(tr.l0() * &f)).sum();
            assert_relative_eq!(full, reduced, max_relative = 1e-12);
        }
    }

    #[test]
    fn centering_factor_properties() {
        for n in 2..=7 {
            let rk = centering_factor::<f64>(n);
            assert_eq!(rk.shape(), (n - 1, n));
            let ones = DVector::from_element(n, 1.0);
            assert!((rk.clone() * ones).abs().max() <= 1e-12, "Rk 1 != 0 for n = {n}");
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            for _ in 0..10 {
                let u = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
                let mean = u.mean();
                let expect: f64 = u.iter().map(|x| (x - mean).powi(2)).sum();
                assert_relative_eq!((rk.clone() * &u).norm_squared(), expect, epsilon = 1e-12);
            }
        }
        // The 2-point case has the closed form [sqrt(1/2), -sqrt(1/2)].
        let r2 = centering_factor::<f64>(2);
        assert_relative_eq!(r2[(0, 0)], 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(r2[(0, 1)], -(0.5f64.sqrt()), epsilon = 1e-12);
    }

    #[test]
    fn toy_membership_matches_hand_construction() {
        let tr = build_gful_transform(&toy_grouping(), 0.5f64).unwrap();
        #[rustfmt::skip]
        let m_expected = DMatrix::from_row_slice(3, 8, &[
            1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0,
            0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0,
        ]);
        assert_eq!(tr.membership(), &m_expected);
        for g in 0..3 {
            assert_relative_eq!(tr.membership_norm().row(g).sum(), 1.0, epsilon = 1e-14);
        }
        assert_eq!(tr.perm(), &[0, 5, 7, 1, 4, 2, 3, 6]);
        assert_eq!(tr.group_sizes(), &[3, 2, 3]);
        assert_eq!(tr.fusion_ranges(), &[0..2, 2..3, 3..5]);
        assert_eq!(tr.mean_rows(), &[5, 6, 7]);
    }

    #[test]
    fn fusion_block_annihilates_means() {
        // R M̄' = 0 in permuted coordinates: the fusion components ignore
        // group-constant vectors.
        let tr = build_gful_transform(&toy_grouping(), 0.3f64).unwrap();
        let k = tr.k();
        let p = tr.p();
        let mut mbar_perm = DMatrix::zeros(k, p);
        let mut off = 0;
        for (g, pk) in tr.group_sizes().iter().enumerate() {
            for c in 0..*pk {
                mbar_perm[(g, off + c)] = 1.0 / *pk as f64;
            }
            off += pk;
        }
        let prod = tr.r_block() * mbar_perm.transpose();
        assert!(prod.abs().max() <= 1e-12);
    }

    #[test]
    fn gful_operator_is_invertible_across_alpha() {
        for alpha in [0.05, 0.3, 0.5, 0.7, 0.95] {
            let tr = build_gful_transform(&toy_grouping(), alpha).unwrap();
            let prod = tr.h() * tr.h_inv();
            assert_relative_eq!(&prod, &DMatrix::identity(8, 8), epsilon = 1e-9);
        }
        assert!(build_gful_transform(&toy_grouping(), 0.0).is_err());
        assert!(build_gful_transform(&toy_grouping(), 1.0).is_err());
        assert!(build_gful_transform(&toy_grouping(), -0.2).is_err());
    }

    #[test]
    fn gful_penalty_identity() {
        // The synthetic group-lasso penalty on G_α S f equals the original
        // mixture of within-group spread and mean-norm terms.
        let basis = crate::basis::BasisSystem::<f64>::bspline(4, 5, (0.0, 1.0)).unwrap();
        let grouping = toy_grouping();
        let groups = grouping.groups();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &alpha in &[0.2, 0.5, 0.8] {
            let tr = build_gful_transform(&grouping, alpha).unwrap();
            for _ in 0..10 {
                let f = random_matrix(&mut rng, 8, 5);

                // Direct form, group by group.
                let mut direct = 0.0;
                for members in &groups {
                    let pk = members.len() as f64;
                    let mut mean = DMatrix::zeros(1, 5);
                    for &i in members {
                        mean += f.row(i);
                    }
                    mean /= pk;
                    let mut spread = 0.0;
                    for &i in members {
                        let diff = f.row(i) - mean.row(0);
                        let diff = DMatrix::from_fn(1, 5, |_, c| diff[c]);
                        spread += basis.l2_norms(&diff)[0].powi(2);
                    }
                    let mean_norm = basis.l2_norms(&mean)[0];
                    direct += (1.0 - alpha) * pk.sqrt() * spread.sqrt() + alpha * mean_norm;
                }

                // Synthetic form: blockwise norms of G_α S f.
                let transformed = tr.h() * &f;
                let row_norms = basis.l2_norms(&transformed);
                let mut synthetic = 0.0;
                for range in tr.fusion_ranges() {
                    let sq: f64 = range.clone().map(|i| row_norms[i].powi(2)).sum();
                    synthetic += sq.sqrt();
                }
                for &row in tr.mean_rows() {
                    synthetic += row_norms[row];
                }

                assert_relative_eq!(direct, synthetic, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn kron_lift_vec_identity() {
        // (Z ⊗ I_M) vec(B') == vec((Z B)') with rows stacked.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 6, 3);
        let lifted = kron_lift(&z, 3);
        assert_eq!(lifted.shape(), (12, 18));
        let lhs = &lifted * flatten_rows(&b);
        let rhs = flatten_rows(&(&z * &b));
        assert_relative_eq!(&lhs, &rhs, epsilon = 1e-13);
    }

    fn toy_dataset(p: usize, m: usize, n: usize, seed: u64) -> FunctionalDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..n).map(|_| random_matrix(&mut rng, p, m)).collect();
        let responses = DVector::from_fn(n, |_, _| rng.gen::<f64>());
        FunctionalDataset::new(coeffs, responses).unwrap()
    }

    #[test]
    fn designs_preserve_predictions_and_roundtrip() {
        let basis = crate::basis::BasisSystem::<f64>::bspline(4, 5, (0.0, 1.0)).unwrap();
        let ds = toy_dataset(8, 5, 7, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let beta = random_matrix(&mut rng, 8, 5);

        let fu = build_fu_transform::<f64>(&toy_map()).unwrap();
        let gful = build_gful_transform(&toy_grouping(), 0.4f64).unwrap();
        let designs = [
            fu_design(&ds, &basis, &fu).unwrap(),
            gful_design(&ds, &basis, &gful).unwrap(),
            gl_design(&ds, &basis, None).unwrap(),
            gl_design(&ds, &basis, Some(&toy_grouping())).unwrap(),
        ];
        for td in &designs {
            let gamma = td.gamma_from_beta(&beta);
            // Predictions agree with the L2 inner products.
            for (i, a) in ds.coeffs().iter().enumerate() {
                let from_design: f64 = td.design.row(i).transpose().dot(&gamma);
                let direct = basis.l2_inner(a, &beta);
                assert_relative_eq!(from_design, direct, max_relative = 1e-10);
            }
            // Back-map inverts the forward map.
            let recovered = td.beta_from_gamma(&gamma);
            assert_relative_eq!(&recovered, &beta, epsilon = 1e-10);
            // Penalty blocks tile the coefficient vector without overlap.
            let q = td.design.ncols();
            let mut covered = vec![false; q];
            for r in &td.ranges {
                for i in r.clone() {
                    assert!(!covered[i]);
                    covered[i] = true;
                }
            }
            assert!(covered.iter().all(|&c| c));
            assert_eq!(td.ranges.len(), td.weights.len());
            assert_eq!(td.ranges.len(), td.roles.len());
        }
    }

    #[test]
    fn fu_design_group_layout() {
        let basis = crate::basis::BasisSystem::<f64>::bspline(4, 5, (0.0, 1.0)).unwrap();
        let ds = toy_dataset(8, 5, 4, 31);
        let fu = build_fu_transform::<f64>(&toy_map()).unwrap();
        let td = fu_design(&ds, &basis, &fu).unwrap();
        // Six unit-weight fusion blocks of size M, then the complement block
        // of size (p - r) M.
        assert_eq!(td.ranges.len(), 7);
        for j in 0..6 {
            assert_eq!(td.ranges[j], j * 5..(j + 1) * 5);
            assert_eq!(td.weights[j], 1.0);
        }
        assert_eq!(td.ranges[6], 30..40);
        assert_relative_eq!(td.weights[6], 1.0, epsilon = 1e-12);
        assert_eq!(td.roles[6], PenaltyRole::Complement);
    }

    #[test]
    fn gful_design_group_layout_with_singleton() {
        let basis = crate::basis::BasisSystem::<f64>::bspline(4, 5, (0.0, 1.0)).unwrap();
        let ds = toy_dataset(4, 5, 4, 32);
        // Groups {0, 2}, {1}, {3}: one fusion block, three mean blocks.
        let grouping = ConditionGrouping::from_labels(&[0, 1, 0, 2]).unwrap();
        let tr = build_gful_transform(&grouping, 0.5f64).unwrap();
        let td = gful_design(&ds, &basis, &tr).unwrap();
        assert_eq!(td.ranges.len(), 4);
        assert_eq!(td.roles[0], PenaltyRole::FuseGroup(0));
        assert_eq!(td.ranges[0], 0..5);
        assert_eq!(td.roles[1], PenaltyRole::GroupMean(0));
        assert_eq!(td.roles[2], PenaltyRole::GroupMean(1));
        assert_eq!(td.roles[3], PenaltyRole::GroupMean(2));
        assert!(td.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn gl2_weights_scale_with_group_size() {
        let basis = crate::basis::BasisSystem::<f64>::bspline(4, 5, (0.0, 1.0)).unwrap();
        let ds = toy_dataset(8, 5, 4, 33);
        let td = gl_design(&ds, &basis, Some(&toy_grouping())).unwrap();
        assert_eq!(td.ranges.len(), 3);
        assert_relative_eq!(td.weights[0], 3f64.sqrt());
        assert_relative_eq!(td.weights[1], 2f64.sqrt());
        assert_relative_eq!(td.weights[2], 3f64.sqrt());
        assert_eq!(td.roles[0], PenaltyRole::Vanish(vec![0, 5, 7]));
    }
}
