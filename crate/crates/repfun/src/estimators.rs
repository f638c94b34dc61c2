//! Model fitting on top of the fusion designs: the FU and GFUL estimators,
//! the GL1/GL2 group-lasso baselines, the HG and MFPCR principal-component
//! baselines, equality extraction, cross-validation, and the response
//! re-coding used for binary classification.
//!
//! Every fit expects a centered dataset (see [`FunctionalDataset::center`])
//! and reconstructs the intercept from the stored means, so prediction always
//! happens on raw data.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisSystem;
use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::fusion::{
    build_fu_transform, build_gful_transform, fu_design, gful_design, gl_design, unflatten_rows,
    PenaltyRole, TransformedDesign,
};
use crate::geometry::{ConditionGrouping, NeighborMap};
use crate::real::{cnt, cst, Real};
use crate::solver::{lambda_grid, GroupLassoProblem, SolverOptions, SolverReport};

/// Norm threshold below which a fitted coefficient function is treated as the
/// zero function when extracting equality structure.
const ZERO_NORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Fu,
    Gful,
    Gl1,
    Gl2,
    Hg,
    Mfpcr,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fu => "FU",
            Method::Gful => "GFUL",
            Method::Gl1 => "GL1",
            Method::Gl2 => "GL2",
            Method::Hg => "HG",
            Method::Mfpcr => "MFPCR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fu" => Ok(Method::Fu),
            "gful" => Ok(Method::Gful),
            "gl1" => Ok(Method::Gl1),
            "gl2" => Ok(Method::Gl2),
            "hg" => Ok(Method::Hg),
            "mfpcr" => Ok(Method::Mfpcr),
            other => Err(Error::param(format!("unknown method '{other}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Binary response coding

/// Zero-mean two-class coding for fitting a classifier with the squared-error
/// machinery, plus the decision threshold on fitted scores.
#[derive(Debug, Clone)]
pub struct BinaryCoding<T: Real> {
    /// Code assigned to `true` labels: n / n_true.
    pub positive: T,
    /// Code assigned to `false` labels: -n / n_false.
    pub negative: T,
    /// Scores at or above this are classified `true`. Zero until calibrated.
    pub threshold: T,
}

impl<T: Real> BinaryCoding<T> {
    pub fn classify(&self, score: T) -> bool {
        score >= self.threshold
    }

    /// Sets the threshold to the midpoint of the two classes' mean scores.
    pub fn calibrate(&mut self, scores: &DVector<T>, labels: &[bool]) -> Result<()> {
        self.threshold = midpoint(scores, labels)
            .ok_or_else(|| Error::param("calibration needs both classes present"))?;
        Ok(())
    }
}

/// Re-codes binary labels so the response has mean zero: `true` becomes
/// n/n_true and `false` becomes -n/n_false. Both classes must be present.
pub fn recode_binary<T: Real>(labels: &[bool]) -> Result<(DVector<T>, BinaryCoding<T>)> {
    let n = labels.len();
    let n_true = labels.iter().filter(|&&l| l).count();
    let n_false = n - n_true;
    if n_true == 0 || n_false == 0 {
        return Err(Error::param("binary coding needs both classes present"));
    }
    let positive = cnt::<T>(n) / cnt::<T>(n_true);
    let negative = -cnt::<T>(n) / cnt::<T>(n_false);
    let coded = DVector::from_iterator(
        n,
        labels.iter().map(|&l| if l { positive } else { negative }),
    );
    let coding = BinaryCoding { positive, negative, threshold: T::zero() };
    Ok((coded, coding))
}

fn midpoint<T: Real>(scores: &DVector<T>, labels: &[bool]) -> Option<T> {
    let mut sum_t = T::zero();
    let mut sum_f = T::zero();
    let mut n_t = 0usize;
    let mut n_f = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l {
            sum_t += scores[i];
            n_t += 1;
        } else {
            sum_f += scores[i];
            n_f += 1;
        }
    }
    if n_t == 0 || n_f == 0 {
        return None;
    }
    Some((sum_t / cnt::<T>(n_t) + sum_f / cnt::<T>(n_f)) * cst::<T>(0.5))
}

/// Threshold for a training fold: midpoint when both classes are present,
/// otherwise a cut that sends everything to the only class seen.
fn fold_threshold<T: Real>(scores: &DVector<T>, labels: &[bool]) -> T {
    if let Some(t) = midpoint(scores, labels) {
        return t;
    }
    let lo = scores.iter().cloned().fold(T::zero(), |a, b| a.min(b));
    let hi = scores.iter().cloned().fold(T::zero(), |a, b| a.max(b));
    if labels.iter().all(|&l| l) {
        lo - T::one()
    } else {
        hi + T::one()
    }
}

// ---------------------------------------------------------------------------
// Equality structure

/// Which coefficient functions an estimator declares identical, and which it
/// declares zero. Declarations come from exactly-zero penalty blocks (plus a
/// small-norm backstop) and are closed into an equivalence relation.
#[derive(Debug, Clone)]
pub struct EqualityStructure {
    p: usize,
    /// Equivalence-class representative (smallest member) per dimension.
    class_of: Vec<usize>,
    /// All undirected pairs (j, k), j < k, declared equal.
    pub fused_pairs: Vec<(usize, usize)>,
    /// Input groups whose members all landed in one class (when a grouping
    /// was supplied).
    pub fused_groups: Vec<usize>,
    /// Dimensions whose coefficient function is declared zero.
    pub zero_dims: Vec<usize>,
    /// The zero penalty blocks that generated declarations.
    pub derivation: Vec<(usize, PenaltyRole)>,
}

impl EqualityStructure {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn declares(&self, j: usize, k: usize) -> bool {
        self.class_of[j] == self.class_of[k]
    }

    /// Equivalence classes in ascending order of their smallest member.
    pub fn classes(&self) -> Vec<Vec<usize>> {
        let mut classes: Vec<Vec<usize>> = Vec::new();
        let mut idx = vec![usize::MAX; self.p];
        for j in 0..self.p {
            let root = self.class_of[j];
            if idx[root] == usize::MAX {
                idx[root] = classes.len();
                classes.push(Vec::new());
            }
            classes[idx[root]].push(j);
        }
        classes
    }

    /// Rewrites `beta` so the declared structure holds bitwise: rows of a
    /// fused class share the class mean row, zero dimensions become exact
    /// zero rows.
    pub fn enforce<T: Real>(&self, beta: &mut DMatrix<T>) {
        assert_eq!(beta.nrows(), self.p, "coefficient rows must match dimensions");
        let mut is_zero = vec![false; self.p];
        for &d in &self.zero_dims {
            is_zero[d] = true;
            beta.row_mut(d).fill(T::zero());
        }
        for class in self.classes() {
            if class.len() < 2 || is_zero[class[0]] {
                continue;
            }
            let mut mean = RowDVector::<T>::zeros(beta.ncols());
            for &d in &class {
                mean += beta.row(d);
            }
            mean /= cnt::<T>(class.len());
            for &d in &class {
                beta.row_mut(d).copy_from(&mean);
            }
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so representatives are stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Shared tail of equality extraction: applies the small-norm zero backstop,
/// merges all zero dimensions into one class, propagates zeroness through
/// fused classes, and materializes pairs/groups.
fn finish_equality<T: Real>(
    basis: &BasisSystem<T>,
    beta: &DMatrix<T>,
    mut uf: UnionFind,
    mut is_zero: Vec<bool>,
    derivation: Vec<(usize, PenaltyRole)>,
    grouping: Option<&ConditionGrouping>,
) -> EqualityStructure {
    let p = beta.nrows();
    let norms = basis.l2_norms(beta);
    for j in 0..p {
        if norms[j] <= cst::<T>(ZERO_NORM_TOL) {
            is_zero[j] = true;
        }
    }
    let zeros: Vec<usize> = (0..p).filter(|&j| is_zero[j]).collect();
    for w in zeros.windows(2) {
        uf.union(w[0], w[1]);
    }
    // A dimension fused with a zero dimension is itself zero.
    if let Some(&z0) = zeros.first() {
        let zero_root = uf.find(z0);
        for j in 0..p {
            if uf.find(j) == zero_root {
                is_zero[j] = true;
            }
        }
    }
    let class_of: Vec<usize> = (0..p).map(|j| uf.find(j)).collect();
    let mut fused_pairs = Vec::new();
    for j in 0..p {
        for k in (j + 1)..p {
            if class_of[j] == class_of[k] {
                fused_pairs.push((j, k));
            }
        }
    }
    let fused_groups = grouping
        .map(|g| {
            g.groups()
                .iter()
                .enumerate()
                .filter(|(_, members)| {
                    members.iter().all(|&j| class_of[j] == class_of[members[0]])
                })
                .map(|(k, _)| k)
                .collect()
        })
        .unwrap_or_default();
    EqualityStructure {
        p,
        class_of,
        fused_pairs,
        fused_groups,
        zero_dims: (0..p).filter(|&j| is_zero[j]).collect(),
        derivation,
    }
}

/// Equality declared by a solved penalized fit: reads the roles of the
/// exactly-zero penalty blocks.
fn equality_from_solution<T: Real>(
    basis: &BasisSystem<T>,
    beta: &DMatrix<T>,
    roles: &[PenaltyRole],
    zero_blocks: &[usize],
    grouping: Option<&ConditionGrouping>,
) -> EqualityStructure {
    let p = beta.nrows();
    let mut uf = UnionFind::new(p);
    let mut is_zero = vec![false; p];
    let mut derivation = Vec::new();
    let zero_set: Vec<bool> = {
        let mut v = vec![false; roles.len()];
        for &k in zero_blocks {
            v[k] = true;
        }
        v
    };
    // Index of the fusion block per group, for the joint fuse+mean rule.
    let mut fuse_block = vec![usize::MAX; roles.len()];
    for (i, role) in roles.iter().enumerate() {
        if let PenaltyRole::FuseGroup(g) = role {
            fuse_block[*g] = i;
        }
    }
    let groups = grouping.map(|g| g.groups());
    for &k in zero_blocks {
        match &roles[k] {
            PenaltyRole::Fuse(a, b) => {
                uf.union(*a, *b);
                derivation.push((k, roles[k].clone()));
            }
            PenaltyRole::FuseGroup(g) => {
                let members = &groups.as_ref().expect("grouping required for group roles")[*g];
                for w in members.windows(2) {
                    uf.union(w[0], w[1]);
                }
                derivation.push((k, roles[k].clone()));
            }
            PenaltyRole::GroupMean(g) => {
                // The mean alone says nothing; together with a zero fusion
                // block (or for a singleton group) the whole group vanishes.
                let members = &groups.as_ref().expect("grouping required for group roles")[*g];
                let fully_zero =
                    members.len() == 1 || (fuse_block[*g] != usize::MAX && zero_set[fuse_block[*g]]);
                if fully_zero {
                    for &j in members {
                        is_zero[j] = true;
                    }
                    derivation.push((k, roles[k].clone()));
                }
            }
            PenaltyRole::Vanish(dims) => {
                for &j in dims {
                    is_zero[j] = true;
                }
                derivation.push((k, roles[k].clone()));
            }
            PenaltyRole::Complement => {}
        }
    }
    finish_equality(basis, beta, uf, is_zero, derivation, grouping)
}

/// Equality imposed by construction: every within-group pair (used by HG).
fn equality_for_groups<T: Real>(
    basis: &BasisSystem<T>,
    beta: &DMatrix<T>,
    grouping: &ConditionGrouping,
) -> EqualityStructure {
    let mut uf = UnionFind::new(beta.nrows());
    for members in grouping.groups() {
        for w in members.windows(2) {
            uf.union(w[0], w[1]);
        }
    }
    finish_equality(basis, beta, uf, vec![false; beta.nrows()], Vec::new(), Some(grouping))
}

// ---------------------------------------------------------------------------
// Fit results

/// One fitted model: coefficients on the raw data scale, the declared
/// equality structure, and everything needed to predict.
#[derive(Debug, Clone)]
pub struct FitResult<T: Real> {
    pub method: Method,
    pub lambda: Option<T>,
    pub alpha: Option<T>,
    pub n_components: Option<usize>,
    pub intercept: T,
    /// Coefficient matrix, one basis-coordinate row per dimension.
    pub beta: DMatrix<T>,
    /// Transformed coefficients as solved (penalized fits) or the PCR
    /// coefficient vector.
    pub gamma: DVector<T>,
    pub equality: EqualityStructure,
    pub solver: Option<SolverReport<T>>,
    pub cv_table: Option<Vec<CvRow<T>>>,
    /// Present after classification calibration.
    pub coding: Option<BinaryCoding<T>>,
}

impl<T: Real> FitResult<T> {
    /// Predicted responses on raw (uncentered) data.
    pub fn predict(&self, data: &FunctionalDataset<T>, basis: &BasisSystem<T>) -> Result<DVector<T>> {
        if data.is_centered() {
            return Err(Error::param("predict expects raw data; centered data was passed"));
        }
        if data.p() != self.beta.nrows() || data.basis_size() != self.beta.ncols() {
            return Err(Error::shape(format!(
                "fit is {}x{} but data is {}x{}",
                self.beta.nrows(),
                self.beta.ncols(),
                data.p(),
                data.basis_size()
            )));
        }
        if basis.size() != self.beta.ncols() {
            return Err(Error::param("basis size does not match the fitted coefficients"));
        }
        let weighted = &self.beta * basis.gram();
        Ok(DVector::from_iterator(
            data.n(),
            data.coeffs().iter().map(|a| self.intercept + a.dot(&weighted)),
        ))
    }

    /// Predicted class labels; requires a calibrated coding.
    pub fn predict_classes(
        &self,
        data: &FunctionalDataset<T>,
        basis: &BasisSystem<T>,
    ) -> Result<Vec<bool>> {
        let coding = self
            .coding
            .as_ref()
            .ok_or_else(|| Error::param("fit has no classification coding; calibrate first"))?;
        let scores = self.predict(data, basis)?;
        Ok(scores.iter().map(|&s| s >= coding.threshold).collect())
    }
}

/// Fits `fit`'s decision threshold from raw training data and labels.
pub fn calibrate_classifier<T: Real>(
    fit: &mut FitResult<T>,
    train: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    labels: &[bool],
) -> Result<()> {
    if labels.len() != train.n() {
        return Err(Error::shape(format!(
            "{} labels for {} subjects",
            labels.len(),
            train.n()
        )));
    }
    let scores = fit.predict(train, basis)?;
    let (_, mut coding) = recode_binary::<T>(labels)?;
    coding.calibrate(&scores, labels)?;
    fit.coding = Some(coding);
    Ok(())
}

// ---------------------------------------------------------------------------
// Penalized fits

fn require_centering<T: Real>(data: &FunctionalDataset<T>) -> Result<&crate::dataset::Centering<T>> {
    data.centering()
        .ok_or_else(|| Error::param("fit requires a centered dataset; call center() first"))
}

fn intercept_for<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    beta: &DMatrix<T>,
) -> Result<T> {
    let centering = require_centering(data)?;
    Ok(centering.y_mean - basis.l2_inner(&centering.coeff_mean, beta))
}

fn finish_penalized<T: Real>(
    method: Method,
    lambda: T,
    alpha: Option<T>,
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    design: &TransformedDesign<T>,
    report: SolverReport<T>,
    grouping: Option<&ConditionGrouping>,
) -> Result<FitResult<T>> {
    let mut beta = design.beta_from_gamma(&report.gamma);
    let equality =
        equality_from_solution(basis, &beta, &design.roles, &report.zero_ranges, grouping);
    equality.enforce(&mut beta);
    let intercept = intercept_for(data, basis, &beta)?;
    Ok(FitResult {
        method,
        lambda: Some(lambda),
        alpha,
        n_components: None,
        intercept,
        beta,
        gamma: report.gamma.clone(),
        equality,
        solver: Some(report),
        cv_table: None,
        coding: None,
    })
}

fn solve_design<T: Real>(
    design: &TransformedDesign<T>,
    responses: &DVector<T>,
    lambda: T,
    opts: &SolverOptions<T>,
) -> Result<SolverReport<T>> {
    let problem =
        GroupLassoProblem::new(&design.design, responses, &design.ranges, &design.weights)?;
    problem.solve(lambda, None, opts)
}

/// Nearest-neighbor variable fusion estimator.
pub fn fit_fu<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    map: &NeighborMap,
    lambda: T,
    opts: &SolverOptions<T>,
) -> Result<FitResult<T>> {
    require_centering(data)?;
    let transform = build_fu_transform::<T>(map)?;
    let design = fu_design(data, basis, &transform)?;
    let report = solve_design(&design, data.responses(), lambda, opts)?;
    finish_penalized(Method::Fu, lambda, None, data, basis, &design, report, None)
}

/// Group fusion lasso estimator. `alpha` in (0,1) mixes within-group fusion
/// against group-mean shrinkage; `alpha = 1` is pure group shrinkage and
/// dispatches to the GL2 design.
pub fn fit_gful<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    grouping: &ConditionGrouping,
    alpha: T,
    lambda: T,
    opts: &SolverOptions<T>,
) -> Result<FitResult<T>> {
    require_centering(data)?;
    if !(alpha > T::zero()) || !(alpha <= T::one()) {
        return Err(Error::param("alpha must lie in (0, 1]"));
    }
    let design = if alpha == T::one() {
        gl_design(data, basis, Some(grouping))?
    } else {
        let transform = build_gful_transform::<T>(grouping, alpha)?;
        gful_design(data, basis, &transform)?
    };
    let report = solve_design(&design, data.responses(), lambda, opts)?;
    finish_penalized(
        Method::Gful,
        lambda,
        Some(alpha),
        data,
        basis,
        &design,
        report,
        Some(grouping),
    )
}

/// Group lasso with every dimension its own group.
pub fn fit_gl1<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    lambda: T,
    opts: &SolverOptions<T>,
) -> Result<FitResult<T>> {
    require_centering(data)?;
    let design = gl_design(data, basis, None)?;
    let report = solve_design(&design, data.responses(), lambda, opts)?;
    finish_penalized(Method::Gl1, lambda, None, data, basis, &design, report, None)
}

/// Group lasso over the provided condition groups.
pub fn fit_gl2<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    grouping: &ConditionGrouping,
    lambda: T,
    opts: &SolverOptions<T>,
) -> Result<FitResult<T>> {
    require_centering(data)?;
    let design = gl_design(data, basis, Some(grouping))?;
    let report = solve_design(&design, data.responses(), lambda, opts)?;
    finish_penalized(
        Method::Gl2,
        lambda,
        None,
        data,
        basis,
        &design,
        report,
        Some(grouping),
    )
}

// ---------------------------------------------------------------------------
// Principal-component fits (HG and MFPCR)

/// Equidistant integer grid from 1 to `upper` with at most `size` points.
pub fn pcr_component_grid(upper: usize, size: usize) -> Vec<usize> {
    assert!(upper >= 1 && size >= 1);
    if upper <= size {
        return (1..=upper).collect();
    }
    let mut grid: Vec<usize> = (0..size)
        .map(|i| 1 + (i * (upper - 1) + (size - 1) / 2) / (size - 1))
        .collect();
    grid.dedup();
    grid
}

/// Eigendecomposition of the n x n Gram of a design, giving left singular
/// vectors and singular values without touching the (possibly much larger)
/// coefficient dimension.
struct PcrParts<T: Real> {
    u: DMatrix<T>,
    sigma: Vec<T>,
}

impl<T: Real> PcrParts<T> {
    fn rank(&self) -> usize {
        self.sigma.len()
    }
}

fn pcr_decompose<T: Real>(design: &DMatrix<T>) -> PcrParts<T> {
    let n = design.nrows();
    let gram = design * design.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let max = eig.eigenvalues[order[0]].max(T::zero());
    let tol = max * cst::<T>(1e-10);
    let rank = order.iter().take_while(|&&i| eig.eigenvalues[i] > tol).count();
    let u = DMatrix::from_fn(n, rank, |r, c| eig.eigenvectors[(r, order[c])]);
    let sigma = order[..rank].iter().map(|&i| eig.eigenvalues[i].sqrt()).collect();
    PcrParts { u, sigma }
}

/// PCR coefficient vector using the leading `k` components.
fn pcr_coefficients<T: Real>(
    design: &DMatrix<T>,
    responses: &DVector<T>,
    parts: &PcrParts<T>,
    k: usize,
) -> DVector<T> {
    // gamma = X' sum_j (theta_j / sigma_j) u_j with theta_j = u_j'y / sigma_j.
    let mut acc = DVector::zeros(design.nrows());
    for j in 0..k {
        let col = parts.u.column(j);
        let theta = col.dot(responses) / parts.sigma[j];
        acc.axpy(theta / parts.sigma[j], &col, T::one());
    }
    design.transpose() * acc
}

fn group_mean_design<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    grouping: &ConditionGrouping,
) -> Result<(DMatrix<T>, Vec<Vec<usize>>)> {
    if grouping.p() != data.p() {
        return Err(Error::shape(format!(
            "grouping covers {} dimensions, dataset has {}",
            grouping.p(),
            data.p()
        )));
    }
    let groups = grouping.groups();
    let k = groups.len();
    let m = data.basis_size();
    let mut mbar = DMatrix::<T>::zeros(k, data.p());
    for (g, members) in groups.iter().enumerate() {
        let w = T::one() / cnt::<T>(members.len());
        for &j in members {
            mbar[(g, j)] = w;
        }
    }
    let mut design = DMatrix::zeros(data.n(), k * m);
    for (i, coeff) in data.coeffs().iter().enumerate() {
        let rowwise = &mbar * coeff * basis.gram_sqrt();
        for r in 0..k {
            for c in 0..m {
                design[(i, r * m + c)] = rowwise[(r, c)];
            }
        }
    }
    Ok((design, groups))
}

fn validate_components<T: Real>(
    data: &FunctionalDataset<T>,
    q: usize,
    n_components: usize,
    parts: &PcrParts<T>,
) -> Result<()> {
    let cap = (data.n().saturating_sub(1)).min(q);
    if n_components == 0 || n_components > cap {
        return Err(Error::param(format!(
            "n_components must lie in 1..={cap}, got {n_components}"
        )));
    }
    if n_components > parts.rank() {
        return Err(Error::param(format!(
            "n_components {n_components} exceeds the design's numerical rank {}",
            parts.rank()
        )));
    }
    Ok(())
}

/// Pooled-group baseline: one coefficient function per group fitted by
/// principal-component regression on the group-mean curves; every dimension
/// in a group inherits the group coefficient scaled by 1/p_k.
pub fn fit_hg<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    grouping: &ConditionGrouping,
    n_components: usize,
) -> Result<FitResult<T>> {
    require_centering(data)?;
    let (design, groups) = group_mean_design(data, basis, grouping)?;
    let parts = pcr_decompose(&design);
    validate_components(data, design.ncols(), n_components, &parts)?;
    let gamma = pcr_coefficients(&design, data.responses(), &parts, n_components);
    let m = data.basis_size();
    let gmat = unflatten_rows(&gamma, groups.len(), m) * basis.gram_sqrt_inv();
    let mut beta = DMatrix::zeros(data.p(), m);
    for (g, members) in groups.iter().enumerate() {
        let row = gmat.row(g) / cnt::<T>(members.len());
        for &j in members {
            beta.row_mut(j).copy_from(&row);
        }
    }
    let equality = equality_for_groups(basis, &beta, grouping);
    equality.enforce(&mut beta);
    let intercept = intercept_for(data, basis, &beta)?;
    Ok(FitResult {
        method: Method::Hg,
        lambda: None,
        alpha: None,
        n_components: Some(n_components),
        intercept,
        beta,
        gamma,
        equality,
        solver: None,
        cv_table: None,
        coding: None,
    })
}

/// Principal-component regression on the full stacked coefficient design.
/// Declares no equality structure beyond the zero backstop.
pub fn fit_mfpcr<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    n_components: usize,
) -> Result<FitResult<T>> {
    require_centering(data)?;
    let design = gl_design(data, basis, None)?;
    let parts = pcr_decompose(&design.design);
    validate_components(data, design.design.ncols(), n_components, &parts)?;
    let gamma = pcr_coefficients(&design.design, data.responses(), &parts, n_components);
    let mut beta = design.beta_from_gamma(&gamma);
    let equality =
        finish_equality(basis, &beta, UnionFind::new(data.p()), vec![false; data.p()], Vec::new(), None);
    equality.enforce(&mut beta);
    let intercept = intercept_for(data, basis, &beta)?;
    Ok(FitResult {
        method: Method::Mfpcr,
        lambda: None,
        alpha: None,
        n_components: Some(n_components),
        intercept,
        beta,
        gamma,
        equality,
        solver: None,
        cv_table: None,
        coding: None,
    })
}

// ---------------------------------------------------------------------------
// Cross-validation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvTask {
    Regress,
    Classify,
}

/// Cross-validation policy. The CV solves use a relaxed budget; the final
/// refit at the selected hyperparameters uses the full-precision options.
#[derive(Debug, Clone)]
pub struct CvConfig<T: Real> {
    pub folds: usize,
    pub seed: u64,
    pub lambda_grid_size: usize,
    /// Mixing grid for the group fusion lasso; ignored by other methods.
    pub alphas: Vec<T>,
    pub component_grid_size: usize,
    pub task: CvTask,
    pub cv_solver: SolverOptions<T>,
    pub refit_solver: SolverOptions<T>,
}

impl<T: Real> Default for CvConfig<T> {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            seed: 0,
            lambda_grid_size: 150,
            alphas: (1..=10).map(|i| cst::<T>(i as f64 / 10.0)).collect(),
            component_grid_size: 150,
            task: CvTask::Regress,
            cv_solver: SolverOptions { tol: cst(1e-6), max_iter: 500 },
            refit_solver: SolverOptions::default(),
        }
    }
}

/// Which estimator cross-validation should tune.
pub enum ModelConfig<'a> {
    Fu { map: &'a NeighborMap },
    Gful { grouping: &'a ConditionGrouping },
    Gl1,
    Gl2 { grouping: &'a ConditionGrouping },
    Hg { grouping: &'a ConditionGrouping },
    Mfpcr,
}

impl ModelConfig<'_> {
    pub fn method(&self) -> Method {
        match self {
            ModelConfig::Fu { .. } => Method::Fu,
            ModelConfig::Gful { .. } => Method::Gful,
            ModelConfig::Gl1 => Method::Gl1,
            ModelConfig::Gl2 { .. } => Method::Gl2,
            ModelConfig::Hg { .. } => Method::Hg,
            ModelConfig::Mfpcr => Method::Mfpcr,
        }
    }
}

/// One grid point of a CV table.
#[derive(Debug, Clone)]
pub struct CvRow<T: Real> {
    pub lambda: Option<T>,
    pub alpha: Option<T>,
    pub n_components: Option<usize>,
    /// Mean squared prediction error, or misclassification rate.
    pub score: T,
}

/// Deterministic fold labels: a seeded shuffle dealt round-robin.
fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn take_rows<T: Real>(v: &DVector<T>, rows: &[usize]) -> DVector<T> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

fn extract_labels<T: Real>(responses: &DVector<T>) -> Result<Vec<bool>> {
    responses
        .iter()
        .map(|&y| {
            if y == T::zero() {
                Ok(false)
            } else if y == T::one() {
                Ok(true)
            } else {
                Err(Error::param("classification responses must be exactly 0 or 1"))
            }
        })
        .collect()
}

/// 10-fold-style cross-validation over the method's hyperparameter grid,
/// then a full-precision refit on the whole training set at the winner.
///
/// Takes raw (uncentered) data: centering happens once on the full training
/// set, and the penalty scale is computed per (method, alpha) on the full
/// data. Ties prefer the larger lambda, then the larger alpha (or the
/// smaller component count).
pub fn cross_validate<T: Real>(
    data: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    model: &ModelConfig<'_>,
    cfg: &CvConfig<T>,
) -> Result<FitResult<T>> {
    if data.is_centered() {
        return Err(Error::param("cross_validate expects raw data; it centers internally"));
    }
    if cfg.folds < 2 {
        return Err(Error::param("cross-validation needs at least 2 folds"));
    }
    if data.n() < cfg.folds {
        return Err(Error::param(format!(
            "{} subjects cannot fill {} folds",
            data.n(),
            cfg.folds
        )));
    }
    let labels = match cfg.task {
        CvTask::Regress => None,
        CvTask::Classify => Some(extract_labels(data.responses())?),
    };
    let work = match &labels {
        None => data.clone(),
        Some(labels) => {
            let (coded, _) = recode_binary::<T>(labels)?;
            FunctionalDataset::new(data.coeffs().to_vec(), coded)?
        }
    };
    let centered = work.center();
    let fold_of = fold_assignment(data.n(), cfg.folds, cfg.seed);

    let mut fit = match model {
        ModelConfig::Hg { .. } | ModelConfig::Mfpcr => {
            cv_pcr(&centered, basis, model, cfg, &fold_of, labels.as_deref())?
        }
        _ => cv_penalized(&centered, basis, model, cfg, &fold_of, labels.as_deref())?,
    };

    if let Some(labels) = &labels {
        calibrate_classifier(&mut fit, data, basis, labels)?;
    }
    Ok(fit)
}

/// Candidate ordering: lower score, then larger lambda, then larger alpha.
fn improves<T: Real>(
    cand: (T, T, Option<T>),
    best: &Option<(T, T, Option<T>)>,
) -> bool {
    match best {
        None => true,
        Some((score, lambda, alpha)) => {
            if cand.0 != *score {
                return cand.0 < *score;
            }
            if cand.1 != *lambda {
                return cand.1 > *lambda;
            }
            match (cand.2, alpha) {
                (Some(a), Some(b)) => a > *b,
                _ => false,
            }
        }
    }
}

fn build_penalized_design<T: Real>(
    centered: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    model: &ModelConfig<'_>,
    alpha: Option<T>,
) -> Result<TransformedDesign<T>> {
    match model {
        ModelConfig::Fu { map } => fu_design(centered, basis, &build_fu_transform::<T>(map)?),
        ModelConfig::Gful { grouping } => {
            let a = alpha.expect("GFUL design needs alpha");
            if a == T::one() {
                gl_design(centered, basis, Some(grouping))
            } else {
                gful_design(centered, basis, &build_gful_transform::<T>(grouping, a)?)
            }
        }
        ModelConfig::Gl1 => gl_design(centered, basis, None),
        ModelConfig::Gl2 { grouping } => gl_design(centered, basis, Some(grouping)),
        _ => Err(Error::param("not a penalized model")),
    }
}

fn cv_penalized<T: Real>(
    centered: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    model: &ModelConfig<'_>,
    cfg: &CvConfig<T>,
    fold_of: &[usize],
    labels: Option<&[bool]>,
) -> Result<FitResult<T>> {
    let alpha_options: Vec<Option<T>> = match model {
        ModelConfig::Gful { .. } => {
            if cfg.alphas.is_empty() {
                return Err(Error::param("GFUL cross-validation needs a nonempty alpha grid"));
            }
            for &a in &cfg.alphas {
                if !(a > T::zero()) || !(a <= T::one()) {
                    return Err(Error::param("alpha grid values must lie in (0, 1]"));
                }
            }
            cfg.alphas.iter().map(|&a| Some(a)).collect()
        }
        _ => vec![None],
    };
    if cfg.lambda_grid_size < 1 {
        return Err(Error::param("lambda grid must have at least one point"));
    }

    let n = centered.n();
    let y = centered.responses();
    let mut table: Vec<CvRow<T>> = Vec::new();
    let mut best: Option<(T, T, Option<T>)> = None;

    for &alpha in &alpha_options {
        let design = build_penalized_design(centered, basis, model, alpha)?;
        let full = GroupLassoProblem::new(&design.design, y, &design.ranges, &design.weights)?;
        let grid = lambda_grid(full.lambda_max(), cfg.lambda_grid_size);
        let mut err = vec![T::zero(); grid.len()];

        for f in 0..cfg.folds {
            let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let z_tr = design.design.select_rows(train_rows.iter());
            let z_te = design.design.select_rows(test_rows.iter());
            let y_tr = take_rows(y, &train_rows);
            let y_te = take_rows(y, &test_rows);
            let sub = GroupLassoProblem::new(&z_tr, &y_tr, &design.ranges, &design.weights)?;
            let reports = sub.screened_path(&grid, &cfg.cv_solver)?;
            match labels {
                None => {
                    for (g, report) in reports.iter().enumerate() {
                        let pred = &z_te * &report.gamma;
                        err[g] += (pred - &y_te).norm_squared();
                    }
                }
                Some(labels) => {
                    let lab_tr: Vec<bool> = train_rows.iter().map(|&i| labels[i]).collect();
                    let lab_te: Vec<bool> = test_rows.iter().map(|&i| labels[i]).collect();
                    for (g, report) in reports.iter().enumerate() {
                        let s_tr = &z_tr * &report.gamma;
                        let threshold = fold_threshold(&s_tr, &lab_tr);
                        let s_te = &z_te * &report.gamma;
                        let wrong = s_te
                            .iter()
                            .zip(&lab_te)
                            .filter(|(&s, &l)| (s >= threshold) != l)
                            .count();
                        err[g] += cnt::<T>(wrong);
                    }
                }
            }
        }

        for (g, &lambda) in grid.iter().enumerate() {
            let score = err[g] / cnt::<T>(n);
            table.push(CvRow { lambda: Some(lambda), alpha, n_components: None, score });
            if improves((score, lambda, alpha), &best) {
                best = Some((score, lambda, alpha));
            }
        }
    }

    let (_, best_lambda, best_alpha) = best.expect("grid is nonempty");
    let mut fit = match model {
        ModelConfig::Fu { map } => fit_fu(centered, basis, map, best_lambda, &cfg.refit_solver)?,
        ModelConfig::Gful { grouping } => fit_gful(
            centered,
            basis,
            grouping,
            best_alpha.expect("GFUL selection carries alpha"),
            best_lambda,
            &cfg.refit_solver,
        )?,
        ModelConfig::Gl1 => fit_gl1(centered, basis, best_lambda, &cfg.refit_solver)?,
        ModelConfig::Gl2 { grouping } => {
            fit_gl2(centered, basis, grouping, best_lambda, &cfg.refit_solver)?
        }
        _ => unreachable!("penalized CV only dispatches penalized models"),
    };
    fit.cv_table = Some(table);
    Ok(fit)
}

fn cv_pcr<T: Real>(
    centered: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
    model: &ModelConfig<'_>,
    cfg: &CvConfig<T>,
    fold_of: &[usize],
    labels: Option<&[bool]>,
) -> Result<FitResult<T>> {
    let m = basis.size();
    let (design, upper) = match model {
        ModelConfig::Hg { grouping } => {
            let (x, groups) = group_mean_design(centered, basis, grouping)?;
            (x, groups.len() * (m - 1))
        }
        ModelConfig::Mfpcr => {
            (gl_design(centered, basis, None)?.design, centered.p() * (m - 1))
        }
        _ => return Err(Error::param("not a principal-component model")),
    };
    let grid = pcr_component_grid(upper.max(1), cfg.component_grid_size);
    let n = centered.n();
    let y = centered.responses();
    let mut err = vec![T::zero(); grid.len()];

    for f in 0..cfg.folds {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let x_tr = design.select_rows(train_rows.iter());
        let x_te = design.select_rows(test_rows.iter());
        let y_tr = take_rows(y, &train_rows);
        let y_te = take_rows(y, &test_rows);
        let parts = pcr_decompose(&x_tr);
        // Cross products let every component count reuse one pass.
        let c_te = &x_te * x_tr.transpose();
        let mut pred_te = DVector::<T>::zeros(test_rows.len());
        let mut pred_tr = DVector::<T>::zeros(train_rows.len());
        // Held-out squared error (or misclassifications) after k components.
        let mut by_k: Vec<T> = Vec::with_capacity(parts.rank() + 1);
        let score_state = |pred_te: &DVector<T>, pred_tr: &DVector<T>| match labels {
            None => (pred_te - &y_te).norm_squared(),
            Some(labels) => {
                let lab_tr: Vec<bool> = train_rows.iter().map(|&i| labels[i]).collect();
                let threshold = fold_threshold(pred_tr, &lab_tr);
                cnt::<T>(
                    pred_te
                        .iter()
                        .zip(test_rows.iter().map(|&i| labels[i]))
                        .filter(|(&s, l)| (s >= threshold) != *l)
                        .count(),
                )
            }
        };
        by_k.push(score_state(&pred_te, &pred_tr));
        for j in 0..parts.rank() {
            let col = parts.u.column(j);
            let theta = col.dot(&y_tr) / parts.sigma[j];
            // X_te v_j = C_te u_j / sigma_j; X_tr v_j = sigma_j u_j.
            pred_te.gemv(theta / parts.sigma[j], &c_te, &col.clone_owned(), T::one());
            pred_tr.axpy(theta * parts.sigma[j], &col, T::one());
            by_k.push(score_state(&pred_te, &pred_tr));
        }
        for (gi, &k) in grid.iter().enumerate() {
            err[gi] += by_k[k.min(parts.rank())];
        }
    }

    let mut table: Vec<CvRow<T>> = Vec::new();
    let mut best: Option<(T, usize)> = None;
    for (gi, &k) in grid.iter().enumerate() {
        let score = err[gi] / cnt::<T>(n);
        table.push(CvRow { lambda: None, alpha: None, n_components: Some(k), score });
        let better = match &best {
            None => true,
            // Ties prefer fewer components.
            Some((s, kb)) => score < *s || (score == *s && k < *kb),
        };
        if better {
            best = Some((score, k));
        }
    }
    let (_, k_star) = best.expect("grid is nonempty");
    // The full training design may support fewer components than a grid value.
    let full_parts = pcr_decompose(&design);
    let k_fit = k_star
        .min(full_parts.rank())
        .min(centered.n().saturating_sub(1))
        .min(design.ncols())
        .max(1);
    let mut fit = match model {
        ModelConfig::Hg { grouping } => fit_hg(centered, basis, grouping, k_fit)?,
        ModelConfig::Mfpcr => fit_mfpcr(centered, basis, k_fit)?,
        _ => unreachable!("checked above"),
    };
    fit.cv_table = Some(table);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{nearest_neighbor_map, ConditionSet, Metric};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_basis() -> BasisSystem<f64> {
        BasisSystem::bspline(4, 6, (0.0, 1.0)).unwrap()
    }

    /// Random dataset with p dims whose response depends only on dim 0.
    fn signal_dataset(
        seed: u64,
        n: usize,
        p: usize,
        basis: &BasisSystem<f64>,
        noise: f64,
    ) -> FunctionalDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = basis.size();
        let target = DMatrix::from_fn(1, m, |_, c| (c as f64 * 0.7).sin() + 0.5);
        let mut coeffs = Vec::with_capacity(n);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let a = DMatrix::from_fn(p, m, |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            });
            let first = a.rows(0, 1).clone_owned();
            y[i] = basis.l2_inner(&first, &target) + noise * {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            };
            coeffs.push(a);
        }
        FunctionalDataset::new(coeffs, y).unwrap()
    }

    fn line_conditions(p: usize) -> ConditionSet<f64> {
        ConditionSet::new(DMatrix::from_fn(p, 2, |r, c| {
            if c == 0 {
                r as f64
            } else {
                (r as f64 * 0.37).sin() * 0.1
            }
        }))
        .unwrap()
    }

    #[test]
    fn recode_binary_is_zero_mean() {
        let labels = [true, true, false, true, false];
        let (coded, coding) = recode_binary::<f64>(&labels).unwrap();
        assert_relative_eq!(coded.sum(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(coding.positive, 5.0 / 3.0);
        assert_relative_eq!(coding.negative, -5.0 / 2.0);

        // Balanced classes code as +-2.
        let (coded, _) = recode_binary::<f64>(&[true, false, true, false]).unwrap();
        assert_eq!(coded[0], 2.0);
        assert_eq!(coded[1], -2.0);

        assert!(recode_binary::<f64>(&[true, true]).is_err());
    }

    #[test]
    fn fu_at_lambda_max_fuses_everything_and_predicts_the_mean() {
        let basis = toy_basis();
        let data = signal_dataset(5, 30, 4, &basis, 0.1);
        let centered = data.center();
        let conditions = line_conditions(4);
        let map = nearest_neighbor_map(&conditions, Metric::Euclidean).unwrap();
        let design = fu_design(&centered, &basis, &build_fu_transform::<f64>(&map).unwrap()).unwrap();
        let problem = GroupLassoProblem::new(
            &design.design,
            centered.responses(),
            &design.ranges,
            &design.weights,
        )
        .unwrap();
        let lmax = problem.lambda_max();

        let fit = fit_fu(&centered, &basis, &map, lmax, &SolverOptions::default()).unwrap();
        assert!(fit.beta.iter().all(|&v| v == 0.0));
        assert_eq!(fit.equality.fused_pairs.len(), 6); // all pairs of 4 dims
        assert_eq!(fit.equality.zero_dims, vec![0, 1, 2, 3]);

        let preds = fit.predict(&data, &basis).unwrap();
        let ybar = data.responses().mean();
        for &v in preds.iter() {
            assert_relative_eq!(v, ybar, epsilon = 1e-10);
        }
    }

    #[test]
    fn unpenalized_fit_matches_least_squares_predictions() {
        let basis = toy_basis();
        // n=80 > p*M=2*6=12 so the unpenalized problem is full rank.
        let data = signal_dataset(9, 80, 2, &basis, 0.2);
        let centered = data.center();
        let fit = fit_gl1(&centered, &basis, 0.0, &SolverOptions::default()).unwrap();

        let design = gl_design(&centered, &basis, None).unwrap();
        let z = &design.design;
        let ols = (z.transpose() * z)
            .lu()
            .solve(&(z.transpose() * centered.responses()))
            .unwrap();
        let resid = centered.responses() - z * &ols;
        // Residuals orthogonal to the design at the optimum.
        assert!((z.transpose() * &resid).norm() <= 1e-6);

        let preds = fit.predict(&data, &basis).unwrap();
        let target = z * ols + DVector::from_element(data.n(), data.responses().mean());
        assert!((preds - target).norm() <= 1e-5);
    }

    #[test]
    fn gful_on_singletons_matches_gl1_at_scaled_lambda() {
        let basis = toy_basis();
        let data = signal_dataset(11, 40, 3, &basis, 0.3);
        let centered = data.center();
        let singletons = ConditionGrouping::from_labels(&[0, 1, 2]).unwrap();
        let alpha = 0.4;
        let lambda = 0.8;
        let gful = fit_gful(
            &centered,
            &basis,
            &singletons,
            alpha,
            lambda,
            &SolverOptions::default(),
        )
        .unwrap();
        let gl1 = fit_gl1(&centered, &basis, lambda * alpha, &SolverOptions::default()).unwrap();
        assert!(
            (&gful.beta - &gl1.beta).norm() <= 1e-6 * (1.0 + gl1.beta.norm()),
            "singleton-group fusion should reduce to plain group lasso"
        );
    }

    #[test]
    fn gful_at_alpha_one_matches_gl2() {
        let basis = toy_basis();
        let data = signal_dataset(13, 40, 4, &basis, 0.3);
        let centered = data.center();
        let grouping = ConditionGrouping::from_labels(&[0, 0, 1, 1]).unwrap();
        let lambda = 0.5;
        let a = fit_gful(&centered, &basis, &grouping, 1.0, lambda, &SolverOptions::default())
            .unwrap();
        let b = fit_gl2(&centered, &basis, &grouping, lambda, &SolverOptions::default()).unwrap();
        assert!((&a.beta - &b.beta).norm() <= 1e-8);
        assert_eq!(a.method, Method::Gful);
        assert_eq!(a.alpha, Some(1.0));
    }

    #[test]
    fn equality_enforcement_is_bitwise() {
        let basis = toy_basis();
        let data = signal_dataset(17, 50, 5, &basis, 0.5);
        let centered = data.center();
        let conditions = line_conditions(5);
        let map = nearest_neighbor_map(&conditions, Metric::Euclidean).unwrap();
        // A lambda high enough to fuse at least one pair.
        let design = fu_design(&centered, &basis, &build_fu_transform::<f64>(&map).unwrap()).unwrap();
        let problem = GroupLassoProblem::new(
            &design.design,
            centered.responses(),
            &design.ranges,
            &design.weights,
        )
        .unwrap();
        let fit = fit_fu(
            &centered,
            &basis,
            &map,
            problem.lambda_max() * 0.5,
            &SolverOptions::default(),
        )
        .unwrap();
        for &(j, k) in &fit.equality.fused_pairs {
            for c in 0..fit.beta.ncols() {
                assert_eq!(fit.beta[(j, c)], fit.beta[(k, c)], "fused rows must match bitwise");
            }
        }
        for &d in &fit.equality.zero_dims {
            assert!(fit.beta.row(d).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hg_recovers_group_means_on_noiseless_data() {
        let basis = toy_basis();
        let m = basis.size();
        let p = 4;
        let grouping = ConditionGrouping::from_labels(&[0, 0, 1, 1]).unwrap();
        // True model: beta^{(j)} = g^{(k)}/p_k with two distinct group curves.
        let g1 = DMatrix::from_fn(1, m, |_, c| 1.0 + c as f64 * 0.3);
        let g2 = DMatrix::from_fn(1, m, |_, c| -0.5 + (c as f64 * 0.9).cos());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 60;
        let mut coeffs = Vec::new();
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let a = DMatrix::from_fn(p, m, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let mean0 = (a.rows(0, 1) + a.rows(1, 1)) / 2.0;
            let mean1 = (a.rows(2, 1) + a.rows(3, 1)) / 2.0;
            y[i] = basis.l2_inner(&mean0.clone_owned(), &g1)
                + basis.l2_inner(&mean1.clone_owned(), &g2);
            coeffs.push(a);
        }
        let data = FunctionalDataset::new(coeffs, y).unwrap();
        let centered = data.center();
        let fit = fit_hg(&centered, &basis, &grouping, 2 * m).unwrap();
        for j in 0..2 {
            assert!((fit.beta.row(j) - g1.row(0) / 2.0).norm() <= 1e-6);
        }
        for j in 2..4 {
            assert!((fit.beta.row(j) - g2.row(0) / 2.0).norm() <= 1e-6);
        }
        // HG declares exactly the within-group pairs.
        assert_eq!(fit.equality.fused_pairs, vec![(0, 1), (2, 3)]);
        assert_eq!(fit.equality.fused_groups, vec![0, 1]);
        let preds = fit.predict(&data, &basis).unwrap();
        assert!((preds - data.responses()).norm() <= 1e-6);
    }

    #[test]
    fn mfpcr_full_rank_equals_least_squares_and_declares_nothing() {
        let basis = toy_basis();
        let data = signal_dataset(23, 80, 2, &basis, 0.2);
        let centered = data.center();
        let q = 2 * basis.size();
        let fit = fit_mfpcr(&centered, &basis, q).unwrap();
        let gl0 = fit_gl1(&centered, &basis, 0.0, &SolverOptions::default()).unwrap();
        assert!((&fit.beta - &gl0.beta).norm() <= 1e-5 * (1.0 + gl0.beta.norm()));
        assert!(fit.equality.fused_pairs.is_empty());

        assert!(fit_mfpcr(&centered, &basis, q + 1).is_err());
        assert!(fit_mfpcr(&centered, &basis, 0).is_err());
    }

    #[test]
    fn predict_rejects_centered_data_and_shape_mismatches() {
        let basis = toy_basis();
        let data = signal_dataset(29, 20, 2, &basis, 0.2);
        let centered = data.center();
        let fit = fit_gl1(&centered, &basis, 0.1, &SolverOptions::default()).unwrap();
        assert!(fit.predict(&centered, &basis).is_err());
        let other = signal_dataset(29, 10, 3, &basis, 0.2);
        assert!(fit.predict(&other, &basis).is_err());
    }

    #[test]
    fn uncentered_data_is_rejected_by_fits() {
        let basis = toy_basis();
        let data = signal_dataset(31, 20, 2, &basis, 0.2);
        assert!(fit_gl1(&data, &basis, 0.1, &SolverOptions::default()).is_err());
    }

    #[test]
    fn back_map_consistency_for_fits() {
        let basis = toy_basis();
        let data = signal_dataset(37, 40, 4, &basis, 0.4);
        let centered = data.center();
        let grouping = ConditionGrouping::from_labels(&[0, 0, 1, 1]).unwrap();
        let design = gful_design(
            &centered,
            &basis,
            &build_gful_transform::<f64>(&grouping, 0.5).unwrap(),
        )
        .unwrap();
        let fit = fit_gful(&centered, &basis, &grouping, 0.5, 0.3, &SolverOptions::default())
            .unwrap();
        // design gamma equals the l2 inner products of centered data with beta.
        let fitted = &design.design * &fit.gamma;
        for (i, coeff) in centered.coeffs().iter().enumerate() {
            let direct = basis.l2_inner(coeff, &fit.beta);
            assert_relative_eq!(fitted[i], direct, epsilon = 1e-8, max_relative = 1e-6);
        }
    }

    #[test]
    fn cross_validation_is_deterministic_and_keeps_signal() {
        let basis = toy_basis();
        let data = signal_dataset(41, 60, 3, &basis, 0.4);
        let cfg = CvConfig::<f64> {
            folds: 5,
            lambda_grid_size: 25,
            ..CvConfig::default()
        };
        let fit1 = cross_validate(&data, &basis, &ModelConfig::Gl1, &cfg).unwrap();
        let fit2 = cross_validate(&data, &basis, &ModelConfig::Gl1, &cfg).unwrap();
        assert_eq!(fit1.lambda, fit2.lambda);
        assert_eq!(fit1.beta, fit2.beta);
        let table = fit1.cv_table.as_ref().unwrap();
        assert_eq!(table.len(), 25);

        // The informative dimension carries signal: CV must not shrink it away.
        let preds = fit1.predict(&data, &basis).unwrap();
        let err = (preds - data.responses()).norm_squared() / 60.0;
        let var = {
            let ybar = data.responses().mean();
            data.responses().iter().map(|y| (y - ybar).powi(2)).sum::<f64>() / 60.0
        };
        assert!(err < 0.5 * var, "CV fit should explain most of the variance");
    }

    #[test]
    fn cross_validation_shrinks_hard_on_pure_noise() {
        let basis = toy_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let n = 40;
        let coeffs: Vec<DMatrix<f64>> = (0..n)
            .map(|_| DMatrix::from_fn(3, basis.size(), |_, _| rng.gen::<f64>() * 2.0 - 1.0))
            .collect();
        let y = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let data = FunctionalDataset::new(coeffs, y).unwrap();
        let cfg = CvConfig::<f64> { folds: 5, lambda_grid_size: 30, ..CvConfig::default() };
        let fit = cross_validate(&data, &basis, &ModelConfig::Gl1, &cfg).unwrap();
        // Noise admits no signal: the winner sits in the top decile of the grid.
        let table = fit.cv_table.as_ref().unwrap();
        let lambdas: Vec<f64> = table.iter().map(|r| r.lambda.unwrap()).collect();
        let rank = lambdas.iter().filter(|&&l| l > fit.lambda.unwrap()).count();
        assert!(rank <= 3, "pure noise should select a near-maximal lambda, rank {rank}");
    }

    #[test]
    fn cross_validation_tunes_components_for_pcr() {
        let basis = toy_basis();
        let data = signal_dataset(47, 50, 2, &basis, 0.3);
        let cfg = CvConfig::<f64> { folds: 5, component_grid_size: 12, ..CvConfig::default() };
        let fit = cross_validate(&data, &basis, &ModelConfig::Mfpcr, &cfg).unwrap();
        assert_eq!(fit.method, Method::Mfpcr);
        let k = fit.n_components.unwrap();
        assert!(k >= 1 && k <= 2 * basis.size());
        assert!(fit.cv_table.is_some());
    }

    #[test]
    fn classification_roundtrip_and_label_swap_symmetry() {
        let basis = toy_basis();
        let m = basis.size();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let n = 60;
        let target = DMatrix::from_fn(1, m, |_, c| 1.0 + 0.2 * c as f64);
        let mut coeffs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2 == 0;
            let shift = if label { 1.0 } else { -1.0 };
            let a = DMatrix::from_fn(2, m, |r, c| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                if r == 0 {
                    shift * target[(0, c)] + 0.25 * noise
                } else {
                    noise
                }
            });
            coeffs.push(a);
            labels.push(label);
        }
        let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
        let data = FunctionalDataset::new(coeffs.clone(), y).unwrap();
        let cfg = CvConfig::<f64> {
            folds: 5,
            lambda_grid_size: 20,
            task: CvTask::Classify,
            ..CvConfig::default()
        };
        let fit = cross_validate(&data, &basis, &ModelConfig::Gl1, &cfg).unwrap();
        let classes = fit.predict_classes(&data, &basis).unwrap();
        let accuracy =
            classes.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / n as f64;
        assert!(accuracy >= 0.9, "separable classes should classify well, got {accuracy}");

        // Swapping labels swaps predictions.
        let y_swapped =
            DVector::from_iterator(n, labels.iter().map(|&l| if l { 0.0 } else { 1.0 }));
        let swapped = FunctionalDataset::new(coeffs, y_swapped).unwrap();
        let fit_sw = cross_validate(&swapped, &basis, &ModelConfig::Gl1, &cfg).unwrap();
        let classes_sw = fit_sw.predict_classes(&data, &basis).unwrap();
        let agree_flipped =
            classes.iter().zip(&classes_sw).filter(|(a, b)| *a != *b).count() as f64 / n as f64;
        assert!(agree_flipped >= 0.9, "label swap should flip predictions");
    }

    #[test]
    fn component_grid_is_equidistant_and_deduplicated() {
        assert_eq!(pcr_component_grid(5, 150), vec![1, 2, 3, 4, 5]);
        let grid = pcr_component_grid(228, 150);
        assert_eq!(grid.first(), Some(&1));
        assert_eq!(grid.last(), Some(&228));
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
        assert!(grid.len() <= 150);
        let big = pcr_component_grid(1520, 150);
        assert_eq!(big.len(), 150);
        assert_eq!(big.last(), Some(&1520));
    }

    #[test]
    fn cv_rejects_bad_inputs() {
        let basis = toy_basis();
        let data = signal_dataset(59, 12, 2, &basis, 0.2);
        let cfg = CvConfig::<f64> { folds: 20, ..CvConfig::default() };
        assert!(cross_validate(&data, &basis, &ModelConfig::Gl1, &cfg).is_err());
        let centered = data.center();
        let cfg = CvConfig::<f64> { folds: 4, ..CvConfig::default() };
        assert!(cross_validate(&centered, &basis, &ModelConfig::Gl1, &cfg).is_err());
        // Classification task demands 0/1 responses.
        let cfg = CvConfig::<f64> { folds: 4, task: CvTask::Classify, ..CvConfig::default() };
        assert!(cross_validate(&data, &basis, &ModelConfig::Gl1, &cfg).is_err());
    }
}
