//! Synthetic benchmark: four clusters of conditions on unit circles, bump
//! coefficient functions with one heterogeneous cluster, and an experiment
//! runner that cross-validates each estimator per replicate and aggregates
//! prediction error plus equality-recovery metrics.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basis::BasisSystem;
use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::estimators::{cross_validate, CvConfig, CvTask, FitResult, Method, ModelConfig};
use crate::geometry::{nearest_neighbor_map, ConditionGrouping, ConditionSet, Metric};
use crate::real::{cnt, cst, Real};

/// Number of bump functions the curves and coefficients are built from.
const N_BUMPS: usize = 9;
/// Sampling grid size for the observed curves.
pub const GRID_POINTS: usize = 100;
/// B-spline expansion used to fit the sampled curves.
pub const BASIS_ORDER: usize = 4;
pub const BASIS_SIZE: usize = 20;

/// One benchmark scenario: four groups of `kappa` conditions each.
#[derive(Debug, Clone)]
pub struct ScenarioSpec<T: Real> {
    pub kappa: usize,
    pub sigma_eps: T,
    pub n_total: usize,
    pub train_fraction: T,
    pub replicates: usize,
    pub seed: u64,
}

impl<T: Real> ScenarioSpec<T> {
    /// Small setting: 12 dimensions, noise SD 1.6.
    pub fn s1() -> Self {
        ScenarioSpec {
            kappa: 3,
            sigma_eps: cst(1.6),
            n_total: 250,
            train_fraction: cst(0.8),
            replicates: 100,
            seed: 0,
        }
    }

    /// Large setting: 80 dimensions, noise SD 3.6.
    pub fn s2() -> Self {
        ScenarioSpec { kappa: 20, sigma_eps: cst(3.6), ..ScenarioSpec::s1() }
    }

    pub fn p(&self) -> usize {
        4 * self.kappa
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 {
            return Err(Error::param("kappa must be at least 1"));
        }
        if !(self.sigma_eps >= T::zero()) || !self.sigma_eps.is_finite() {
            return Err(Error::param("noise SD must be finite and nonnegative"));
        }
        if !(self.train_fraction > T::zero()) || !(self.train_fraction < T::one()) {
            return Err(Error::param("train fraction must lie strictly in (0, 1)"));
        }
        if self.n_total < 10 {
            return Err(Error::param("need at least 10 subjects"));
        }
        Ok(())
    }
}

/// Basis every simulated dataset is projected onto.
pub fn fitting_basis<T: Real>() -> BasisSystem<T> {
    BasisSystem::bspline(BASIS_ORDER, BASIS_SIZE, (T::zero(), T::one()))
        .expect("cubic spline basis of size 20 on [0,1] is valid")
}

/// Bump function s (1-based): (1 - 0.2 (10t - s)^2)_+, supported on
/// |10t - s| < sqrt(5).
pub fn delta_bump<T: Real>(s: usize, t: T) -> T {
    let u = cst::<T>(10.0) * t - cnt::<T>(s);
    (T::one() - cst::<T>(0.2) * u * u).max(T::zero())
}

/// Conditions: unit circles around the four group centers (0,0), (3,3),
/// (6,6), (9,9), `kappa` points each, angles 2 pi (j mod kappa) / kappa with
/// 1-based j.
pub fn make_conditions<T: Real>(kappa: usize) -> Result<ConditionSet<T>> {
    if kappa == 0 {
        return Err(Error::param("kappa must be at least 1"));
    }
    let p = 4 * kappa;
    let coords = DMatrix::from_fn(p, 2, |idx, c| {
        let j = idx + 1;
        let group = idx / kappa;
        let angle = cst::<T>(2.0 * std::f64::consts::PI) * cnt::<T>(j % kappa) / cnt::<T>(kappa);
        let center = cst::<T>(3.0 * group as f64);
        center + if c == 0 { angle.cos() } else { angle.sin() }
    });
    ConditionSet::new(coords)
}

/// The true group labels behind [`make_conditions`]: four blocks of `kappa`.
pub fn make_grouping(kappa: usize) -> Result<ConditionGrouping> {
    let labels: Vec<usize> = (0..4 * kappa).map(|idx| idx / kappa).collect();
    ConditionGrouping::from_labels(&labels)
}

/// Bump-basis coefficients of the true coefficient functions, one row per
/// dimension. Group 1 is zero, groups 2 and 4 are +-sqrt(2) on the first
/// three bumps, group 3 has per-dimension slopes b_j = (-1)^j (1 + j mod
/// kappa) / kappa on all nine bumps.
pub fn bump_coefficients<T: Real>(kappa: usize) -> DMatrix<T> {
    let p = 4 * kappa;
    let sqrt2 = cst::<T>(2.0).sqrt();
    DMatrix::from_fn(p, N_BUMPS, |idx, s| {
        let j = idx + 1;
        match idx / kappa {
            0 => T::zero(),
            1 => {
                if s < 3 {
                    sqrt2
                } else {
                    T::zero()
                }
            }
            2 => {
                let sign = if j % 2 == 0 { T::one() } else { -T::one() };
                sign * cnt::<T>(1 + j % kappa) / cnt::<T>(kappa)
            }
            _ => {
                if s < 3 {
                    -sqrt2
                } else {
                    T::zero()
                }
            }
        }
    })
}

/// True coefficient functions expanded in `basis`: bump curves evaluated on
/// the sampling grid and projected, one row per dimension.
pub fn make_beta<T: Real>(kappa: usize, basis: &BasisSystem<T>) -> Result<DMatrix<T>> {
    let grid = sampling_grid::<T>();
    let bumps = bump_values(&grid);
    let curves = bump_coefficients::<T>(kappa) * bumps;
    Ok(basis.project(&grid, &curves.transpose())?.transpose())
}

fn sampling_grid<T: Real>() -> Vec<T> {
    (0..GRID_POINTS)
        .map(|g| cnt::<T>(g) / cnt::<T>(GRID_POINTS - 1))
        .collect()
}

/// Bump evaluations: row s-1 holds bump s on the grid.
fn bump_values<T: Real>(grid: &[T]) -> DMatrix<T> {
    DMatrix::from_fn(N_BUMPS, grid.len(), |s, g| delta_bump(s + 1, grid[g]))
}

/// Gram matrix of the nine bumps in L2[0,1], computed by Gauss-Legendre
/// quadrature on the partition induced by the support endpoints. Each piece
/// of the integrand is a quartic polynomial, so five nodes are exact.
pub fn bump_gram<T: Real>() -> DMatrix<T> {
    // 5-point Gauss-Legendre nodes and weights on [-1, 1].
    const NODES: [f64; 5] = [
        -0.906179845938664,
        -0.5384693101056831,
        0.0,
        0.5384693101056831,
        0.906179845938664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.23692688505618908,
        0.47862867049936647,
        0.5688888888888889,
        0.47862867049936647,
        0.23692688505618908,
    ];
    let sqrt5 = 5f64.sqrt();
    let mut cuts = vec![0.0, 1.0];
    for s in 1..=N_BUMPS {
        for edge in [(s as f64 - sqrt5) / 10.0, (s as f64 + sqrt5) / 10.0] {
            if edge > 0.0 && edge < 1.0 {
                cuts.push(edge);
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();

    let mut gram = DMatrix::<f64>::zeros(N_BUMPS, N_BUMPS);
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = (hi - lo) / 2.0;
        let mid = (hi + lo) / 2.0;
        for (node, weight) in NODES.iter().zip(WEIGHTS) {
            let t = mid + half * node;
            for a in 0..N_BUMPS {
                let va = delta_bump(a + 1, t);
                if va == 0.0 {
                    continue;
                }
                for b in a..N_BUMPS {
                    let vb = delta_bump(b + 1, t);
                    if vb != 0.0 {
                        gram[(a, b)] += weight * half * va * vb;
                    }
                }
            }
        }
    }
    DMatrix::from_fn(N_BUMPS, N_BUMPS, |a, b| cst(if a <= b { gram[(a, b)] } else { gram[(b, a)] }))
}

/// Ground truth of one scenario: the generative coefficients, the equality
/// relation among them, and the structures the estimators consume.
#[derive(Debug, Clone)]
pub struct SimulationTruth<T: Real> {
    pub conditions: ConditionSet<T>,
    pub grouping: ConditionGrouping,
    /// True coefficients projected onto the fitting basis, p x M.
    pub beta: DMatrix<T>,
    /// Exact bump-basis coefficients, p x 9.
    pub bump_coeffs: DMatrix<T>,
    /// True equality class per dimension.
    class_of: Vec<usize>,
    pub zero_dims: Vec<usize>,
}

impl<T: Real> SimulationTruth<T> {
    pub fn build(kappa: usize, basis: &BasisSystem<T>) -> Result<Self> {
        let conditions = make_conditions(kappa)?;
        let grouping = make_grouping(kappa)?;
        let bump_coeffs = bump_coefficients::<T>(kappa);
        let beta = make_beta(kappa, basis)?;
        let p = 4 * kappa;
        // Classes by exact row equality; the zero function is one class.
        let mut class_of = vec![usize::MAX; p];
        for j in 0..p {
            if class_of[j] != usize::MAX {
                continue;
            }
            class_of[j] = j;
            for k in (j + 1)..p {
                if class_of[k] == usize::MAX && bump_coeffs.row(j) == bump_coeffs.row(k) {
                    class_of[k] = j;
                }
            }
        }
        let zero_dims =
            (0..p).filter(|&j| bump_coeffs.row(j).iter().all(|&v| v == T::zero())).collect();
        Ok(SimulationTruth { conditions, grouping, beta, bump_coeffs, class_of, zero_dims })
    }

    pub fn p(&self) -> usize {
        self.class_of.len()
    }

    pub fn truly_equal(&self, j: usize, k: usize) -> bool {
        self.class_of[j] == self.class_of[k]
    }

    /// (truly equal, truly unequal) pair counts over all undirected pairs.
    pub fn pair_counts(&self) -> (usize, usize) {
        let p = self.p();
        let mut equal = 0;
        for j in 0..p {
            for k in (j + 1)..p {
                if self.truly_equal(j, k) {
                    equal += 1;
                }
            }
        }
        (equal, p * (p - 1) / 2 - equal)
    }
}

/// One replicate of a scenario: raw train and test splits plus the truth.
pub fn simulate_dataset<T: Real>(
    spec: &ScenarioSpec<T>,
    replicate: usize,
) -> Result<(FunctionalDataset<T>, FunctionalDataset<T>, SimulationTruth<T>)> {
    spec.validate()?;
    let basis = fitting_basis::<T>();
    let truth = SimulationTruth::build(spec.kappa, &basis)?;
    let p = spec.p();
    let n = spec.n_total;
    let grid = sampling_grid::<T>();
    let bumps = bump_values(&grid);
    // Response weights per dimension: signal_i = sum_j <loadings_ij, g_j>.
    let signal_weights = &truth.bump_coeffs * bump_gram::<T>().transpose();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(replicate as u64);

    let mut coeffs = Vec::with_capacity(n);
    let mut y = DVector::<T>::zeros(n);
    for i in 0..n {
        let mut loadings = DMatrix::<T>::zeros(p, N_BUMPS);
        for j in 0..p {
            for s in 0..N_BUMPS {
                let v: f64 = rng.sample(StandardNormal);
                loadings[(j, s)] = cst(v);
            }
        }
        let curves = &loadings * &bumps;
        coeffs.push(basis.project(&grid, &curves.transpose())?.transpose());
        y[i] = loadings.dot(&signal_weights);
    }
    for i in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        y[i] += spec.sigma_eps * cst(e);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = {
        let f: f64 = (spec.train_fraction * cnt::<T>(n)).to_f64().unwrap();
        (f.round() as usize).clamp(1, n - 1)
    };
    let mut train_rows = order[..n_train].to_vec();
    let mut test_rows = order[n_train..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();

    let data = FunctionalDataset::new(coeffs, y)?;
    Ok((data.subset(&train_rows)?, data.subset(&test_rows)?, truth))
}

// ---------------------------------------------------------------------------
// Metrics

/// Per-replicate evaluation of one fit.
#[derive(Debug, Clone, Copy)]
pub struct ReplicateMetrics<T: Real> {
    pub mse: T,
    /// Fraction of truly-equal pairs declared equal; None when no pair is
    /// truly equal.
    pub sens: Option<T>,
    /// Fraction of truly-unequal pairs left unfused; None when every pair is
    /// truly equal.
    pub spec: Option<T>,
}

/// Sensitivity and specificity of a pairwise equality declaration against
/// the truth, normalized over the pairs where each is defined.
pub fn pair_metrics<T: Real>(
    declares: impl Fn(usize, usize) -> bool,
    truth: &SimulationTruth<T>,
) -> (Option<T>, Option<T>) {
    let p = truth.p();
    let (mut hit, mut equal, mut pass, mut unequal) = (0usize, 0usize, 0usize, 0usize);
    for j in 0..p {
        for k in (j + 1)..p {
            if truth.truly_equal(j, k) {
                equal += 1;
                if declares(j, k) {
                    hit += 1;
                }
            } else {
                unequal += 1;
                if !declares(j, k) {
                    pass += 1;
                }
            }
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(cnt::<T>(num) / cnt::<T>(den))
        }
    };
    (ratio(hit, equal), ratio(pass, unequal))
}

/// Test-set mean squared prediction error plus equality recovery.
pub fn compute_metrics<T: Real>(
    fit: &FitResult<T>,
    truth: &SimulationTruth<T>,
    test: &FunctionalDataset<T>,
    basis: &BasisSystem<T>,
) -> Result<ReplicateMetrics<T>> {
    let preds = fit.predict(test, basis)?;
    let mse = (preds - test.responses()).norm_squared() / cnt::<T>(test.n());
    let (sens, spec) = pair_metrics(|j, k| fit.equality.declares(j, k), truth);
    Ok(ReplicateMetrics { mse, sens, spec })
}

// ---------------------------------------------------------------------------
// Experiment runner

/// Aggregates for one method over the replicates where it succeeded.
#[derive(Debug, Clone)]
pub struct MethodSummary<T: Real> {
    pub method: Method,
    pub mse_mean: T,
    pub mse_sd: T,
    pub sens_mean: Option<T>,
    pub sens_sd: Option<T>,
    pub spec_mean: Option<T>,
    pub spec_sd: Option<T>,
    pub replicates: Vec<ReplicateMetrics<T>>,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable<T: Real> {
    pub rows: Vec<MethodSummary<T>>,
    pub failed_fits: usize,
}

impl<T: Real> ComparisonTable<T> {
    pub fn row(&self, method: Method) -> Option<&MethodSummary<T>> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn mean_sd<T: Real>(values: &[T]) -> (T, T) {
    assert!(!values.is_empty());
    let n = cnt::<T>(values.len());
    let mean = values.iter().cloned().fold(T::zero(), |a, b| a + b) / n;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let ss = values.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b);
    (mean, (ss / (n - T::one())).sqrt())
}

fn optional_mean_sd<T: Real>(values: &[Option<T>]) -> (Option<T>, Option<T>) {
    let defined: Vec<T> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return (None, None);
    }
    let (m, s) = mean_sd(&defined);
    (Some(m), Some(s))
}

/// Runs `spec.replicates` independent replicates, cross-validating every
/// method on each training split and scoring on the held-out split. Failed
/// fits are excluded and counted. Deterministic for a fixed scenario.
pub fn run_experiment<T: Real>(
    spec: &ScenarioSpec<T>,
    methods: &[Method],
    cv: &CvConfig<T>,
) -> Result<ComparisonTable<T>> {
    spec.validate()?;
    if methods.is_empty() {
        return Err(Error::param("no methods requested"));
    }
    if cv.task != CvTask::Regress {
        return Err(Error::param("the benchmark is a regression experiment"));
    }
    let basis = fitting_basis::<T>();
    let mut per_method: Vec<Vec<ReplicateMetrics<T>>> =
        methods.iter().map(|_| Vec::new()).collect();
    let mut failures = vec![0usize; methods.len()];

    for rep in 0..spec.replicates {
        let (train, test, truth) = simulate_dataset(spec, rep)?;
        let map = nearest_neighbor_map(&truth.conditions, Metric::Euclidean)?;
        let mut line = format!("replicate {:>3}/{}:", rep + 1, spec.replicates);
        for (mi, &method) in methods.iter().enumerate() {
            let model = match method {
                Method::Fu => ModelConfig::Fu { map: &map },
                Method::Gful => ModelConfig::Gful { grouping: &truth.grouping },
                Method::Gl1 => ModelConfig::Gl1,
                Method::Gl2 => ModelConfig::Gl2 { grouping: &truth.grouping },
                Method::Hg => ModelConfig::Hg { grouping: &truth.grouping },
                Method::Mfpcr => ModelConfig::Mfpcr,
            };
            let mut cfg = cv.clone();
            cfg.seed = spec.seed.wrapping_add(1_000_003 * rep as u64);
            let outcome = cross_validate(&train, &basis, &model, &cfg)
                .and_then(|fit| compute_metrics(&fit, &truth, &test, &basis));
            match outcome {
                Ok(metrics) => {
                    line.push_str(&format!(" {}={:.3}", method, metrics.mse.to_f64().unwrap()));
                    per_method[mi].push(metrics);
                }
                Err(err) => {
                    line.push_str(&format!(" {}=failed", method));
                    eprintln!("warning: {} failed on replicate {}: {}", method, rep, err);
                    failures[mi] += 1;
                }
            }
        }
        eprintln!("{line}");
    }

    let mut rows = Vec::with_capacity(methods.len());
    for (mi, &method) in methods.iter().enumerate() {
        let reps = &per_method[mi];
        if reps.is_empty() {
            return Err(Error::numerical(format!("{method} failed on every replicate")));
        }
        let (mse_mean, mse_sd) = mean_sd(&reps.iter().map(|r| r.mse).collect::<Vec<_>>());
        let (sens_mean, sens_sd) =
            optional_mean_sd(&reps.iter().map(|r| r.sens).collect::<Vec<_>>());
        let (spec_mean, spec_sd) =
            optional_mean_sd(&reps.iter().map(|r| r.spec).collect::<Vec<_>>());
        rows.push(MethodSummary {
            method,
            mse_mean,
            mse_sd,
            sens_mean,
            sens_sd,
            spec_mean,
            spec_sd,
            replicates: reps.clone(),
            failures: failures[mi],
        });
    }
    Ok(ComparisonTable { rows, failed_fits: failures.iter().sum() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bump_peaks_and_support() {
        assert_relative_eq!(delta_bump::<f64>(1, 0.1), 1.0);
        assert_eq!(delta_bump::<f64>(1, 0.35), 0.0);
        let sqrt5 = 5f64.sqrt();
        for s in 1..=9 {
            let inside = (s as f64 - sqrt5) / 10.0 + 1e-9;
            let outside = (s as f64 + sqrt5) / 10.0 + 1e-9;
            assert!(delta_bump::<f64>(s, inside) > 0.0);
            assert_eq!(delta_bump::<f64>(s, outside), 0.0);
        }
    }

    #[test]
    fn conditions_sit_on_unit_circles_around_the_centers() {
        let kappa = 3;
        let set = make_conditions::<f64>(kappa).unwrap();
        assert_eq!(set.p(), 12);
        for idx in 0..12 {
            let g = idx / kappa;
            let c = 3.0 * g as f64;
            let dx = set.coords()[(idx, 0)] - c;
            let dy = set.coords()[(idx, 1)] - c;
            assert_relative_eq!(dx * dx + dy * dy, 1.0, epsilon = 1e-12);
        }
        // 1-based j = kappa has angle 0, so the offset is (1, 0).
        assert_relative_eq!(set.coords()[(kappa - 1, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(set.coords()[(kappa - 1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn true_coefficients_have_the_documented_structure() {
        let kappa = 3;
        let c = bump_coefficients::<f64>(kappa);
        for j in 0..kappa {
            assert!(c.row(j).iter().all(|&v| v == 0.0));
        }
        for j in kappa..2 * kappa {
            assert_eq!(c.row(j), c.row(kappa));
        }
        // Opposite signs between groups 2 and 4.
        assert_eq!(c.row(kappa) * -1.0, c.row(3 * kappa));
        // Group 3 rows pairwise distinct.
        for j in 2 * kappa..3 * kappa {
            for k in (j + 1)..3 * kappa {
                assert_ne!(c.row(j), c.row(k));
            }
        }

        let basis = fitting_basis::<f64>();
        let truth = SimulationTruth::build(kappa, &basis).unwrap();
        assert_eq!(truth.zero_dims, vec![0, 1, 2]);
        let (equal, unequal) = truth.pair_counts();
        assert_eq!(equal, 9); // C(3,2) within each of groups 1, 2, 4
        assert_eq!(unequal, 57);
    }

    #[test]
    fn projected_beta_tracks_the_bump_curves() {
        let basis = fitting_basis::<f64>();
        let beta = make_beta::<f64>(3, &basis).unwrap();
        let grid = sampling_grid::<f64>();
        let phi = basis.eval_matrix(&grid).unwrap();
        let c = bump_coefficients::<f64>(3);
        let curves = c * bump_values(&grid);
        let reconstructed = phi * beta.transpose();
        for j in 0..12 {
            let mut se = 0.0;
            let mut ss = 0.0;
            for g in 0..GRID_POINTS {
                se += (reconstructed[(g, j)] - curves[(j, g)]).powi(2);
                ss += curves[(j, g)].powi(2);
            }
            if ss == 0.0 {
                assert!(beta.row(j).iter().all(|&v| v.abs() < 1e-10));
            } else {
                assert!((se / ss).sqrt() < 0.03, "dim {j} projection error {}", (se / ss).sqrt());
            }
        }
    }

    #[test]
    fn bump_gram_matches_brute_force_quadrature() {
        let gram = bump_gram::<f64>();
        // Independent check: Simpson's rule on a fine grid.
        let n = 20_000usize;
        let h = 1.0 / n as f64;
        let simpson = |a: usize, b: usize| {
            let f = |t: f64| delta_bump::<f64>(a + 1, t) * delta_bump::<f64>(b + 1, t);
            let mut acc = f(0.0) + f(1.0);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(i as f64 * h);
            }
            acc * h / 3.0
        };
        // Simpson only reaches O(h^2) at the support kinks, hence the 1e-7.
        for a in 0..9 {
            for b in a..9 {
                assert_relative_eq!(gram[(a, b)], simpson(a, b), epsilon = 1e-7);
                assert_eq!(gram[(a, b)], gram[(b, a)]);
            }
        }
        // Interior bumps have full support, so their norm is 8 sqrt(5) / 75.
        let interior = 8.0 * 5f64.sqrt() / 75.0;
        for s in 2..=6 {
            assert_relative_eq!(gram[(s, s)], interior, epsilon = 1e-12);
        }
        // Bumps further than 2 sqrt(5) apart never overlap.
        for a in 0..9 {
            for b in a + 5..9 {
                assert_eq!(gram[(a, b)], 0.0);
            }
        }
    }

    #[test]
    fn replicates_are_deterministic_and_distinct() {
        let spec = ScenarioSpec::<f64> { n_total: 30, ..ScenarioSpec::s1() };
        let (tr1, te1, _) = simulate_dataset(&spec, 3).unwrap();
        let (tr2, te2, _) = simulate_dataset(&spec, 3).unwrap();
        assert_eq!(tr1.responses(), tr2.responses());
        assert_eq!(tr1.coeffs()[0], tr2.coeffs()[0]);
        assert_eq!(te1.responses(), te2.responses());

        let (tr3, _, _) = simulate_dataset(&spec, 4).unwrap();
        assert_ne!(tr1.responses(), tr3.responses());

        assert_eq!(tr1.n(), 24);
        assert_eq!(te1.n(), 6);
        assert_eq!(tr1.p(), 12);
        assert_eq!(tr1.basis_size(), BASIS_SIZE);
    }

    #[test]
    fn noiseless_oracle_fit_predicts_almost_perfectly() {
        let spec = ScenarioSpec::<f64> { sigma_eps: 0.0, n_total: 60, ..ScenarioSpec::s1() };
        let basis = fitting_basis::<f64>();
        let (train, test, truth) = simulate_dataset(&spec, 0).unwrap();
        // Oracle: the projected true coefficients with a zero intercept.
        let predict = |data: &FunctionalDataset<f64>| {
            let weighted = &truth.beta * basis.gram();
            DVector::<f64>::from_iterator(
                data.n(),
                data.coeffs().iter().map(|a| a.dot(&weighted)),
            )
        };
        for data in [&train, &test] {
            let preds = predict(data);
            let mse = (preds - data.responses()).norm_squared() / data.n() as f64;
            assert!(mse <= 1e-3, "projection error should be small, got {mse}");
        }
    }

    #[test]
    fn noise_to_signal_ratio_sits_near_ten_percent() {
        for spec in [ScenarioSpec::<f64>::s1(), ScenarioSpec::<f64>::s2()] {
            // Analytic signal variance: sum_j || G c_j ||^2 with iid loadings.
            let gram = bump_gram::<f64>();
            let weights = bump_coefficients::<f64>(spec.kappa) * gram.transpose();
            let signal_var: f64 = weights.iter().map(|w| w * w).sum();
            let ratio = spec.sigma_eps.powi(2) / (signal_var + spec.sigma_eps.powi(2));
            assert!(
                (0.06..=0.14).contains(&ratio),
                "kappa={} ratio={ratio}",
                spec.kappa
            );
        }
    }

    #[test]
    fn pair_metrics_handle_oracle_and_degenerate_declarations() {
        let basis = fitting_basis::<f64>();
        let truth = SimulationTruth::build(3, &basis).unwrap();
        let (sens, spec) = pair_metrics(|j, k| truth.truly_equal(j, k), &truth);
        assert_eq!(sens, Some(1.0));
        assert_eq!(spec, Some(1.0));

        let (sens, spec) = pair_metrics(|_, _| false, &truth);
        assert_eq!(sens, Some(0.0));
        assert_eq!(spec, Some(1.0));

        let (sens, spec) = pair_metrics(|_, _| true, &truth);
        assert_eq!(sens, Some(1.0));
        assert!(spec.unwrap() < 1.0);

        // kappa = 1: no truly-equal pair exists, so sensitivity is undefined.
        let lonely = SimulationTruth::build(1, &basis).unwrap();
        let (sens, spec) = pair_metrics(|_, _| false, &lonely);
        assert_eq!(sens, None);
        assert_eq!(spec, Some(1.0));
    }

    #[test]
    fn small_experiment_runs_deterministically() {
        let spec = ScenarioSpec::<f64> {
            kappa: 2,
            n_total: 40,
            replicates: 2,
            ..ScenarioSpec::s1()
        };
        let cv = CvConfig::<f64> {
            folds: 4,
            lambda_grid_size: 8,
            component_grid_size: 8,
            ..CvConfig::default()
        };
        let methods = [Method::Gl1, Method::Hg];
        let table = run_experiment(&spec, &methods, &cv).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.failed_fits, 0);
        for row in &table.rows {
            assert_eq!(row.replicates.len(), 2);
            assert!(row.mse_mean.is_finite() && row.mse_mean >= 0.0);
            assert!(row.sens_mean.is_some() && row.spec_mean.is_some());
        }
        // HG fuses within every group by construction.
        let hg = table.row(Method::Hg).unwrap();
        assert_eq!(hg.sens_mean, Some(1.0));

        let again = run_experiment(&spec, &methods, &cv).unwrap();
        assert_eq!(again.rows[0].mse_mean, table.rows[0].mse_mean);
        assert_eq!(again.rows[1].mse_mean, table.rows[1].mse_mean);
    }
}
