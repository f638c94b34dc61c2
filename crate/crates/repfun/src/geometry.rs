//! Condition descriptors and their geometry.
//!
//! Every functional dimension carries a condition vector (electrode
//! position, stimulus parameters, ...). This module computes distances
//! between conditions, the nearest-neighbor map driving the fusion penalty,
//! and partitions of the conditions into groups (explicit labels, k-means,
//! or average-linkage agglomerative clustering).
//!
//! All tie-breaks are by smallest index so results are reproducible across
//! runs and platforms.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::{cnt, cst, Real};

/// Distance used between condition vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// Great-circle (arc length) distance after normalizing both vectors to
    /// the unit sphere. Zero vectors cannot be normalized and are rejected.
    GreatCircle,
}

/// The `p` condition vectors, one per functional dimension, as rows.
#[derive(Debug, Clone)]
pub struct ConditionSet<T: Real> {
    coords: DMatrix<T>,
}

impl<T: Real> ConditionSet<T> {
    pub fn new(coords: DMatrix<T>) -> Result<Self> {
        if coords.nrows() < 2 {
            return Err(Error::param("need at least two conditions"));
        }
        if coords.ncols() == 0 {
            return Err(Error::param("condition vectors must have at least one coordinate"));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("condition coordinates must be finite"));
        }
        Ok(ConditionSet { coords })
    }

    pub fn p(&self) -> usize {
        self.coords.nrows()
    }

    /// Coordinate dimension of the condition space.
    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> &DMatrix<T> {
        &self.coords
    }

    pub fn distance(&self, i: usize, j: usize, metric: Metric) -> Result<T> {
        let a = self.coords.row(i);
        let b = self.coords.row(j);
        match metric {
            Metric::Euclidean => Ok((a - b).norm()),
            Metric::GreatCircle => {
                let na = a.norm();
                let nb = b.norm();
                if na == T::zero() || nb == T::zero() {
                    return Err(Error::param(
                        "great-circle distance undefined for zero condition vectors",
                    ));
                }
                let cos = (a.dot(&b) / (na * nb)).clamp(-T::one(), T::one());
                Ok(cos.acos())
            }
        }
    }

    /// Full symmetric distance matrix.
    pub fn pairwise(&self, metric: Metric) -> Result<DMatrix<T>> {
        let p = self.p();
        let mut out = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in (i + 1)..p {
                let d = self.distance(i, j, metric)?;
                out[(i, j)] = d;
                out[(j, i)] = d;
            }
        }
        Ok(out)
    }
}

/// The 1-nearest-neighbor map `v`: `v[j]` is the condition closest to `j`
/// (itself excluded). Ties go to the smallest index and are recorded.
#[derive(Debug, Clone)]
pub struct NeighborMap {
    v: Vec<usize>,
    ties: Vec<usize>,
}

impl NeighborMap {
    pub fn p(&self) -> usize {
        self.v.len()
    }

    /// Neighbor of dimension `j`.
    pub fn neighbor(&self, j: usize) -> usize {
        self.v[j]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.v
    }

    /// Dimensions whose nearest neighbor was decided by a tie-break.
    pub fn ties(&self) -> &[usize] {
        &self.ties
    }

    /// Members of two-cycles: `j` such that `v(v(j)) == j`.
    pub fn two_cycle_members(&self) -> Vec<usize> {
        (0..self.v.len()).filter(|&j| self.v[self.v[j]] == j).collect()
    }

    /// The two-cycles as pairs `(i, v(i))` with `i < v(i)`.
    pub fn two_cycles(&self) -> Vec<(usize, usize)> {
        self.two_cycle_members().into_iter().filter(|&j| j < self.v[j]).map(|j| (j, self.v[j])).collect()
    }
}

/// Computes the 1-nearest-neighbor map under `metric`.
pub fn nearest_neighbor_map<T: Real>(
    conditions: &ConditionSet<T>,
    metric: Metric,
) -> Result<NeighborMap> {
    let p = conditions.p();
    let dist = conditions.pairwise(metric)?;
    let mut v = Vec::with_capacity(p);
    let mut ties = Vec::new();
    for j in 0..p {
        let mut best = usize::MAX;
        let mut best_d = T::zero();
        let mut tied = false;
        for i in 0..p {
            if i == j {
                continue;
            }
            let d = dist[(j, i)];
            if best == usize::MAX || d < best_d {
                best = i;
                best_d = d;
                tied = false;
            } else if d == best_d {
                tied = true;
            }
        }
        if tied {
            ties.push(j);
        }
        v.push(best);
    }
    Ok(NeighborMap { v, ties })
}

/// A partition of the `p` dimensions into `K` groups.
///
/// Group ids are normalized to first-occurrence order: scanning dimensions
/// `0..p`, the first dimension seen gets group 0, the next unseen label gets
/// group 1, and so on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionGrouping {
    labels: Vec<usize>,
    k: usize,
}

impl ConditionGrouping {
    /// Builds a grouping from raw labels (any usize values; relabeled).
    pub fn from_labels(raw: &[usize]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::param("grouping needs at least one dimension"));
        }
        let mut seen: Vec<usize> = Vec::new();
        let mut labels = Vec::with_capacity(raw.len());
        for &l in raw {
            let id = match seen.iter().position(|&s| s == l) {
                Some(pos) => pos,
                None => {
                    seen.push(l);
                    seen.len() - 1
                }
            };
            labels.push(id);
        }
        Ok(ConditionGrouping { labels, k: seen.len() })
    }

    pub fn p(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Member lists per group, each ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (dim, &g) in self.labels.iter().enumerate() {
            out[g].push(dim);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.k];
        for &g in &self.labels {
            out[g] += 1;
        }
        out
    }
}

/// Seeded k-means (k-means++ initialization, Lloyd iterations, 10 restarts,
/// best inertia kept). Conditions are clustered in Euclidean geometry since
/// cluster means live in the ambient coordinate space.
pub fn kmeans_groups<T: Real>(
    conditions: &ConditionSet<T>,
    k: usize,
    seed: u64,
) -> Result<ConditionGrouping> {
    let p = conditions.p();
    if k == 0 || k > p {
        return Err(Error::param(format!("k = {k} must be in 1..={p}")));
    }
    let coords = conditions.coords();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(T, Vec<usize>)> = None;

    'restart: for _ in 0..10 {
        // k-means++ seeding.
        let mut centers: Vec<DVector<T>> = Vec::with_capacity(k);
        centers.push(coords.row(rng.gen_range(0..p)).transpose());
        while centers.len() < k {
            let d2: Vec<T> = (0..p)
                .map(|i| {
                    centers
                        .iter()
                        .map(|c| (coords.row(i).transpose() - c).norm_squared())
                        .fold(T::max_value().unwrap(), |a, b| a.min(b))
                })
                .collect();
            let total: T = d2.iter().fold(T::zero(), |a, &b| a + b);
            if total <= T::zero() {
                // All points coincide with existing centers; any choice works.
                centers.push(coords.row(rng.gen_range(0..p)).transpose());
                continue;
            }
            let mut target = cst::<T>(rng.gen::<f64>()) * total;
            let mut chosen = p - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            centers.push(coords.row(chosen).transpose());
        }

        let mut assign = vec![0usize; p];
        for _ in 0..100 {
            let mut changed = false;
            for i in 0..p {
                let mut best_c = 0;
                let mut best_d = T::max_value().unwrap();
                for (c, center) in centers.iter().enumerate() {
                    let d = (coords.row(i).transpose() - center).norm_squared();
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if assign[i] != best_c {
                    assign[i] = best_c;
                    changed = true;
                }
            }
            let mut counts = vec![0usize; k];
            for &a in &assign {
                counts[a] += 1;
            }
            if counts.contains(&0) {
                // Empty cluster: abandon this restart.
                continue 'restart;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let mut sum = DVector::zeros(coords.ncols());
                for i in 0..p {
                    if assign[i] == c {
                        sum += coords.row(i).transpose();
                    }
                }
                *center = sum / cnt::<T>(counts[c]);
            }
            if !changed {
                break;
            }
        }

        let inertia = (0..p)
            .map(|i| (coords.row(i).transpose() - &centers[assign[i]]).norm_squared())
            .fold(T::zero(), |a, b| a + b);
        let replace = match &best {
            None => true,
            Some((best_inertia, _)) => inertia < *best_inertia,
        };
        if replace {
            best = Some((inertia, assign));
        }
    }

    let (_, assign) = best.ok_or_else(|| {
        Error::numerical("k-means failed to produce a partition without empty clusters")
    })?;
    ConditionGrouping::from_labels(&assign)
}

/// Agglomerative clustering with average linkage, cut at `k` groups.
///
/// Cluster dissimilarity is the unweighted mean of all cross pairs. Merge
/// ties are broken by the lexicographically smallest pair of cluster
/// representatives (smallest original member index).
pub fn agglomerative_groups<T: Real>(
    conditions: &ConditionSet<T>,
    k: usize,
    metric: Metric,
) -> Result<ConditionGrouping> {
    let p = conditions.p();
    if k == 0 || k > p {
        return Err(Error::param(format!("k = {k} must be in 1..={p}")));
    }
    let dist = conditions.pairwise(metric)?;
    // Active clusters as sorted member lists, keyed by smallest member.
    let mut clusters: Vec<Vec<usize>> = (0..p).map(|i| vec![i]).collect();
    while clusters.len() > k {
        let mut best: Option<(T, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut sum = T::zero();
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        sum += dist[(i, j)];
                    }
                }
                let d = sum / cnt::<T>(clusters[a].len() * clusters[b].len());
                let better = match &best {
                    None => true,
                    Some((bd, ba, bb)) => {
                        d < *bd
                            || (d == *bd
                                && (clusters[a][0], clusters[b][0])
                                    < (clusters[*ba][0], clusters[*bb][0]))
                    }
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("at least two clusters remain");
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
        // Keep clusters ordered by their smallest member so tie-breaks are
        // stable as the list shrinks.
        clusters.sort_by_key(|c| c[0]);
    }
    let mut labels = vec![0usize; p];
    for (g, members) in clusters.iter().enumerate() {
        for &i in members {
            labels[i] = g;
        }
    }
    ConditionGrouping::from_labels(&labels)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Eight conditions in the plane arranged so the nearest-neighbor map has
    /// two mutual pairs (0,7) and (3,4) and a hub at 0. Used across the
    /// fusion tests as the canonical small example.
    pub(crate) fn two_cluster_layout() -> ConditionSet<f64> {
        let coords = DMatrix::from_row_slice(
            8,
            2,
            &[
                0.0, 0.0, // 0
                6.0, 2.0, // 1
                6.0, -1.1, // 2
                6.0, 0.0, // 3
                6.0, 0.8, // 4
                -1.5, -0.5, // 5
                1.5, -0.5, // 6
                0.0, 1.0, // 7
            ],
        );
        ConditionSet::new(coords).unwrap()
    }

    #[test]
    fn euclidean_distance_matches_hand_values() {
        let set = two_cluster_layout();
        assert_relative_eq!(set.distance(0, 7, Metric::Euclidean).unwrap(), 1.0);
        assert_relative_eq!(set.distance(3, 4, Metric::Euclidean).unwrap(), 0.8);
        let d = set.pairwise(Metric::Euclidean).unwrap();
        assert_relative_eq!(d, d.transpose(), epsilon = 0.0);
        for i in 0..8 {
            assert_eq!(d[(i, i)], 0.0);
        }
    }

    #[test]
    fn great_circle_distance_basics() {
        let coords = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, -3.0, 0.0]);
        let set = ConditionSet::new(coords).unwrap();
        // Orthogonal directions: quarter circle; radius does not matter.
        assert_relative_eq!(
            set.distance(0, 1, Metric::GreatCircle).unwrap(),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
        // Antipodal.
        assert_relative_eq!(
            set.distance(0, 2, Metric::GreatCircle).unwrap(),
            std::f64::consts::PI,
            epsilon = 1e-12
        );
        let zero = ConditionSet::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0])).unwrap();
        assert!(zero.distance(0, 1, Metric::GreatCircle).is_err());
    }

    #[test]
    fn neighbor_map_on_the_two_cluster_layout() {
        let set = two_cluster_layout();
        let map = nearest_neighbor_map(&set, Metric::Euclidean).unwrap();
        assert_eq!(map.as_slice(), &[7, 4, 3, 4, 3, 0, 0, 0]);
        assert!(map.ties().is_empty());
        assert_eq!(map.two_cycles(), vec![(0, 7), (3, 4)]);
    }

    #[test]
    fn neighbor_ties_break_to_smallest_index() {
        // Three collinear points with 1 equidistant from 0 and 2.
        let coords = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let set = ConditionSet::new(coords).unwrap();
        let map = nearest_neighbor_map(&set, Metric::Euclidean).unwrap();
        assert_eq!(map.neighbor(1), 0);
        assert_eq!(map.ties(), &[1]);
    }

    #[test]
    fn grouping_relabels_by_first_occurrence() {
        let g = ConditionGrouping::from_labels(&[7, 7, 2, 9, 2, 7]).unwrap();
        assert_eq!(g.labels(), &[0, 0, 1, 2, 1, 0]);
        assert_eq!(g.k(), 3);
        assert_eq!(g.groups(), vec![vec![0, 1, 5], vec![2, 4], vec![3]]);
        assert_eq!(g.sizes(), vec![3, 2, 1]);
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        // Two tight clusters far apart; any seed must find them.
        let mut rows = Vec::new();
        for i in 0..6 {
            rows.push(0.1 * i as f64);
            rows.push(0.0);
        }
        for i in 0..5 {
            rows.push(50.0 + 0.1 * i as f64);
            rows.push(3.0);
        }
        let set = ConditionSet::new(DMatrix::from_row_slice(11, 2, &rows)).unwrap();
        for seed in [0u64, 1, 42] {
            let g = kmeans_groups(&set, 2, seed).unwrap();
            assert_eq!(g.labels()[..6], [0, 0, 0, 0, 0, 0]);
            assert_eq!(g.labels()[6..], [1, 1, 1, 1, 1]);
        }
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let set = two_cluster_layout();
        let a = kmeans_groups(&set, 3, 9).unwrap();
        let b = kmeans_groups(&set, 3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn agglomerative_average_linkage_small_case() {
        // 1D points: {0, 1} and {10, 11, 12} separate cleanly at k = 2.
        let set =
            ConditionSet::new(DMatrix::from_row_slice(5, 1, &[0.0, 1.0, 10.0, 11.0, 12.0])).unwrap();
        let g = agglomerative_groups(&set, 2, Metric::Euclidean).unwrap();
        assert_eq!(g.labels(), &[0, 0, 1, 1, 1]);
        // Cutting at p groups returns singletons.
        let g = agglomerative_groups(&set, 5, Metric::Euclidean).unwrap();
        assert_eq!(g.k(), 5);
    }

    #[test]
    fn clustering_rejects_bad_k() {
        let set = two_cluster_layout();
        assert!(kmeans_groups(&set, 0, 0).is_err());
        assert!(kmeans_groups(&set, 9, 0).is_err());
        assert!(agglomerative_groups(&set, 0, Metric::Euclidean).is_err());
        assert!(agglomerative_groups(&set, 9, Metric::Euclidean).is_err());
    }
}
