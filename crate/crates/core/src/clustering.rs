//! Low-rank projector fitting, model similarity, and cluster assignment.

use std::collections::HashMap;

use log::warn;
use nalgebra::DMatrix;

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{mean_loss, ParamVec};
use crate::par;
use crate::vecops::{argmax, argmin, dot, norm, sq_dist};

/// Linear map from parameter space to a `D`-dimensional space, stored as
/// `D` orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RankProjector {
    rows: Vec<Vec<f64>>,
    singular_values: Vec<f64>,
    fitted_from: Vec<usize>,
    rank_deficient: bool,
}

impl RankProjector {
    pub fn rank(&self) -> usize {
        self.rows.len()
    }

    pub fn input_dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Leading singular values of the stacked fit matrix, descending.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Device ids whose models were stacked for the fit.
    pub fn fitted_from(&self) -> &[usize] {
        &self.fitted_from
    }

    /// True when the fit matrix had rank below `D` and some rows are
    /// arbitrary orthonormal padding.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }
}

/// Fits the projector from the top-`d` right singular vectors of the
/// uncentered matrix whose rows are `models`.
///
/// Each row is sign-fixed so its largest-magnitude entry is positive.
pub fn fit_projector(models: &[&[f64]], fitted_from: Vec<usize>, d: usize) -> Result<RankProjector> {
    let n = models.len();
    if n < 2 {
        return Err(Error::input(format!("projector fit needs at least 2 models, got {n}")));
    }
    let dim = models[0].len();
    if let Some(bad) = models.iter().find(|m| m.len() != dim) {
        return Err(Error::DimensionMismatch {
            context: "projector fit models",
            expected: dim,
            found: bad.len(),
        });
    }
    if d == 0 || d > n.min(dim) {
        return Err(Error::input(format!(
            "low-rank dimension {d} must lie in [1, min({n}, {dim})]"
        )));
    }

    let stacked = DMatrix::from_fn(n, dim, |i, j| models[i][j]);
    let svd = stacked.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let sigma_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = sigma_max * (n.max(dim) as f64) * f64::EPSILON;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut singular_values = Vec::with_capacity(d);
    for &idx in order.iter().take(d) {
        let s = svd.singular_values[idx];
        if s <= tol || s == 0.0 {
            break;
        }
        rows.push(v_t.row(idx).iter().copied().collect());
        singular_values.push(s);
    }

    let rank_deficient = rows.len() < d;
    if rank_deficient {
        warn!(
            "projector fit matrix has rank {} < D = {d}; padding with orthonormal complement",
            rows.len()
        );
        let mut candidate = 0;
        while rows.len() < d {
            let mut v = vec![0.0; dim];
            v[candidate % dim] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for r in &rows {
                    let c = dot(&v, r);
                    v.iter_mut().zip(r).for_each(|(x, ri)| *x -= c * ri);
                }
            }
            let len = norm(&v);
            if len > 0.5 {
                v.iter_mut().for_each(|x| *x /= len);
                rows.push(v);
                singular_values.push(0.0);
            }
        }
    }

    for row in &mut rows {
        let lead = argmax(&row.iter().map(|x| x.abs()).collect::<Vec<_>>());
        if row[lead] < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(RankProjector {
        rows,
        singular_values,
        fitted_from,
        rank_deficient,
    })
}

/// Inner products of `w` with the projector rows.
pub fn project(proj: &RankProjector, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != proj.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "projector input",
            expected: proj.input_dim(),
            found: w.len(),
        });
    }
    Ok(proj.rows.iter().map(|r| dot(r, w)).collect())
}

/// Cosine similarity; a zero vector yields 0 with a warning.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        warn!("cosine similarity of a zero vector treated as 0");
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn neg_l2_sim(a: &[f64], b: &[f64]) -> f64 {
    -sq_dist(a, b).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    /// Cosine between projected models.
    LowRankCosine,
    FullCosine,
    NegL2,
    /// Device-side loss of each center; lower is closer.
    EmpiricalRisk,
}

impl SimilarityKind {
    /// Vector similarity for the parameter-based kinds.
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            SimilarityKind::LowRankCosine | SimilarityKind::FullCosine => cosine_sim(a, b),
            SimilarityKind::NegL2 => neg_l2_sim(a, b),
            SimilarityKind::EmpiricalRisk => {
                panic!("empirical risk is evaluated on device data, not parameter vectors")
            }
        }
    }
}

/// Device-by-center similarity matrix, rows computed in parallel.
pub fn similarity_matrix(kind: SimilarityKind, devices: &[&[f64]], centers: &[&[f64]]) -> Vec<Vec<f64>> {
    par::map(devices, |d| centers.iter().map(|c| kind.score(d, c)).collect())
}

/// Binary device-to-cluster matrix with exactly one 1 per row, stored as
/// the column index of that 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    labels: Vec<usize>,
    clusters: usize,
}

impl AssignmentMatrix {
    pub fn new(labels: Vec<usize>, clusters: usize) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::input("assignment needs at least one cluster"));
        }
        if let Some(&bad) = labels.iter().find(|&&k| k >= clusters) {
            return Err(Error::input(format!("cluster {bad} outside [0, {clusters})")));
        }
        Ok(Self { labels, clusters })
    }

    /// Every device in cluster 0.
    pub fn single(m: usize, clusters: usize) -> Self {
        Self {
            labels: vec![0; m],
            clusters: clusters.max(1),
        }
    }

    pub fn devices(&self) -> usize {
        self.labels.len()
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn cluster_of(&self, device: usize) -> usize {
        self.labels[device]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn set(&mut self, device: usize, cluster: usize) {
        assert!(cluster < self.clusters);
        self.labels[device] = cluster;
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.clusters];
        for &k in &self.labels {
            s[k] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &k)| k == cluster)
            .map(|(i, _)| i)
    }

    /// The dense `m x K` 0/1 form.
    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        self.labels
            .iter()
            .map(|&k| (0..self.clusters).map(|j| u8::from(j == k)).collect())
            .collect()
    }
}

/// Row-wise argmax of an `m x K` similarity matrix, lowest `k` on ties.
pub fn update_assignments(sim: &[Vec<f64>]) -> Result<AssignmentMatrix> {
    let k = sim.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::input("similarity matrix has no columns"));
    }
    let mut labels = Vec::with_capacity(sim.len());
    for (i, row) in sim.iter().enumerate() {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                context: "similarity matrix row",
                expected: k,
                found: row.len(),
            });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::input(format!("non-finite similarity in row {i}")));
        }
        labels.push(argmax(row));
    }
    AssignmentMatrix::new(labels, k)
}

/// Index of the center with the lowest mean training loss on `train`.
pub fn ifca_assign(train: &LabeledSet, centers: &[ParamVec]) -> Result<usize> {
    if centers.is_empty() {
        return Err(Error::input("ifca_assign needs at least one center"));
    }
    let rows = train.all_rows();
    let losses = centers
        .iter()
        .map(|c| mean_loss(c, train, &rows))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin(&losses))
}

/// Picks `k` seed devices: `first`, then repeatedly the device whose best
/// similarity to the seeds so far is lowest (lowest index on ties).
pub fn farthest_point_seeds(kind: SimilarityKind, vectors: &[&[f64]], k: usize, first: usize) -> Vec<usize> {
    let mut seeds = vec![first];
    let mut best: Vec<f64> = vectors.iter().map(|v| kind.score(v, vectors[first])).collect();
    while seeds.len() < k.min(vectors.len()) {
        let next = (0..vectors.len())
            .filter(|i| !seeds.contains(i))
            .min_by(|&a, &b| best[a].partial_cmp(&best[b]).unwrap().then(a.cmp(&b)))
            .unwrap();
        seeds.push(next);
        for (i, v) in vectors.iter().enumerate() {
            best[i] = best[i].max(kind.score(v, vectors[next]));
        }
    }
    seeds
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Degenerate cases where the expected index equals its maximum (for
/// example a single item, or both labelings trivial) score 1.0.
pub fn adjusted_rand_index(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "adjusted rand index labels",
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    let n = predicted.len();
    if n <= 1 {
        return Ok(1.0);
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = a * b / choose2(n);
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rank_one_fit_recovers_direction() {
        let mut v = vec![0.0, -3.0, 4.0];
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        let models = [&v[..], &v[..], &v[..]];
        let p = fit_projector(&models, vec![0, 1, 2], 1).unwrap();
        assert!(!p.rank_deficient());
        let row = &p.rows()[0];
        // largest-magnitude entry (0.8) made positive
        assert!((row[2] - 0.8).abs() < 1e-12 && (row[1] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_fit_pads_orthonormally() {
        let v = [1.0, 1.0, 0.0, 0.0];
        let p = fit_projector(&[&v[..], &v[..]], vec![3, 4], 2).unwrap();
        assert!(p.rank_deficient());
        assert_eq!(p.rank(), 2);
        let r = p.rows();
        assert!(dot(&r[0], &r[1]).abs() < 1e-12);
        assert!((norm(&r[1]) - 1.0).abs() < 1e-12);
        assert_eq!(p.fitted_from(), &[3, 4]);
    }

    #[test]
    fn fit_rejects_bad_dimension() {
        let v = [1.0, 2.0, 3.0];
        assert!(fit_projector(&[&v[..], &v[..]], vec![], 3).is_err());
        assert!(fit_projector(&[&v[..]], vec![], 1).is_err());
        assert!(fit_projector(&[&v[..], &v[..]], vec![], 0).is_err());
    }

    #[test]
    fn projection_isometry_and_orthogonal_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let models: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 30)).collect();
        let refs: Vec<&[f64]> = models.iter().map(Vec::as_slice).collect();
        let p = fit_projector(&refs, (0..5).collect(), 5).unwrap();
        for m in &models {
            let z = project(&p, m).unwrap();
            assert!((norm(&z) - norm(m)).abs() < 1e-9);
        }
        // remove the row-space component to get an orthogonal vector
        let mut w = rand_vec(&mut rng, 30);
        for r in p.rows() {
            let c = dot(&w, r);
            w.iter_mut().zip(r).for_each(|(x, ri)| *x -= c * ri);
        }
        assert!(project(&p, &w).unwrap().iter().all(|z| z.abs() < 1e-12));
        assert!(project(&p, &[1.0]).is_err());
    }

    #[test]
    fn cosine_cases() {
        let v = [1.0, 2.0, -1.0];
        let v3 = [3.0, 6.0, -3.0];
        assert!((cosine_sim(&v, &v) - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&v, &v3) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn neg_l2_cases() {
        let v = [0.3, -0.2];
        assert_eq!(neg_l2_sim(&v, &v), 0.0);
        assert_eq!(neg_l2_sim(&[0.0, 0.0], &[1.0, 0.0]), -1.0);
        let a = [1.0, 2.0, 3.0];
        let b = [4.0, 6.0, 3.0];
        assert_eq!(neg_l2_sim(&a, &b), -5.0);
    }

    #[test]
    fn assignment_tie_break_and_single_cluster() {
        let r = update_assignments(&[vec![0.2, 0.9, 0.9]]).unwrap();
        assert_eq!(r.labels(), &[1]);
        let r = update_assignments(&[vec![0.1], vec![-4.0], vec![0.0]]).unwrap();
        assert_eq!(r.labels(), &[0, 0, 0]);
        assert_eq!(r.to_dense(), vec![vec![1], vec![1], vec![1]]);
        assert!(update_assignments(&[vec![f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0], &[0]).unwrap(), 1.0);
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn farthest_point_spreads_seeds() {
        let pts = [vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let seeds = farthest_point_seeds(SimilarityKind::FullCosine, &refs, 2, 0);
        assert_eq!(seeds, vec![0, 2]);
    }

    proptest! {
        #[test]
        fn assignment_matches_row_scan(vals in proptest::collection::vec(-5i32..5, 12)) {
            let sim: Vec<Vec<f64>> = vals.chunks(3).map(|c| c.iter().map(|&x| x as f64).collect()).collect();
            let r = update_assignments(&sim).unwrap();
            for (i, row) in sim.iter().enumerate() {
                let mut best = 0;
                for k in 0..row.len() {
                    if row[k] > row[best] { best = k; }
                }
                prop_assert_eq!(r.cluster_of(i), best);
            }
            prop_assert_eq!(r.sizes().iter().sum::<usize>(), 4);
        }

        #[test]
        fn projection_is_contraction(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 12)).collect();
            let refs: Vec<&[f64]> = models.iter().map(Vec::as_slice).collect();
            let p = fit_projector(&refs, vec![], 3).unwrap();
            let w = rand_vec(&mut rng, 12);
            prop_assert!(norm(&project(&p, &w).unwrap()) <= norm(&w) + 1e-12);
            for (i, a) in p.rows().iter().enumerate() {
                for (j, b) in p.rows().iter().enumerate() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot(a, b) - expect).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn cosine_argmax_invariant_to_scaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let device = rand_vec(&mut rng, 6);
            let mut centers: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 6)).collect();
            let before = argmax(&centers.iter().map(|c| cosine_sim(&device, c)).collect::<Vec<_>>());
            centers[1].iter_mut().for_each(|x| *x *= scale);
            let after = argmax(&centers.iter().map(|c| cosine_sim(&device, c)).collect::<Vec<_>>());
            prop_assert_eq!(before, after);
        }
    }
}
