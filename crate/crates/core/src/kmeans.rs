//! Seeded k-means with k-means++ initialization and best-of-`n_init`
//! restarts.
//!
//! Every restart draws from its own `Pcg32` (`Lcg64Xsh32`, 64-bit state)
//! seeded with `seed + restart`. Inputs are f32; all distances and sums are
//! accumulated in f64 in a fixed order, so the result does not depend on the
//! number of worker threads.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg32;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{read_json, write_json, Emb1, EmbeddingSet};
use crate::error::{Error, Result};

/// Rows per parallel work item in the assignment step.
const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
    /// Relative tolerance on the squared centroid shift, scaled by the mean
    /// per-feature variance of the data.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            n_init: 10,
            max_iter: 300,
            tol: 1e-4,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.k > n {
            return Err(Error::Config(format!(
                "k = {} exceeds the number of samples ({n})",
                self.k
            )));
        }
        if self.n_init == 0 || self.max_iter == 0 {
            return Err(Error::Config("n_init and max_iter must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Centroids and the partition of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    pub seed: u64,
    pub n_iter: usize,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Row indices of the members of cluster `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a as usize == j)
            .map(|(i, _)| i)
            .collect()
    }

    /// Members of every cluster, computed in one pass.
    pub fn all_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a as usize].push(i);
        }
        out
    }

    /// Nearest centroid by squared L2, ties to the lowest index.
    pub fn assign(&self, query: &[f32]) -> Result<usize> {
        if query.len() != self.dim {
            return Err(Error::shape(self.dim, query.len()));
        }
        Ok(nearest(query, &self.centroids, self.dim).0)
    }

    pub fn save(&self, json_path: &Path, emb_path: &Path, fingerprint: Option<&str>) -> Result<()> {
        Emb1 {
            rows: self.k,
            dim: self.dim,
            vectors: self.centroids.clone(),
            labels: None,
        }
        .write(emb_path)?;
        write_json(
            json_path,
            &ClusterModelFile {
                fingerprint: fingerprint.map(str::to_owned),
                k: self.k,
                seed: self.seed,
                inertia: self.inertia,
                n_iter: self.n_iter,
                assignments: self.assignments.clone(),
            },
        )
    }

    pub fn load(json_path: &Path, emb_path: &Path) -> Result<Self> {
        let file: ClusterModelFile = read_json(json_path)?;
        let raw = Emb1::read(emb_path)?;
        if raw.rows != file.k {
            return Err(Error::shape(file.k, raw.rows));
        }
        if let Some(&bad) = file.assignments.iter().find(|&&a| a as usize >= file.k) {
            return Err(Error::Validation(format!(
                "{}: assignment {bad} out of range for k = {}",
                json_path.display(),
                file.k
            )));
        }
        Ok(Self {
            k: file.k,
            dim: raw.dim,
            centroids: raw.vectors,
            assignments: file.assignments,
            inertia: file.inertia,
            seed: file.seed,
            n_iter: file.n_iter,
        })
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ClusterModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) fingerprint: Option<String>,
    k: usize,
    seed: u64,
    inertia: f64,
    n_iter: usize,
    assignments: Vec<u32>,
}

/// Squared Euclidean distance in f64. Eight interleaved partial sums are
/// combined in a fixed order, so the result is reproducible and the loop
/// vectorizes.
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            let d = f64::from(x[l]) - f64::from(y[l]);
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        let d = f64::from(x) - f64::from(y);
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Index and squared distance of the nearest row of `points` to `query`.
/// Ties go to the lowest index.
pub(crate) fn nearest(query: &[f32], points: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, p) in points.chunks_exact(dim).enumerate() {
        let d = sq_dist(query, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Result of a single Lloyd run from one k-means++ seeding.
#[derive(Clone, Debug)]
pub struct LloydRun {
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    /// Inertia after each assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub n_iter: usize,
}

/// Fits k-means to a row-major matrix; returns the lowest-inertia restart.
pub fn fit_kmeans_rows(data: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<ClusterModel> {
    if dim == 0 || data.is_empty() || data.len() % dim != 0 {
        return Err(Error::Precondition("k-means needs a non-empty n x d matrix".into()));
    }
    let n = data.len() / dim;
    cfg.validate(n)?;
    let tol = cfg.tol * mean_feature_variance(data, dim);

    let mut best: Option<LloydRun> = None;
    for restart in 0..cfg.n_init {
        let run = lloyd_run(data, dim, cfg.k, cfg.seed.wrapping_add(restart as u64), cfg.max_iter, tol);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("n_init is positive");
    Ok(ClusterModel {
        k: cfg.k,
        dim,
        centroids: best.centroids,
        assignments: best.assignments,
        inertia: best.inertia,
        seed: cfg.seed,
        n_iter: best.n_iter,
    })
}

/// Clusters all rows of one domain.
pub fn fit_kmeans(set: &EmbeddingSet, cfg: &KMeansConfig) -> Result<ClusterModel> {
    fit_kmeans_rows(set.vectors(), set.dim(), cfg)
}

pub fn mean_feature_variance(data: &[f32], dim: usize) -> f64 {
    let n = (data.len() / dim) as f64;
    let mut mean = vec![0.0f64; dim];
    for row in data.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = 0.0;
    for row in data.chunks_exact(dim) {
        for (m, &x) in mean.iter().zip(row) {
            let d = f64::from(x) - m;
            var += d * d;
        }
    }
    var / n / dim as f64
}

/// k-means++: the first center is uniform over rows, each later one is drawn
/// with probability proportional to the squared distance to the nearest
/// center chosen so far.
pub fn kmeans_plus_plus(data: &[f32], dim: usize, k: usize, rng: &mut Pcg32) -> Vec<usize> {
    let n = data.len() / dim;
    let mut chosen = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen.push(first);
    let mut closest: Vec<f64> = data
        .chunks_exact(dim)
        .map(|row| sq_dist(row, &data[first * dim..(first + 1) * dim]))
        .collect();
    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in closest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the final partial sum.
            pick.unwrap_or_else(|| closest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        chosen.push(pick);
        let center = &data[pick * dim..(pick + 1) * dim];
        for (c, row) in closest.iter_mut().zip(data.chunks_exact(dim)) {
            *c = c.min(sq_dist(row, center));
        }
    }
    chosen
}

/// Nearest-centroid labels and distances; parallel over fixed row chunks.
fn assign_all(data: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, Vec<f64>) {
    let parts: Vec<(Vec<u32>, Vec<f64>)> = data
        .par_chunks(CHUNK_ROWS * dim)
        .map(|chunk| {
            chunk
                .chunks_exact(dim)
                .map(|row| {
                    let (j, d) = nearest(row, centroids, dim);
                    (j as u32, d)
                })
                .unzip()
        })
        .collect();
    let mut labels = Vec::with_capacity(data.len() / dim);
    let mut dists = Vec::with_capacity(data.len() / dim);
    for (l, d) in parts {
        labels.extend(l);
        dists.extend(d);
    }
    (labels, dists)
}

/// Moves the farthest points into empty clusters.
///
/// Candidates are ordered by squared distance to their centroid, largest
/// first with ties to the lowest row; a point is never taken from a cluster
/// it is the last member of.
fn fill_empty_clusters(labels: &mut [u32], dists: &mut [f64], k: usize) -> bool {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l as usize] += 1;
    }
    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if empty.is_empty() {
        return false;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut candidates = order.into_iter();
    for j in empty {
        let i = candidates
            .by_ref()
            .find(|&i| counts[labels[i] as usize] > 1)
            .expect("k <= n leaves a donor for every empty cluster");
        counts[labels[i] as usize] -= 1;
        counts[j] += 1;
        labels[i] = j as u32;
        dists[i] = 0.0;
    }
    true
}

fn update_centroids(data: &[f32], dim: usize, labels: &[u32], k: usize) -> Vec<f32> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (row, &l) in data.chunks_exact(dim).zip(labels) {
        let l = l as usize;
        counts[l] += 1;
        for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row) {
            *s += f64::from(x);
        }
    }
    sums.chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |&v| (v / c as f64) as f32))
        .collect()
}

fn inertia_of(data: &[f32], dim: usize, centroids: &[f32], labels: &[u32]) -> f64 {
    data.chunks_exact(dim)
        .zip(labels)
        .map(|(row, &l)| sq_dist(row, &centroids[l as usize * dim..(l as usize + 1) * dim]))
        .sum()
}

/// One Lloyd run from a k-means++ seeding drawn with `seed`.
///
/// `tol` is absolute: the run stops when the squared Frobenius norm of the
/// centroid shift falls to `tol` or below, or when the labels stop changing.
pub fn lloyd_run(data: &[f32], dim: usize, k: usize, seed: u64, max_iter: usize, tol: f64) -> LloydRun {
    let mut rng = Pcg32::seed_from_u64(seed);
    let seeds = kmeans_plus_plus(data, dim, k, &mut rng);
    let mut centroids: Vec<f32> = seeds
        .iter()
        .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
        .collect();

    let (mut labels, mut dists) = assign_all(data, dim, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut n_iter = 0;
    for _ in 0..max_iter {
        fill_empty_clusters(&mut labels, &mut dists, k);
        let next = update_centroids(data, dim, &labels, k);
        let shift = sq_dist(&next, &centroids);
        centroids = next;
        let (next_labels, next_dists) = assign_all(data, dim, &centroids);
        history.push(next_dists.iter().sum());
        n_iter += 1;
        let unchanged = next_labels == labels;
        labels = next_labels;
        dists = next_dists;
        if unchanged || shift <= tol {
            break;
        }
    }
    if fill_empty_clusters(&mut labels, &mut dists, k) {
        centroids = update_centroids(data, dim, &labels, k);
    }
    let inertia = inertia_of(data, dim, &centroids, &labels);
    LloydRun {
        centroids,
        assignments: labels,
        inertia,
        inertia_history: history,
        n_iter,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_point_its_own_cluster() {
        let data = [0.0f32, 0.0, 5.0, 1.0, -3.0, 2.0, 7.0, 7.0];
        let model = fit_kmeans_rows(&data, 2, &KMeansConfig::new(4, 3)).unwrap();
        assert_eq!(model.inertia, 0.0);
        let mut seen = model.assignments.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        for (i, &a) in model.assignments.iter().enumerate() {
            assert_eq!(model.centroid(a as usize), &data[2 * i..2 * i + 2]);
        }
    }

    #[test]
    fn config_errors() {
        let data = [0.0f32, 1.0, 2.0];
        assert!(matches!(
            fit_kmeans_rows(&data, 1, &KMeansConfig::new(0, 0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            fit_kmeans_rows(&data, 1, &KMeansConfig::new(4, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn assign_ties_to_lowest_index() {
        let model = ClusterModel {
            k: 6,
            dim: 1,
            centroids: vec![10.0, 20.0, -1.0, 30.0, 40.0, 1.0],
            assignments: vec![0, 1, 2, 3, 4, 5],
            inertia: 0.0,
            seed: 0,
            n_iter: 0,
        };
        assert_eq!(model.assign(&[0.0]).unwrap(), 2);
        assert_eq!(model.assign(&[30.0]).unwrap(), 3);
        assert!(matches!(model.assign(&[0.0, 1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn empty_cluster_gets_farthest_point() {
        let mut labels = vec![0, 0, 0, 1];
        let mut dists = vec![1.0, 9.0, 9.0, 0.0];
        assert!(fill_empty_clusters(&mut labels, &mut dists, 3));
        assert_eq!(labels, vec![0, 2, 0, 1]);
        // A singleton cluster is never emptied.
        let mut labels = vec![0, 1, 1];
        let mut dists = vec![50.0, 1.0, 2.0];
        fill_empty_clusters(&mut labels, &mut dists, 3);
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let data = [1.0f32; 6];
        let model = fit_kmeans_rows(&data, 1, &KMeansConfig::new(3, 9)).unwrap();
        for j in 0..3 {
            assert!(!model.members(j).is_empty());
        }
        assert_eq!(model.inertia, 0.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..40).map(|i| (i % 7) as f32 * 0.5).collect();
        let model = fit_kmeans_rows(&data, 2, &KMeansConfig::new(3, 11)).unwrap();
        let (j, e) = (dir.path().join("c.json"), dir.path().join("c.emb"));
        model.save(&j, &e, Some("abc")).unwrap();
        assert_eq!(ClusterModel::load(&j, &e).unwrap(), model);
    }
}
