//! Nearest-neighbour search over the gradient corpus.
//!
//! Two backends share one scoring path: an exact full scan and an inverted
//! file (IVF) whose coarse quantizer is a seeded k-means. Distances are
//! compared squared and only square-rooted when a score is reported, so an
//! IVF query that probes every list returns bit-identical scores to the exact
//! scan.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GroodError, Result};
use crate::matrix::{squared_distance, Matrix};

pub const DEFAULT_NPROBE: usize = 8;
pub const DEFAULT_K: usize = 1;
pub const MAX_NLIST: usize = 4096;
pub const MAX_LLOYD_ITERATIONS: usize = 25;

/// `round(sqrt(n))` clamped to `[1, min(n, 4096)]`.
pub fn default_nlist(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).clamp(1, MAX_NLIST.min(n.max(1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    Exact,
    Ivf,
}

impl fmt::Display for IndexMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexMode::Exact => "exact",
            IndexMode::Ivf => "ivf",
        })
    }
}

impl FromStr for IndexMode {
    type Err = GroodError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(IndexMode::Exact),
            "ivf" => Ok(IndexMode::Ivf),
            _ => Err(GroodError::InvalidParameter(format!("unknown index mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientIndex {
    mode: IndexMode,
    corpus: Matrix,
    centroids: Matrix,
    lists: Vec<Vec<usize>>,
    seed: u64,
}

impl GradientIndex {
    pub fn build_exact(corpus: Matrix) -> Result<Self> {
        if corpus.rows() == 0 {
            return Err(GroodError::Empty("gradient corpus is empty"));
        }
        let d = corpus.cols();
        Ok(Self {
            mode: IndexMode::Exact,
            lists: vec![(0..corpus.rows()).collect()],
            corpus,
            centroids: Matrix::zeros(0, d),
            seed: 0,
        })
    }

    pub fn build_ivf(corpus: Matrix, nlist: usize, seed: u64) -> Result<Self> {
        if corpus.rows() == 0 {
            return Err(GroodError::Empty("gradient corpus is empty"));
        }
        if nlist == 0 || nlist > corpus.rows() {
            return Err(GroodError::InvalidParameter(format!(
                "nlist {nlist} must be in [1, {}]",
                corpus.rows()
            )));
        }
        let (centroids, assignment) = kmeans(&corpus, nlist, seed);
        Self::from_assignment(corpus, centroids, &assignment, seed)
    }

    /// Rebuilds an IVF index from stored centroids and per-row list ids.
    pub fn from_assignment(
        corpus: Matrix,
        centroids: Matrix,
        assignment: &[u32],
        seed: u64,
    ) -> Result<Self> {
        if assignment.len() != corpus.rows() {
            return Err(GroodError::DimensionMismatch(format!(
                "{} list ids for {} corpus rows",
                assignment.len(),
                corpus.rows()
            )));
        }
        if centroids.cols() != corpus.cols() || centroids.rows() == 0 {
            return Err(GroodError::DimensionMismatch(format!(
                "centroids {}x{} for corpus d={}",
                centroids.rows(),
                centroids.cols(),
                corpus.cols()
            )));
        }
        let mut lists = vec![Vec::new(); centroids.rows()];
        for (row, &l) in assignment.iter().enumerate() {
            lists
                .get_mut(l as usize)
                .ok_or_else(|| {
                    GroodError::InvalidParameter(format!("list id {l} out of range"))
                })?
                .push(row);
        }
        Ok(Self {
            mode: IndexMode::Ivf,
            corpus,
            centroids,
            lists,
            seed,
        })
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn corpus(&self) -> &Matrix {
        &self.corpus
    }

    pub fn len(&self) -> usize {
        self.corpus.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.corpus.cols()
    }

    /// Number of inverted lists (1 for the exact index).
    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Inverted-list id of every corpus row.
    pub fn assignment(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.corpus.rows()];
        for (l, rows) in self.lists.iter().enumerate() {
            for &r in rows {
                out[r] = l as u32;
            }
        }
        out
    }

    /// Distance from `query` to its `k`-th nearest corpus row (`k = 1` is the
    /// nearest neighbour). The IVF backend searches the `nprobe` lists with
    /// the closest centroids, widening the probe when those lists hold fewer
    /// than `k` rows.
    pub fn score(&self, query: &[f64], nprobe: usize, k: usize) -> Result<f64> {
        self.score_impl(query, nprobe, k, None)
    }

    /// As [`score`](Self::score), ignoring corpus row `exclude`. Used when a
    /// corpus member is scored against the rest of the corpus.
    pub fn score_excluding(
        &self,
        query: &[f64],
        nprobe: usize,
        k: usize,
        exclude: usize,
    ) -> Result<f64> {
        self.score_impl(query, nprobe, k, Some(exclude))
    }

    pub fn score_batch(&self, queries: &Matrix, nprobe: usize, k: usize) -> Result<Vec<f64>> {
        self.check_query_params(queries.cols(), nprobe, k, None)?;
        let one = |i: usize| self.kth_squared(queries.row(i), nprobe, k, None).sqrt();
        #[cfg(feature = "parallel")]
        let out = (0..queries.rows()).into_par_iter().map(one).collect();
        #[cfg(not(feature = "parallel"))]
        let out = (0..queries.rows()).map(one).collect();
        Ok(out)
    }

    /// Scores every corpus row against the rest of the corpus.
    pub fn score_corpus_leave_one_out(&self, nprobe: usize, k: usize) -> Result<Vec<f64>> {
        self.check_query_params(self.dim(), nprobe, k, Some(0))?;
        let one = |i: usize| {
            self.kth_squared(self.corpus.row(i), nprobe, k, Some(i))
                .sqrt()
        };
        #[cfg(feature = "parallel")]
        let out = (0..self.len()).into_par_iter().map(one).collect();
        #[cfg(not(feature = "parallel"))]
        let out = (0..self.len()).map(one).collect();
        Ok(out)
    }

    fn score_impl(
        &self,
        query: &[f64],
        nprobe: usize,
        k: usize,
        exclude: Option<usize>,
    ) -> Result<f64> {
        self.check_query_params(query.len(), nprobe, k, exclude)?;
        Ok(self.kth_squared(query, nprobe, k, exclude).sqrt())
    }

    fn check_query_params(
        &self,
        dim: usize,
        nprobe: usize,
        k: usize,
        exclude: Option<usize>,
    ) -> Result<()> {
        if dim != self.dim() {
            return Err(GroodError::DimensionMismatch(format!(
                "query d={dim}, corpus d={}",
                self.dim()
            )));
        }
        let available = self.len() - usize::from(exclude.is_some());
        if k == 0 || k > available {
            return Err(GroodError::InvalidParameter(format!(
                "k={k} must be in [1, {available}]"
            )));
        }
        if self.mode == IndexMode::Ivf && (nprobe == 0 || nprobe > self.nlist()) {
            return Err(GroodError::InvalidParameter(format!(
                "nprobe={nprobe} must be in [1, {}]",
                self.nlist()
            )));
        }
        Ok(())
    }

    fn kth_squared(&self, query: &[f64], nprobe: usize, k: usize, exclude: Option<usize>) -> f64 {
        let mut best = KSmallest::new(k);
        match self.mode {
            IndexMode::Exact => {
                for (i, row) in self.corpus.iter_rows().enumerate() {
                    if Some(i) != exclude {
                        best.push(squared_distance(query, row));
                    }
                }
            }
            IndexMode::Ivf => {
                let order = nearest_centroids(&self.centroids, query);
                for (probed, &list) in order.iter().enumerate() {
                    if probed >= nprobe && best.is_full() {
                        break;
                    }
                    for &i in &self.lists[list] {
                        if Some(i) != exclude {
                            best.push(squared_distance(query, self.corpus.row(i)));
                        }
                    }
                }
            }
        }
        best.kth()
    }
}

/// Keeps the `k` smallest values pushed so far, sorted ascending.
struct KSmallest {
    k: usize,
    values: Vec<f64>,
}

impl KSmallest {
    fn new(k: usize) -> Self {
        Self {
            k,
            values: Vec::with_capacity(k + 1),
        }
    }

    fn is_full(&self) -> bool {
        self.values.len() == self.k
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if self.is_full() && v >= self.values[self.k - 1] {
            return;
        }
        let at = self.values.partition_point(|&x| x <= v);
        self.values.insert(at, v);
        self.values.truncate(self.k);
    }

    fn kth(&self) -> f64 {
        debug_assert!(self.is_full());
        self.values[self.k - 1]
    }
}

/// Centroid ids by increasing distance from `query`, ties by lower id.
fn nearest_centroids(centroids: &Matrix, query: &[f64]) -> Vec<usize> {
    let d: Vec<f64> = centroids
        .iter_rows()
        .map(|c| squared_distance(query, c))
        .collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

fn nearest_centroid(centroids: &Matrix, x: &[f64]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

fn assign_all(data: &Matrix, centroids: &Matrix) -> Vec<u32> {
    let one = |i: usize| nearest_centroid(centroids, data.row(i)).0;
    #[cfg(feature = "parallel")]
    let out = (0..data.rows()).into_par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    let out = (0..data.rows()).map(one).collect();
    out
}

/// k-means++ seeding.
fn kmeans_plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut min_d: Vec<f64> = data
        .iter_rows()
        .map(|r| squared_distance(r, data.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = min_d.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the accumulated total
            pick.unwrap_or_else(|| min_d.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        let c = data.row(next);
        for (m, r) in min_d.iter_mut().zip(data.iter_rows()) {
            *m = m.min(squared_distance(r, c));
        }
    }
    data.select_rows(&chosen)
}

/// Seeded k-means: k-means++ initialisation, at most
/// [`MAX_LLOYD_ITERATIONS`] Lloyd steps, empty clusters re-seeded from the
/// point farthest from the centroid of the largest cluster. The returned
/// assignment is nearest-centroid with respect to the returned centroids.
pub fn kmeans(data: &Matrix, k: usize, seed: u64) -> (Matrix, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(data, k, &mut rng);
    let d = data.cols();
    let mut assignment = assign_all(data, &centroids);
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (row, &a) in data.iter_rows().zip(&assignment) {
            let a = a as usize;
            counts[a] += 1;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(row) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = counts[j] as f64;
                for (c, s) in centroids.row_mut(j).iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *c = s / inv;
                }
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                split_largest(data, &mut centroids, &mut assignment, &mut counts, j);
            }
        }
        let next = assign_all(data, &centroids);
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }
    (centroids, assignment)
}

fn split_largest(
    data: &Matrix,
    centroids: &mut Matrix,
    assignment: &mut [u32],
    counts: &mut [usize],
    empty: usize,
) {
    let largest = (0..counts.len())
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
        .expect("k >= 1");
    if counts[largest] < 2 {
        return;
    }
    let center = centroids.row(largest).to_vec();
    let far = assignment
        .iter()
        .enumerate()
        .filter(|(_, &a)| a as usize == largest)
        .map(|(i, _)| (i, squared_distance(data.row(i), &center)))
        .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
        .0;
    centroids.row_mut(empty).copy_from_slice(data.row(far));
    assignment[far] = empty as u32;
    counts[largest] -= 1;
    counts[empty] = 1;
}

/// Nearest-rank threshold such that at least `target_tpr` of the ID scores
/// fall at or below it.
pub fn calibrate_threshold(id_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(GroodError::InvalidParameter(format!(
            "target TPR {target_tpr} outside (0, 1]"
        )));
    }
    crate::quantile::nearest_rank_quantile(id_scores, target_tpr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Id,
    Ood,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Id => "ID",
            Verdict::Ood => "OOD",
        })
    }
}

/// Level-set rule: ID exactly when `score <= tau`.
pub fn classify(scores: &[f64], tau: f64) -> Vec<Verdict> {
    scores
        .iter()
        .map(|&s| if s <= tau { Verdict::Id } else { Verdict::Ood })
        .collect()
}

/// Per-sample scores with their threshold and verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub tau: f64,
    pub verdicts: Vec<Verdict>,
}

impl ScoreReport {
    pub fn new(scores: Vec<f64>, tau: f64) -> Self {
        let verdicts = classify(&scores, tau);
        Self {
            scores,
            tau,
            verdicts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_row_corpus() {
        let idx = GradientIndex::build_exact(pts(&[[1.0, 1.0]])).unwrap();
        assert_eq!(idx.score(&[4.0, 5.0], 1, 1).unwrap(), 5.0);
        assert_eq!(idx.score(&[1.0, 1.0], 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn kth_neighbour() {
        let idx = GradientIndex::build_exact(pts(&[[0.0, 0.0], [3.0, 4.0]])).unwrap();
        assert_eq!(idx.score(&[0.0, 0.0], 1, 2).unwrap(), 5.0);
        assert!(idx.score(&[0.0, 0.0], 1, 3).is_err());
        assert_eq!(idx.score_excluding(&[0.0, 0.0], 1, 1, 0).unwrap(), 5.0);
    }

    #[test]
    fn empty_corpus_and_bad_nlist() {
        assert!(GradientIndex::build_exact(Matrix::zeros(0, 2)).is_err());
        assert!(GradientIndex::build_ivf(pts(&[[0.0, 0.0]]), 2, 0).is_err());
    }

    #[test]
    fn one_list_holds_everything() {
        let data = pts(&[[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]);
        let idx = GradientIndex::build_ivf(data, 1, 3).unwrap();
        assert_eq!(idx.lists(), &[vec![0, 1, 2]]);
    }

    #[test]
    fn probe_widens_when_lists_are_short() {
        let data = pts(&[[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]]);
        let idx = GradientIndex::build_ivf(data, 2, 1).unwrap();
        // each list has two rows; k = 3 forces a second list into the probe
        let s = idx.score(&[0.0, 0.0], 1, 3).unwrap();
        assert_eq!(s, 10.0);
    }

    #[test]
    fn thresholds_and_verdicts() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&s, 0.95).unwrap(), 95.0);
        assert_eq!(calibrate_threshold(&s, 1.0).unwrap(), 100.0);
        assert_eq!(calibrate_threshold(&[2.5; 7], 0.5).unwrap(), 2.5);
        assert!(calibrate_threshold(&s, 0.0).is_err());
        assert_eq!(
            classify(&[1.0, 1.0 + 1e-12], 1.0),
            vec![Verdict::Id, Verdict::Ood]
        );
        assert!(classify(&[], 1.0).is_empty());
    }

    #[test]
    fn default_nlist_clamps() {
        assert_eq!(default_nlist(1), 1);
        assert_eq!(default_nlist(10_000), 100);
        assert_eq!(default_nlist(50_000_000), 4096);
    }
}
