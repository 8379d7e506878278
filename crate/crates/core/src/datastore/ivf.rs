//! Inverted-file index: a k-means coarse quantizer whose clusters each keep
//! the list of entries assigned to them.

use rand::Rng;
use rayon::prelude::*;

use super::{top_k_in_place, Datastore, DistanceMode, Neighbor};
use crate::error::{Error, Result};
use crate::linalg::squared_l2;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Fit centroids on at most this many sampled entries, then assign all
    /// entries. `None` fits on the whole store.
    pub train_sample: Option<usize>,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 25,
            train_sample: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<Vec<usize>>,
    packed: Option<PackedKeys>,
}

/// Copy of the datastore keys laid out list by list, so that probing a
/// cluster scans contiguous memory.
#[derive(Debug, Clone)]
struct PackedKeys {
    keys: Vec<f32>,
    starts: Vec<usize>,
}

impl PartialEq for IvfIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.centroids == other.centroids && self.lists == other.lists
    }
}

fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(point, cent);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// k-means++ seeding: each new centroid is an entry sampled with probability
/// proportional to its squared distance from the closest centroid so far.
fn seed_centroids(points: &[&[f32]], n_clusters: usize, rng: &mut impl Rng) -> Vec<f32> {
    let dim = points[0].len();
    let mut centroids = Vec::with_capacity(n_clusters * dim);
    centroids.extend_from_slice(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_l2(p, &centroids[..dim]))
        .collect();
    for _ in 1..n_clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let start = centroids.len();
        centroids.extend_from_slice(points[pick]);
        let c = &centroids[start..];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_l2(p, c));
        }
    }
    centroids
}

impl IvfIndex {
    pub fn build(
        store: &Datastore,
        n_clusters: usize,
        seed: u64,
        options: KMeansOptions,
    ) -> Result<Self> {
        if n_clusters < 1 {
            return Err(Error::InvalidArgument("n_clusters must be >= 1".into()));
        }
        if n_clusters > store.len() {
            return Err(Error::InvalidArgument(format!(
                "n_clusters {n_clusters} exceeds datastore size {}",
                store.len()
            )));
        }
        let dim = store.dim();
        let mut rng = seeded(seed);

        let sample: Vec<usize> = match options.train_sample {
            Some(m) if m < store.len() => {
                let m = m.max(n_clusters);
                let mut idx = rand::seq::index::sample(&mut rng, store.len(), m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..store.len()).collect(),
        };
        let points: Vec<&[f32]> = sample.iter().map(|&i| store.key(i)).collect();

        let mut centroids = seed_centroids(&points, n_clusters, &mut rng);
        let mut assign = vec![usize::MAX; points.len()];
        for iter in 0..options.max_iter {
            let next: Vec<usize> = points
                .par_iter()
                .with_min_len(1024)
                .map(|p| nearest(p, &centroids, dim))
                .collect();
            if next == assign {
                log::debug!("k-means converged after {iter} iterations");
                break;
            }
            assign = next;

            let mut sums = vec![0.0f64; n_clusters * dim];
            let mut counts = vec![0usize; n_clusters];
            for (p, &c) in points.iter().zip(&assign) {
                counts[c] += 1;
                for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p.iter()) {
                    *s += x as f64;
                }
            }
            for c in 0..n_clusters {
                // empty clusters keep their previous centroid
                if counts[c] > 0 {
                    let inv = 1.0 / counts[c] as f64;
                    for (dst, &s) in centroids[c * dim..(c + 1) * dim]
                        .iter_mut()
                        .zip(&sums[c * dim..(c + 1) * dim])
                    {
                        *dst = (s * inv) as f32;
                    }
                }
            }
        }

        let final_assign: Vec<usize> = (0..store.len())
            .into_par_iter()
            .with_min_len(1024)
            .map(|i| nearest(store.key(i), &centroids, dim))
            .collect();
        let mut lists = vec![Vec::new(); n_clusters];
        for (i, c) in final_assign.into_iter().enumerate() {
            lists[c].push(i);
        }
        Ok(Self {
            dim,
            centroids,
            lists,
            packed: None,
        })
    }

    pub(crate) fn from_parts(dim: usize, centroids: Vec<f32>, lists: Vec<Vec<usize>>) -> Result<Self> {
        if dim == 0 || lists.is_empty() || centroids.len() != dim * lists.len() {
            return Err(Error::Format(format!(
                "index shape mismatch: dim {dim}, {} centroid floats, {} lists",
                centroids.len(),
                lists.len()
            )));
        }
        let total: usize = lists.iter().map(Vec::len).sum();
        let mut seen = vec![false; total];
        for &i in lists.iter().flatten() {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Format(format!(
                    "index lists are not a partition of 0..{total}"
                )));
            }
        }
        Ok(Self {
            dim,
            centroids,
            lists,
            packed: None,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn entry_count(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    /// Clusters ordered by centroid distance to `q`, ties by cluster id.
    pub fn probe_order(&self, q: &[f32]) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, cent)| (squared_l2(q, cent), c))
            .collect();
        let n = scored.len();
        top_k_in_place(&mut scored, n);
        scored.into_iter().map(|(_, c)| c).collect()
    }

    /// Copies the keys of `store` into list order. Later queries read keys
    /// from this copy instead of the store, which returns the same neighbors
    /// with far fewer cache misses.
    pub fn pack(&mut self, store: &Datastore) -> Result<()> {
        self.check_store(store)?;
        let mut keys = Vec::with_capacity(store.len() * self.dim);
        let mut starts = Vec::with_capacity(self.lists.len() + 1);
        for list in &self.lists {
            starts.push(keys.len() / self.dim);
            for &i in list {
                keys.extend_from_slice(store.key(i));
            }
        }
        starts.push(keys.len() / self.dim);
        self.packed = Some(PackedKeys { keys, starts });
        Ok(())
    }

    pub fn is_packed(&self) -> bool {
        self.packed.is_some()
    }

    fn check_store(&self, store: &Datastore) -> Result<()> {
        if store.dim() != self.dim || store.len() != self.entry_count() {
            return Err(Error::InvalidArgument(format!(
                "index ({} entries, dim {}) does not match datastore ({} entries, dim {})",
                self.entry_count(),
                self.dim,
                store.len(),
                store.dim()
            )));
        }
        Ok(())
    }

    /// Exact search restricted to the `n_probe` clusters nearest to `q`.
    pub fn query(
        &self,
        store: &Datastore,
        q: &[f32],
        k: usize,
        n_probe: usize,
        mode: DistanceMode,
    ) -> Result<Vec<Neighbor>> {
        store.check_query(q, k)?;
        self.check_store(store)?;
        if n_probe < 1 || n_probe > self.n_clusters() {
            return Err(Error::InvalidArgument(format!(
                "n_probe must be in 1..={}, got {n_probe}",
                self.n_clusters()
            )));
        }
        let mut scored: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, cent)| (squared_l2(q, cent), c))
            .collect();
        top_k_in_place(&mut scored, n_probe);
        let probed = scored.iter().map(|&(_, c)| c);
        match &self.packed {
            None => {
                let candidates = probed.flat_map(|c| self.lists[c].iter().copied());
                Ok(store.query_candidates(q, candidates, k, mode))
            }
            Some(packed) => {
                let mut cand = Vec::new();
                for c in probed {
                    let keys = &packed.keys[packed.starts[c] * self.dim..packed.starts[c + 1] * self.dim];
                    cand.extend(
                        keys.chunks_exact(self.dim)
                            .zip(&self.lists[c])
                            .map(|(key, &i)| (squared_l2(q, key), i)),
                    );
                }
                Ok(store.finish(cand, k, mode))
            }
        }
    }
}
