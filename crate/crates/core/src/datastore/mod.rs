//! Token-level key/value datastore with exact and IVF-approximate search.
//!
//! Entry `t` pairs the context vector of the window ending just before
//! corpus position `t` (the key) with the token at `t` (the value).

mod io;
mod ivf;

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::context_window;
use crate::error::{Error, Result};
use crate::linalg::squared_l2;
use crate::reflm::ModelParams;
use crate::TokenId;

pub use io::STORE_HEADER_LEN;
pub use ivf::{IvfIndex, KMeansOptions};

/// Default number of neighbors retrieved per query.
pub const DEFAULT_K: usize = 1024;

/// How neighbor distances are reported. Ranking always uses squared L2,
/// which orders entries exactly as plain L2 does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    #[default]
    Squared,
    Plain,
}

impl DistanceMode {
    fn report(self, squared: f64) -> f64 {
        match self {
            DistanceMode::Squared => squared,
            DistanceMode::Plain => squared.sqrt(),
        }
    }
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "plain" => Ok(Self::Plain),
            other => Err(Error::InvalidArgument(format!("unknown distance mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub distance: f64,
    pub value: TokenId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
}

impl Datastore {
    pub fn from_parts(dim: usize, keys: Vec<f32>, values: Vec<TokenId>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("datastore dimension must be >= 1".into()));
        }
        if keys.len() != dim * values.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * values.len(),
                actual: keys.len(),
            });
        }
        if keys.iter().any(|k| !k.is_finite()) {
            return Err(Error::Invariant("datastore key is not finite".into()));
        }
        Ok(Self { dim, keys, values })
    }

    /// One entry per corpus position, in corpus order.
    pub fn build(params: &ModelParams, corpus: &[TokenId]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        params.check_ids(corpus)?;
        let n_ctx = params.shape().n_ctx;
        let dim = params.shape().d_h;
        let mut keys = vec![0f32; corpus.len() * dim];
        keys.par_chunks_mut(dim)
            .with_min_len(256)
            .enumerate()
            .try_for_each(|(t, row)| {
                let cv = params.context_vector(&context_window(corpus, t, n_ctx))?;
                row.copy_from_slice(cv.as_slice());
                Ok::<_, Error>(())
            })?;
        Self::from_parts(dim, keys, corpus.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    fn check_query(&self, q: &[f32], k: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDatastore);
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        Ok(())
    }

    /// The `min(k, len)` nearest entries, ascending by distance, ties broken
    /// by smaller entry index.
    pub fn query_exact(&self, q: &[f32], k: usize, mode: DistanceMode) -> Result<Vec<Neighbor>> {
        self.check_query(q, k)?;
        let scored = (0..self.len()).map(|i| (squared_l2(q, self.key(i)), i)).collect();
        Ok(self.finish(scored, k, mode))
    }

    /// Exact search over a subset of entry indices.
    fn query_candidates(
        &self,
        q: &[f32],
        candidates: impl Iterator<Item = usize>,
        k: usize,
        mode: DistanceMode,
    ) -> Vec<Neighbor> {
        let scored = candidates.map(|i| (squared_l2(q, self.key(i)), i)).collect();
        self.finish(scored, k, mode)
    }

    fn finish(&self, mut scored: Vec<(f64, usize)>, k: usize, mode: DistanceMode) -> Vec<Neighbor> {
        top_k_in_place(&mut scored, k);
        scored
            .into_iter()
            .map(|(d, i)| Neighbor {
                distance: mode.report(d),
                value: self.values[i],
                index: i,
            })
            .collect()
    }
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Keeps the `k` smallest `(distance, index)` pairs, sorted ascending.
pub(crate) fn top_k_in_place(scored: &mut Vec<(f64, usize)>, k: usize) {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_distance_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_index);
}

/// Search backend used by decoding and diagnostics.
#[derive(Debug, Clone, Copy)]
pub enum Retriever<'a> {
    Exact(&'a Datastore),
    Approx {
        store: &'a Datastore,
        index: &'a IvfIndex,
        n_probe: usize,
    },
}

impl Retriever<'_> {
    pub fn store(&self) -> &Datastore {
        match self {
            Retriever::Exact(s) => s,
            Retriever::Approx { store, .. } => store,
        }
    }

    pub fn search(&self, q: &[f32], k: usize, mode: DistanceMode) -> Result<Vec<Neighbor>> {
        match *self {
            Retriever::Exact(store) => store.query_exact(q, k, mode),
            Retriever::Approx {
                store,
                index,
                n_probe,
            } => index.query(store, q, k, n_probe, mode),
        }
    }
}
