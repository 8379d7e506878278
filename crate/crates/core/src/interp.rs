//! Retrieval distribution and linear interpolation with the base LM.
//!
//! `P_kNN(w) ∝ Σ_{neighbors with value w} exp(−d/τ)` and
//! `P′ = λ·P_kNN + (1−λ)·P_LM`.

use serde::{Deserialize, Serialize};

use crate::datastore::{DistanceMode, Neighbor, DEFAULT_K};
use crate::error::{Error, Result};
use crate::reflm::NextTokenDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpConfig {
    pub lambda: f64,
    pub tau: f64,
    pub k: usize,
    pub distance: DistanceMode,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            tau: 1.0,
            k: DEFAULT_K,
            distance: DistanceMode::Squared,
        }
    }
}

impl InterpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Normalized neighbor weights aggregated by value over the full vocabulary.
///
/// Weights are shifted by the smallest distance before exponentiation. If
/// every weight still underflows, mass is spread uniformly over the distinct
/// neighbor values.
pub fn knn_distribution(
    neighbors: &[Neighbor],
    tau: f64,
    vocab_size: usize,
) -> Result<NextTokenDistribution> {
    if neighbors.is_empty() {
        return Err(Error::NoNeighbors);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if let Some(n) = neighbors.iter().find(|n| n.value as usize >= vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: n.value,
            vocab_size,
        });
    }
    let d_min = neighbors
        .iter()
        .map(|n| n.distance)
        .fold(f64::INFINITY, f64::min);

    let mut probs = vec![0.0; vocab_size];
    let mut total = 0.0;
    for n in neighbors {
        let w = (-(n.distance - d_min) / tau).exp();
        if w.is_finite() {
            probs[n.value as usize] += w;
            total += w;
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        probs.fill(0.0);
        for n in neighbors {
            probs[n.value as usize] = 1.0;
        }
        total = probs.iter().sum();
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(NextTokenDistribution::from_vec_unchecked(probs))
}

/// `λ·p_knn + (1−λ)·p_lm`, elementwise.
pub fn interpolate(
    p_knn: &NextTokenDistribution,
    p_lm: &NextTokenDistribution,
    lambda: f64,
) -> Result<NextTokenDistribution> {
    if p_knn.len() != p_lm.len() {
        return Err(Error::DimensionMismatch {
            expected: p_lm.len(),
            actual: p_knn.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must be in [0, 1], got {lambda}")));
    }
    Ok(NextTokenDistribution::from_vec_unchecked(
        p_knn
            .probs()
            .iter()
            .zip(p_lm.probs())
            .map(|(&k, &l)| mix(k, l, lambda))
            .collect(),
    ))
}

/// Scalar form of [`interpolate`] for a single token.
#[inline]
pub fn mix(p_knn: f64, p_lm: f64, lambda: f64) -> f64 {
    lambda * p_knn + (1.0 - lambda) * p_lm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nb(distance: f64, value: u32) -> Neighbor {
        Neighbor {
            distance,
            value,
            index: 0,
        }
    }

    fn dist(v: Vec<f64>) -> NextTokenDistribution {
        NextTokenDistribution::new(v).unwrap()
    }

    #[test]
    fn single_support() {
        let p = knn_distribution(&[nb(0.0, 2), nb(0.0, 2)], 1.0, 4).unwrap();
        assert_eq!(p.probs(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn symmetric_neighbors_split_mass() {
        let p = knn_distribution(&[nb(0.0, 0), nb(0.0, 1)], 1.0, 3).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn weights_follow_exp_of_negative_distance() {
        // weights 1 and 1/3
        let p = knn_distribution(&[nb(0.0, 0), nb(3f64.ln(), 1)], 1.0, 2).unwrap();
        assert!((p.prob(0) - 0.75).abs() < 1e-15);
        assert!((p.prob(1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn equal_distances_give_value_histogram() {
        let n = [nb(2.0, 1), nb(2.0, 1), nb(2.0, 3), nb(2.0, 1)];
        let p = knn_distribution(&n, 0.5, 4).unwrap();
        assert_eq!(p.probs(), &[0.0, 0.75, 0.0, 0.25]);
    }

    #[test]
    fn huge_distances_do_not_underflow() {
        let p = knn_distribution(&[nb(1e6, 0), nb(1e6 + 1.0, 1)], 1.0, 2).unwrap();
        assert!((p.prob(0) - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
        let p = knn_distribution(&[nb(f64::INFINITY, 0), nb(f64::INFINITY, 1)], 1.0, 2).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn knn_errors() {
        assert!(matches!(knn_distribution(&[], 1.0, 3), Err(Error::NoNeighbors)));
        assert!(knn_distribution(&[nb(0.0, 0)], 0.0, 3).is_err());
        assert!(knn_distribution(&[nb(0.0, 5)], 1.0, 3).is_err());
    }

    #[test]
    fn interpolation_identities() {
        let knn = dist(vec![1.0, 0.0, 0.0]);
        let lm = dist(vec![0.2, 0.5, 0.3]);
        assert_eq!(interpolate(&knn, &lm, 0.0).unwrap(), lm);
        assert_eq!(interpolate(&knn, &lm, 1.0).unwrap(), knn);
        let p = interpolate(&knn, &lm, 0.25).unwrap();
        assert!((p.prob(0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn interpolation_errors() {
        let a = dist(vec![1.0, 0.0]);
        let b = dist(vec![0.5, 0.25, 0.25]);
        assert!(matches!(interpolate(&a, &b, 0.5), Err(Error::DimensionMismatch { .. })));
        assert!(interpolate(&a, &a, 1.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(InterpConfig::default().validate().is_ok());
        let bad = InterpConfig {
            lambda: -0.1,
            ..InterpConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = InterpConfig {
            tau: 0.0,
            ..InterpConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn aggregation_breaks_temperature_monotonicity() {
        // ten neighbors of value 0 at distance 1, one of value 1 at distance 0
        let mut n = vec![nb(1.0, 0); 10];
        n.push(nb(0.0, 1));
        let warm = knn_distribution(&n, 10.0, 2).unwrap();
        let cold = knn_distribution(&n, 0.1, 2).unwrap();
        assert_eq!(warm.argmax(), 0);
        assert!(cold.prob(0) < warm.prob(0));
    }

    fn neighbors_strategy() -> impl Strategy<Value = Vec<Neighbor>> {
        prop::collection::vec((0.0f64..50.0, 0u32..12), 1..40)
            .prop_map(|v| v.into_iter().map(|(d, t)| nb(d, t)).collect())
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn knn_is_normalized_on_retrieved_support(n in neighbors_strategy(), tau in 0.01f64..10.0) {
            let p = knn_distribution(&n, tau, 12).unwrap();
            let sum: f64 = p.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for (w, &pw) in p.probs().iter().enumerate() {
                if !n.iter().any(|x| x.value as usize == w) {
                    prop_assert_eq!(pw, 0.0);
                }
            }
        }

        // Holds when every neighbor carries a distinct value; with shared
        // values the top value can lose mass as tau falls (see
        // `aggregation_breaks_temperature_monotonicity`).
        #[test]
        fn lower_temperature_concentrates_mass(
            d in prop::collection::vec(0.0f64..50.0, 1..12),
            t1 in 0.05f64..5.0,
            t2 in 0.05f64..5.0,
        ) {
            let n: Vec<Neighbor> = d.iter().enumerate().map(|(i, &x)| nb(x, i as u32)).collect();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let p_hi = knn_distribution(&n, hi, 12).unwrap();
            let p_lo = knn_distribution(&n, lo, 12).unwrap();
            let top = p_hi.argmax();
            prop_assert!(p_lo.prob(top) + 1e-12 >= p_hi.prob(top));
        }

        #[test]
        fn interpolation_is_convex(a in simplex(8), b in simplex(8), lambda in 0.0f64..=1.0) {
            let pa = NextTokenDistribution::from_vec_unchecked(a);
            let pb = NextTokenDistribution::from_vec_unchecked(b);
            let out = interpolate(&pa, &pb, lambda).unwrap();
            let sum: f64 = out.probs().iter().sum();
            let sa: f64 = pa.probs().iter().sum();
            let sb: f64 = pb.probs().iter().sum();
            prop_assert!((sum - (lambda * sa + (1.0 - lambda) * sb)).abs() <= 1e-9);
            for w in 0..8 {
                let (x, y) = (pa.probs()[w], pb.probs()[w]);
                prop_assert!(out.probs()[w] >= x.min(y) - 1e-15);
                prop_assert!(out.probs()[w] <= x.max(y) + 1e-15);
            }
        }
    }
}
