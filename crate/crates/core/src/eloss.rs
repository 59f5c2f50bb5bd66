//! Entropy-change profiles and the L1 / L2 / Eloss quantities built on them.
//!
//! `l1` is the population variance of the per-block entropy changes and
//! rewards a steady rate of compression; `l2 = −Σ ΔH²` is kept exactly as
//! defined even though it is indifferent to the sign of the change.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entropy at each tap point and the successive changes between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub tap_names: Vec<String>,
    pub taps: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl EntropyProfile {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn mean_delta(&self) -> f64 {
        self.deltas.iter().sum::<f64>() / self.deltas.len() as f64
    }
}

/// Builds a profile from tap entropies in forward order.
///
/// An empty `names` slice is accepted and replaced by `tap0, tap1, ...`.
pub fn build_profile<S: AsRef<str>>(entropies: &[f64], names: &[S]) -> Result<EntropyProfile> {
    if entropies.len() < 2 {
        return Err(Error::InsufficientTaps(entropies.len()));
    }
    if let Some(i) = entropies.iter().position(|h| !h.is_finite()) {
        return Err(Error::Domain(format!("tap {i} has non-finite entropy")));
    }
    let tap_names: Vec<String> = if names.is_empty() {
        (0..entropies.len()).map(|i| format!("tap{i}")).collect()
    } else if names.len() == entropies.len() {
        names.iter().map(|s| s.as_ref().to_owned()).collect()
    } else {
        return Err(Error::Contract(format!(
            "{} tap names for {} entropies",
            names.len(),
            entropies.len()
        )));
    };
    let deltas = entropies.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(EntropyProfile { tap_names, taps: entropies.to_vec(), deltas })
}

/// Population variance of the entropy changes.
pub fn l1(profile: &EntropyProfile) -> f64 {
    let mean = profile.mean_delta();
    profile.deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / profile.len() as f64
}

/// Negative sum of squared entropy changes.
pub fn l2(profile: &EntropyProfile) -> f64 {
    -profile.deltas.iter().map(|d| d * d).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ElossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.1 }
    }
}

impl ElossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, l1: f64, l2: f64) -> f64 {
        self.lambda1 * l1 + self.lambda2 * l2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElossValue {
    pub l1: f64,
    pub l2: f64,
    pub combined: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mean_delta: f64,
}

pub fn eloss(profile: &EntropyProfile, lambda1: f64, lambda2: f64) -> Result<ElossValue> {
    let weights = ElossWeights::new(lambda1, lambda2)?;
    Ok(eloss_weighted(profile, &weights))
}

pub fn eloss_weighted(profile: &EntropyProfile, weights: &ElossWeights) -> ElossValue {
    let (a, b) = (l1(profile), l2(profile));
    ElossValue {
        l1: a,
        l2: b,
        combined: weights.combine(a, b),
        lambda1: weights.lambda1,
        lambda2: weights.lambda2,
        mean_delta: profile.mean_delta(),
    }
}

/// Instability score of one forward pass: `l1` without weighting.
pub fn eloss_metric(profile: &EntropyProfile) -> f64 {
    l1(profile)
}

/// One serialized profile plus its Eloss values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElossRecord {
    pub tap_names: Vec<String>,
    pub taps: Vec<f64>,
    pub deltas: Vec<f64>,
    pub l1: f64,
    pub l2: f64,
    pub combined: f64,
}

impl ElossRecord {
    pub fn new(profile: &EntropyProfile, value: &ElossValue) -> Self {
        Self {
            tap_names: profile.tap_names.clone(),
            taps: profile.taps.clone(),
            deltas: profile.deltas.clone(),
            l1: value.l1,
            l2: value.l2,
            combined: value.combined,
        }
    }
}
