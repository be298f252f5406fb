//! One-shot labeling rules over embedding vectors.
//!
//! Ties are broken toward the lowest index everywhere: the earliest support
//! item in [`nn_classify`] and the smallest label in [`one_shot_label`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::diffcore::cosine_similarity;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DistanceKind {
    #[default]
    Euclidean,
    /// `1 − cos(u, v)`.
    CosineDistance,
}

impl DistanceKind {
    pub fn distance(self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != v.len() {
            return Err(Error::contract(format!(
                "embedding lengths differ: {} vs {}",
                u.len(),
                v.len()
            )));
        }
        match self {
            DistanceKind::Euclidean => Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()),
            DistanceKind::CosineDistance => Ok(1.0 - cosine_similarity(u, v)?),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::CosineDistance => "cosine",
        })
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(DistanceKind::Euclidean),
            "cosine" => Ok(DistanceKind::CosineDistance),
            other => Err(Error::contract(format!(
                "unknown distance {other:?} (expected euclidean or cosine)"
            ))),
        }
    }
}

/// Labeled examples available at classification time. Labels are class
/// indices into a one-hot space of width `n_labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet<X> {
    items: Vec<(X, usize)>,
    n_labels: usize,
}

impl<X> SupportSet<X> {
    pub fn new(items: Vec<(X, usize)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::contract("support set must be nonempty"));
        }
        let n_labels = items.iter().map(|(_, y)| y + 1).max().unwrap_or(0);
        Ok(Self { items, n_labels })
    }

    pub fn items(&self) -> &[(X, usize)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn one_hot(&self, index: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_labels];
        v[self.items[index].1] = 1.0;
        v
    }

    /// True when every label occurs exactly once.
    pub fn is_one_shot(&self) -> bool {
        let labels: BTreeSet<_> = self.items.iter().map(|(_, y)| *y).collect();
        labels.len() == self.items.len()
    }
}

/// Label of the nearest support item and its index.
pub fn nn_classify(probe: &[f64], support: &SupportSet<Vec<f64>>, d: DistanceKind) -> Result<(usize, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, (x, _)) in support.items().iter().enumerate() {
        let dist = d.distance(probe, x)?;
        if best.map_or(true, |(b, _)| dist < b) {
            best = Some((dist, i));
        }
    }
    let (_, idx) = best.expect("support sets are nonempty");
    Ok((support.items()[idx].1, idx))
}

/// `argmax_y P(y | x̂, S)` for a normalized distribution.
pub fn one_shot_label(distribution: &[f64]) -> Result<usize> {
    let total: f64 = distribution.iter().sum();
    if distribution.is_empty() || (total - 1.0).abs() > 1e-9 || distribution.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::contract(format!(
            "predictive distribution must be nonnegative and sum to 1, got sum {total}"
        )));
    }
    let mut best = 0;
    for (i, &p) in distribution.iter().enumerate() {
        if p > distribution[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One meta-learning trial: a support set, a probe batch and the label
/// permutation that produced their labels (`labels = permutation[class]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<X> {
    pub support: SupportSet<X>,
    pub probes: Vec<(X, usize)>,
    pub permutation: Vec<usize>,
}

/// Anything that assigns a support label to a probe.
pub trait OneShotClassifier<X> {
    fn classify(&self, support: &SupportSet<X>, probe: &X) -> Result<usize>;
}

/// Nearest-neighbor rule over precomputed embeddings.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestNeighbor(pub DistanceKind);

impl OneShotClassifier<Vec<f64>> for NearestNeighbor {
    fn classify(&self, support: &SupportSet<Vec<f64>>, probe: &Vec<f64>) -> Result<usize> {
        Ok(nn_classify(probe, support, self.0)?.0)
    }
}

impl<X, F> OneShotClassifier<X> for F
where
    F: Fn(&SupportSet<X>, &X) -> Result<usize>,
{
    fn classify(&self, support: &SupportSet<X>, probe: &X) -> Result<usize> {
        self(support, probe)
    }
}

/// Fraction of probes, over all episodes, labeled correctly.
pub fn episode_accuracy<X, C: OneShotClassifier<X> + ?Sized>(classifier: &C, episodes: &[Episode<X>]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::contract("no episodes to evaluate"));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (k, ep) in episodes.iter().enumerate() {
        if !ep.support.is_one_shot() {
            return Err(Error::contract(format!("episode {k} repeats a class in its support set")));
        }
        for (x, y) in &ep.probes {
            if classifier.classify(&ep.support, x)? == *y {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::contract("episodes contain no probes"));
    }
    Ok(correct as f64 / total as f64)
}
