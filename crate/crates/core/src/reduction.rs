//! Collapsing near-identical feature phrases and sampling the working set.
//!
//! Phrases are clustered by average-linkage agglomeration under cosine
//! dissimilarity; merging stops once the closest pair of clusters is
//! farther apart than the merge threshold. Inputs are sorted by phrase
//! before clustering, and ties between equally close pairs go to the pair
//! with the smaller (lower, upper) phrase ranks, so the partition does not
//! depend on input order.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::norms::{Feature, FeatureId};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEmbedding {
    pub phrase: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Linkage {
    #[default]
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Cosine dissimilarity at or below which clusters merge.
    pub merge_threshold: f64,
    pub linkage: Linkage,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            merge_threshold: 0.1,
            linkage: Linkage::Average,
            sample_size: 8_200,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.merge_threshold > 0.0 && self.merge_threshold < 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "merge threshold {} not in (0, 1)",
                self.merge_threshold
            )));
        }
        if self.sample_size == 0 {
            return Err(Error::InvalidArgument("sample size must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine dissimilarity `1 - cos(a, b)`.
pub fn cosine_dissimilarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

fn condensed(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Partition of `embs` (by index into the phrase-sorted order) produced by
/// average-linkage clustering cut at `threshold`.
fn average_linkage(units: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = units.len();
    if n == 1 {
        return vec![vec![0]];
    }
    let mut dist = vec![0.0f64; n * (n - 1) / 2];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = units[i].iter().zip(&units[j]).map(|(x, y)| x * y).sum();
            dist[condensed(n, i, j)] = (1.0 - dot).clamp(0.0, 2.0);
        }
    }
    let d = |dist: &[f64], i: usize, j: usize| -> f64 {
        if i < j {
            dist[condensed(n, i, j)]
        } else {
            dist[condensed(n, j, i)]
        }
    };

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // Nearest active neighbour of each active cluster, ties to lower index.
    let mut nn: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); n];

    let nearest = |dist: &[f64], active: &[bool], i: usize| -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..n {
            if j != i && active[j] {
                let dij = d(dist, i, j);
                if dij < best.0 {
                    best = (dij, j);
                }
            }
        }
        best
    };
    for i in 0..n {
        nn[i] = nearest(&dist, &active, i);
    }

    loop {
        // Closest pair, ties broken by (lower, upper) index.
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] || nn[i].1 == usize::MAX {
                continue;
            }
            let (dv, j) = nn[i];
            let cand = (dv, i.min(j), i.max(j));
            best = match best {
                None => Some(cand),
                Some(b) if (cand.0, cand.1, cand.2) < (b.0, b.1, b.2) => Some(cand),
                b => b,
            };
        }
        let Some((dv, a, b)) = best else { break };
        if dv > threshold {
            break;
        }
        // Merge b into a (a < b keeps the lower index as the cluster key).
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if k == a || k == b || !active[k] {
                continue;
            }
            let merged = (sa * d(&dist, a, k) + sb * d(&dist, b, k)) / (sa + sb);
            let idx = if a < k { condensed(n, a, k) } else { condensed(n, k, a) };
            dist[idx] = merged;
        }
        active[b] = false;
        size[a] += size[b];
        let moved = core::mem::take(&mut members[b]);
        members[a].extend(moved);

        nn[a] = nearest(&dist, &active, a);
        for k in 0..n {
            if !active[k] || k == a {
                continue;
            }
            if nn[k].1 == a || nn[k].1 == b {
                nn[k] = nearest(&dist, &active, k);
            } else {
                let dka = d(&dist, k, a);
                if dka < nn[k].0 || (dka == nn[k].0 && a < nn[k].1) {
                    nn[k] = (dka, a);
                }
            }
        }
    }

    let mut out: Vec<Vec<usize>> = (0..n)
        .filter(|&i| active[i])
        .map(|i| {
            let mut m = core::mem::take(&mut members[i]);
            m.sort_unstable();
            m
        })
        .collect();
    out.sort_unstable_by_key(|m| m[0]);
    out
}

/// Picks the canonical phrase of a cluster: most frequent in the
/// elicitation data, then shortest, then lexicographically smallest.
pub fn canonical_phrase<'a>(
    members: &[&'a str],
    frequency: &BTreeMap<String, usize>,
) -> Option<&'a str> {
    members.iter().copied().min_by(|a, b| {
        let fa = frequency.get(*a).copied().unwrap_or(0);
        let fb = frequency.get(*b).copied().unwrap_or(0);
        fb.cmp(&fa)
            .then(a.chars().count().cmp(&b.chars().count()))
            .then(a.cmp(b))
    })
}

/// Clusters phrase embeddings into features.
///
/// Features come back ordered by their lexicographically smallest member,
/// with dense ids and members sorted.
pub fn cluster_phrases(
    embs: &[PhraseEmbedding],
    cfg: &ClusterConfig,
    frequency: &BTreeMap<String, usize>,
) -> Result<Vec<Feature>> {
    cfg.validate()?;
    if embs.is_empty() {
        return Err(Error::InvalidArgument("no embeddings to cluster".into()));
    }
    let dim = embs[0].vector.len();
    let mut order: Vec<&PhraseEmbedding> = embs.iter().collect();
    order.sort_by(|a, b| a.phrase.cmp(&b.phrase));
    for w in order.windows(2) {
        if w[0].phrase == w[1].phrase {
            return Err(Error::DuplicatePhrase(w[0].phrase.clone()));
        }
    }
    let mut units = Vec::with_capacity(order.len());
    for e in &order {
        if e.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                phrase: e.phrase.clone(),
                expected: dim,
                found: e.vector.len(),
            });
        }
        if e.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "embedding for {:?} has non-finite entries",
                e.phrase
            )));
        }
        let norm = libm::sqrt(e.vector.iter().map(|x| x * x).sum());
        if norm == 0.0 {
            return Err(Error::ZeroNormEmbedding(e.phrase.clone()));
        }
        units.push(e.vector.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }

    let clusters = average_linkage(&units, cfg.merge_threshold);
    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(id, idx)| {
            let members: Vec<&str> = idx.iter().map(|&i| order[i].phrase.as_str()).collect();
            let phrase = canonical_phrase(&members, frequency)
                .expect("clusters are non-empty")
                .into();
            Feature {
                id: FeatureId(id as u32),
                phrase,
                members: members.into_iter().map(String::from).collect(),
            }
        })
        .collect())
}

/// Uniform sample of `cfg.sample_size` features without replacement.
///
/// Uses the crate's documented partial Fisher-Yates over the input order;
/// the returned features keep their ids and are sorted by id.
pub fn sample_features(features: &[Feature], cfg: &ClusterConfig) -> Result<Vec<Feature>> {
    if cfg.sample_size > features.len() {
        return Err(Error::SampleTooLarge {
            requested: cfg.sample_size,
            available: features.len(),
        });
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut picked = rng.sample_indices(features.len(), cfg.sample_size);
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| features[i].clone()).collect())
}
