//! Gold-label selection and signal-detection scoring of verifiers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::norms::{ConceptId, FeatureId};
use crate::rng::SeededRng;
use crate::special::probit;

pub type Pair = (ConceptId, FeatureId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Judgment {
    True,
    False,
    Skipped,
}

impl Judgment {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Judgment::True => Some(true),
            Judgment::False => Some(false),
            Judgment::Skipped => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgmentRecord {
    pub participant: String,
    pub concept_id: ConceptId,
    pub feature_id: FeatureId,
    pub response: Judgment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoldLabel {
    pub concept_id: ConceptId,
    pub feature_id: FeatureId,
    pub label: bool,
    /// Non-skipped judgments behind the label.
    pub n_judgments: u32,
}

impl GoldLabel {
    pub fn pair(&self) -> Pair {
        (self.concept_id, self.feature_id)
    }
}

/// Pairs with at least `min_judgments` non-skipped judgments, all in
/// agreement. Skips neither count toward the threshold nor break unanimity.
/// Output is sorted by pair.
pub fn select_gold(records: &[JudgmentRecord], min_judgments: u32) -> Vec<GoldLabel> {
    let mut tally: BTreeMap<Pair, (u32, u32)> = BTreeMap::new();
    for r in records {
        let Some(v) = r.response.as_bool() else {
            continue;
        };
        let t = tally.entry((r.concept_id, r.feature_id)).or_insert((0, 0));
        if v {
            t.0 += 1;
        } else {
            t.1 += 1;
        }
    }
    tally
        .into_iter()
        .filter_map(|((c, f), (yes, no))| {
            let n = yes + no;
            let unanimous = yes == 0 || no == 0;
            (n >= min_judgments && n > 0 && unanimous).then_some(GoldLabel {
                concept_id: c,
                feature_id: f,
                label: yes > 0,
                n_judgments: n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_rejections: u64,
}

impl ConfusionCounts {
    pub fn new(hits: u64, misses: u64, false_alarms: u64, correct_rejections: u64) -> Self {
        Self {
            hits,
            misses,
            false_alarms,
            correct_rejections,
        }
    }

    pub fn positives(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn negatives(&self) -> u64 {
        self.false_alarms + self.correct_rejections
    }

    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.hits += 1,
            (true, false) => self.misses += 1,
            (false, true) => self.false_alarms += 1,
            (false, false) => self.correct_rejections += 1,
        }
    }
}

/// Tallies predictions against gold labels.
pub fn confusion<F>(gold: &[GoldLabel], mut predict: F) -> Result<ConfusionCounts>
where
    F: FnMut(Pair) -> Option<bool>,
{
    let mut c = ConfusionCounts::default();
    for g in gold {
        let p = predict(g.pair()).ok_or(Error::MissingPrediction {
            concept: g.concept_id.index(),
            feature: g.feature_id.index(),
        })?;
        c.record(g.label, p);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DPrimeResult {
    pub d_prime: f64,
    /// Corrected hit rate.
    pub hit_rate: f64,
    /// Corrected false-alarm rate.
    pub fa_rate: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

/// `count / n` with 0 and 1 pulled in to `1/(2n)` and `1 - 1/(2n)`.
pub fn corrected_rate(count: u64, n: u64) -> f64 {
    debug_assert!(n > 0 && count <= n);
    let n_f = n as f64;
    if count == 0 {
        1.0 / (2.0 * n_f)
    } else if count == n {
        1.0 - 1.0 / (2.0 * n_f)
    } else {
        count as f64 / n_f
    }
}

pub fn d_prime(c: &ConfusionCounts) -> Result<DPrimeResult> {
    let (pos, neg) = (c.positives(), c.negatives());
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateClasses {
            positives: pos,
            negatives: neg,
        });
    }
    let hit_rate = corrected_rate(c.hits, pos);
    let fa_rate = corrected_rate(c.false_alarms, neg);
    Ok(DPrimeResult {
        d_prime: probit(hit_rate)? - probit(fa_rate)?,
        hit_rate,
        fa_rate,
        ci_low: None,
        ci_high: None,
    })
}

/// Linear-interpolation percentile (`q` in [0, 1]) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = libm::floor(h) as usize;
    let hi = libm::ceil(h) as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap 95% interval for d'.
///
/// Resampling is stratified: each replicate draws the positive gold pairs
/// and the negative gold pairs with replacement, separately, so every
/// replicate keeps the original class sizes and d' is always defined.
/// Replicate `b` uses stream `b` of the generator seeded with `seed`.
pub fn bootstrap_ci<F>(gold: &[GoldLabel], mut predict: F, b: usize, seed: u64) -> Result<(f64, f64)>
where
    F: FnMut(Pair) -> Option<bool>,
{
    if b == 0 {
        return Err(Error::InvalidArgument("bootstrap needs B >= 1".into()));
    }
    let mut pos_hits = Vec::new();
    let mut neg_fas = Vec::new();
    for g in gold {
        let p = predict(g.pair()).ok_or(Error::MissingPrediction {
            concept: g.concept_id.index(),
            feature: g.feature_id.index(),
        })?;
        if g.label {
            pos_hits.push(p);
        } else {
            neg_fas.push(p);
        }
    }
    if pos_hits.is_empty() || neg_fas.is_empty() {
        return Err(Error::DegenerateClasses {
            positives: pos_hits.len() as u64,
            negatives: neg_fas.len() as u64,
        });
    }
    let mut stats = Vec::with_capacity(b);
    for rep in 0..b {
        let mut rng = SeededRng::with_stream(seed, rep as u64);
        let mut c = ConfusionCounts::default();
        for _ in 0..pos_hits.len() {
            c.record(true, pos_hits[rng.below(pos_hits.len())]);
        }
        for _ in 0..neg_fas.len() {
            c.record(false, neg_fas[rng.below(neg_fas.len())]);
        }
        stats.push(d_prime(&c)?.d_prime);
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    Ok((percentile_sorted(&stats, 0.025), percentile_sorted(&stats, 0.975)))
}
