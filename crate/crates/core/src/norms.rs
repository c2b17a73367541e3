//! Concepts, features, and the binary concept-by-feature norm matrix.
//!
//! A single [`NormMatrix`] carries both the human-only and the AI-enhanced
//! matrix: every stored cell records whether it was produced by a
//! participant or filled in by model verification, so the human-only view
//! can always be recovered.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConceptId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(pub u32);

impl ConceptId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl FeatureId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

/// Case-folded, trimmed form used to match concept labels.
pub fn label_key(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: ConceptId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Feature {
    pub id: FeatureId,
    /// Canonical phrase; always one of `members`.
    pub phrase: String,
    /// Raw phrases merged into this feature.
    pub members: Vec<String>,
}

impl Feature {
    pub fn singleton(id: FeatureId, phrase: impl Into<String>) -> Self {
        let phrase = phrase.into();
        Self {
            id,
            members: vec![phrase.clone()],
            phrase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellProvenance {
    HumanElicited,
    AiImputed,
    Absent,
}

impl CellProvenance {
    pub fn is_set(self) -> bool {
        !matches!(self, CellProvenance::Absent)
    }
}

/// Which cells count as 1 when reading the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    /// Only participant-produced cells.
    HumanOnly,
    /// Participant-produced and model-imputed cells.
    Full,
}

impl View {
    pub fn includes(self, p: CellProvenance) -> bool {
        match self {
            View::HumanOnly => p == CellProvenance::HumanElicited,
            View::Full => p != CellProvenance::Absent,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::HumanOnly => "human",
            View::Full => "full",
        }
    }
}

/// Binary concept-by-feature matrix with per-cell provenance.
///
/// Cells are stored sparsely; anything not stored is `Absent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormMatrix {
    concepts: Vec<Concept>,
    features: Vec<Feature>,
    cells: BTreeMap<(ConceptId, FeatureId), CellProvenance>,
}

impl NormMatrix {
    /// Builds a matrix from labels, features and cells.
    ///
    /// Concept ids are assigned densely in the given order; feature ids must
    /// already be dense and in order. `Absent` entries in `cells` are dropped.
    pub fn new(
        concept_labels: Vec<String>,
        features: Vec<Feature>,
        cells: impl IntoIterator<Item = ((ConceptId, FeatureId), CellProvenance)>,
    ) -> Result<Self> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        let mut concepts = Vec::with_capacity(concept_labels.len());
        for (i, label) in concept_labels.into_iter().enumerate() {
            let label = label.trim().to_string();
            if label.is_empty() {
                return Err(Error::InvalidArgument("empty concept label".to_string()));
            }
            if let Some(existing) = seen.insert(label_key(&label), label.clone()) {
                return Err(Error::DuplicateConcept { label, existing });
            }
            concepts.push(Concept {
                id: ConceptId(i as u32),
                label,
            });
        }
        for (j, f) in features.iter().enumerate() {
            if f.id.index() != j {
                return Err(Error::InvalidArgument(alloc::format!(
                    "feature at position {j} has id {}",
                    f.id.0
                )));
            }
            if f.phrase.is_empty() || f.members.is_empty() || !f.members.contains(&f.phrase) {
                return Err(Error::InvalidArgument(alloc::format!(
                    "feature {j} must have a non-empty phrase contained in its members"
                )));
            }
        }
        let mut m = Self {
            concepts,
            features,
            cells: BTreeMap::new(),
        };
        for ((c, f), p) in cells {
            m.set(c, f, p)?;
        }
        Ok(m)
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn concept(&self, id: ConceptId) -> Option<&Concept> {
        self.concepts.get(id.index())
    }

    pub fn feature(&self, id: FeatureId) -> Option<&Feature> {
        self.features.get(id.index())
    }

    /// Looks up a concept by label, ignoring case and surrounding whitespace.
    pub fn find_concept(&self, label: &str) -> Option<ConceptId> {
        let key = label_key(label);
        self.concepts
            .iter()
            .find(|c| label_key(&c.label) == key)
            .map(|c| c.id)
    }

    /// Looks up a feature by canonical phrase, then by member phrase.
    pub fn find_feature(&self, phrase: &str) -> Option<FeatureId> {
        let phrase = phrase.trim();
        self.features
            .iter()
            .find(|f| f.phrase == phrase)
            .or_else(|| {
                self.features
                    .iter()
                    .find(|f| f.members.iter().any(|m| m == phrase))
            })
            .map(|f| f.id)
    }

    pub fn get(&self, c: ConceptId, f: FeatureId) -> CellProvenance {
        self.cells
            .get(&(c, f))
            .copied()
            .unwrap_or(CellProvenance::Absent)
    }

    pub fn value(&self, c: ConceptId, f: FeatureId, view: View) -> bool {
        view.includes(self.get(c, f))
    }

    pub fn set(&mut self, c: ConceptId, f: FeatureId, p: CellProvenance) -> Result<()> {
        if c.index() >= self.concepts.len() {
            return Err(Error::UnknownConcept(c.index()));
        }
        if f.index() >= self.features.len() {
            return Err(Error::UnknownFeature(f.index()));
        }
        match p {
            CellProvenance::Absent => {
                self.cells.remove(&(c, f));
            }
            _ => {
                self.cells.insert((c, f), p);
            }
        }
        Ok(())
    }

    /// Stored (non-absent) cells in (concept, feature) order.
    pub fn cells(&self) -> impl Iterator<Item = (ConceptId, FeatureId, CellProvenance)> + '_ {
        self.cells.iter().map(|(&(c, f), &p)| (c, f, p))
    }

    pub fn count(&self, view: View) -> usize {
        self.cells.values().filter(|&&p| view.includes(p)).count()
    }

    /// Every `Absent` cell in row-major order.
    pub fn absent_cells(&self) -> impl Iterator<Item = (ConceptId, FeatureId)> + '_ {
        let nf = self.features.len() as u32;
        (0..self.concepts.len() as u32).flat_map(move |c| {
            (0..nf)
                .map(move |f| (ConceptId(c), FeatureId(f)))
                .filter(move |&(c, f)| !self.cells.contains_key(&(c, f)))
        })
    }

    pub fn n_absent(&self) -> usize {
        self.concepts.len() * self.features.len() - self.cells.len()
    }

    /// Copy that keeps only human-elicited cells.
    pub fn human_only(&self) -> NormMatrix {
        NormMatrix {
            concepts: self.concepts.clone(),
            features: self.features.clone(),
            cells: self
                .cells
                .iter()
                .filter(|(_, &p)| p == CellProvenance::HumanElicited)
                .map(|(&k, &p)| (k, p))
                .collect(),
        }
    }

    /// Sorted feature ids set in row `c` under `view`.
    pub fn row(&self, c: ConceptId, view: View) -> Vec<FeatureId> {
        self.cells
            .range((c, FeatureId(0))..=(c, FeatureId(u32::MAX)))
            .filter(|(_, &p)| view.includes(p))
            .map(|(&(_, f), _)| f)
            .collect()
    }

    /// Per-concept count of set cells under `view`.
    pub fn row_counts(&self, view: View) -> Vec<usize> {
        let mut counts = vec![0usize; self.concepts.len()];
        for (&(c, _), &p) in &self.cells {
            if view.includes(p) {
                counts[c.index()] += 1;
            }
        }
        counts
    }

    /// Per-feature count of set cells under `view`.
    pub fn column_counts(&self, view: View) -> Vec<usize> {
        let mut counts = vec![0usize; self.features.len()];
        for (&(_, f), &p) in &self.cells {
            if view.includes(p) {
                counts[f.index()] += 1;
            }
        }
        counts
    }

    /// Dense 0/1 rows under `view`.
    pub fn dense_rows(&self, view: View) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; self.features.len()]; self.concepts.len()];
        for (&(c, f), &p) in &self.cells {
            if view.includes(p) {
                rows[c.index()][f.index()] = 1.0;
            }
        }
        rows
    }

    /// Replaces the feature set with `merged` (clusters of the current
    /// features' phrases). A merged cell is human-elicited when any member
    /// phrase was, and AI-imputed when only imputed members were set.
    pub fn merge_features(&self, merged: Vec<Feature>) -> Result<NormMatrix> {
        let mut by_phrase: BTreeMap<&str, FeatureId> = BTreeMap::new();
        for f in &merged {
            for m in &f.members {
                if by_phrase.insert(m.as_str(), f.id).is_some() {
                    return Err(Error::DuplicatePhrase(m.clone()));
                }
            }
        }
        let mut remap = Vec::with_capacity(self.features.len());
        for f in &self.features {
            let mut target = None;
            for m in &f.members {
                let t = by_phrase.get(m.as_str()).copied();
                match (target, t) {
                    (_, None) => {
                        return Err(Error::InvalidArgument(alloc::format!(
                            "phrase {m:?} is not covered by the merged features"
                        )))
                    }
                    (None, t) => target = t,
                    (Some(a), Some(b)) if a != b => {
                        return Err(Error::InvalidArgument(alloc::format!(
                            "members of feature {:?} split across merged features",
                            f.phrase
                        )))
                    }
                    _ => {}
                }
            }
            remap.push(target.expect("features have at least one member"));
        }
        let mut cells: BTreeMap<(ConceptId, FeatureId), CellProvenance> = BTreeMap::new();
        for (&(c, f), &p) in &self.cells {
            let key = (c, remap[f.index()]);
            let entry = cells.entry(key).or_insert(p);
            if p == CellProvenance::HumanElicited {
                *entry = p;
            }
        }
        let labels = self.concepts.iter().map(|c| c.label.clone()).collect();
        NormMatrix::new(labels, merged, cells)
    }

    /// Keeps only the listed features (by current id), renumbering them
    /// densely in ascending id order.
    pub fn restrict_features(&self, keep: &[FeatureId]) -> Result<NormMatrix> {
        let keep: BTreeSet<FeatureId> = keep.iter().copied().collect();
        let mut remap: BTreeMap<FeatureId, FeatureId> = BTreeMap::new();
        let mut features = Vec::with_capacity(keep.len());
        for (new, &old) in keep.iter().enumerate() {
            let f = self.feature(old).ok_or(Error::UnknownFeature(old.index()))?;
            let id = FeatureId(new as u32);
            remap.insert(old, id);
            features.push(Feature {
                id,
                phrase: f.phrase.clone(),
                members: f.members.clone(),
            });
        }
        let cells = self
            .cells
            .iter()
            .filter_map(|(&(c, f), &p)| remap.get(&f).map(|&nf| ((c, nf), p)));
        let labels = self.concepts.iter().map(|c| c.label.clone()).collect();
        NormMatrix::new(labels, features, cells)
    }
}

/// A concept-label variant that was folded into an existing concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCollision {
    pub line: usize,
    pub canonical: String,
    pub variant: String,
}

/// One elicitation record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElicitationRecord {
    pub line: usize,
    pub participant: String,
    pub concept: String,
    pub phrase: String,
}

/// Result of building a human-only matrix from elicitation records.
#[derive(Debug, Clone)]
pub struct Elicitation {
    pub matrix: NormMatrix,
    /// Number of records listing each raw phrase, over all concepts.
    pub phrase_frequency: BTreeMap<String, usize>,
    pub collisions: Vec<LabelCollision>,
}

/// Builds the human-only matrix: one single-member feature per distinct raw
/// phrase, and a `HumanElicited` cell wherever at least `min_producers`
/// distinct participants listed the phrase for the concept.
pub fn build_elicitation_matrix(
    records: &[ElicitationRecord],
    min_producers: usize,
) -> Result<Elicitation> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no elicitation records".to_string()));
    }
    let min_producers = min_producers.max(1);
    let mut concept_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels: Vec<String> = Vec::new();
    let mut collisions = Vec::new();
    let mut phrase_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut phrases: Vec<String> = Vec::new();
    let mut phrase_frequency: BTreeMap<String, usize> = BTreeMap::new();
    let mut producers: BTreeMap<(usize, usize), BTreeSet<&str>> = BTreeMap::new();

    for r in records {
        let concept = r.concept.trim();
        let phrase = r.phrase.trim();
        if concept.is_empty() || phrase.is_empty() || r.participant.trim().is_empty() {
            return Err(Error::InvalidArgument(alloc::format!(
                "line {}: empty field",
                r.line
            )));
        }
        let key = label_key(concept);
        let ci = match concept_index.get(&key) {
            Some(&ci) => {
                if labels[ci] != concept {
                    collisions.push(LabelCollision {
                        line: r.line,
                        canonical: labels[ci].clone(),
                        variant: concept.to_string(),
                    });
                }
                ci
            }
            None => {
                let ci = labels.len();
                labels.push(concept.to_string());
                concept_index.insert(key, ci);
                ci
            }
        };
        let fi = match phrase_index.get(phrase) {
            Some(&fi) => fi,
            None => {
                let fi = phrases.len();
                phrases.push(phrase.to_string());
                phrase_index.insert(phrase.to_string(), fi);
                fi
            }
        };
        *phrase_frequency.entry(phrase.to_string()).or_insert(0) += 1;
        producers
            .entry((ci, fi))
            .or_default()
            .insert(r.participant.trim());
    }

    let features = phrases
        .into_iter()
        .enumerate()
        .map(|(j, p)| Feature::singleton(FeatureId(j as u32), p))
        .collect();
    let cells = producers
        .into_iter()
        .filter(|(_, who)| who.len() >= min_producers)
        .map(|((c, f), _)| {
            (
                (ConceptId(c as u32), FeatureId(f as u32)),
                CellProvenance::HumanElicited,
            )
        });
    let matrix = NormMatrix::new(labels, features, cells)?;
    Ok(Elicitation {
        matrix,
        phrase_frequency,
        collisions,
    })
}

/// Per-concept feature counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityStats {
    pub view: View,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    /// `histogram[k]` = number of concepts with exactly `k` features.
    pub histogram: Vec<usize>,
}

/// Per-feature concept counts.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapStats {
    pub view: View,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Fraction of features true of exactly one concept.
    pub singleton_fraction: f64,
    /// `histogram[k]` = number of features true of exactly `k` concepts.
    pub histogram: Vec<usize>,
}

fn mean_of(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / counts.len() as f64
    }
}

fn median_of(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let mut s = counts.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

fn histogram_of(counts: &[usize]) -> Vec<usize> {
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut h = vec![0usize; max + 1];
    for &c in counts {
        h[c] += 1;
    }
    h
}

pub fn feature_density_stats(m: &NormMatrix, view: View) -> DensityStats {
    let counts = m.row_counts(view);
    DensityStats {
        view,
        mean: mean_of(&counts),
        median: median_of(&counts),
        histogram: histogram_of(&counts),
        counts,
    }
}

pub fn feature_overlap_stats(m: &NormMatrix, view: View) -> OverlapStats {
    let counts = m.column_counts(view);
    let singletons = counts.iter().filter(|&&c| c == 1).count();
    let singleton_fraction = if counts.is_empty() {
        0.0
    } else {
        singletons as f64 / counts.len() as f64
    };
    OverlapStats {
        view,
        mean: mean_of(&counts),
        singleton_fraction,
        histogram: histogram_of(&counts),
        counts,
    }
}
