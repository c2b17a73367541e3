//! Concept-space geometry: cosine dissimilarities, orthogonal Procrustes
//! alignment, discrepancy ranking, and mining of triplets on which two
//! spaces disagree.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::norms::{ConceptId, NormMatrix, View};
use crate::rng::SeededRng;

/// Symmetric pairwise dissimilarities over labelled concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    labels: Vec<String>,
    /// Row-major `n * n`.
    d: Vec<f64>,
}

impl DissimilarityMatrix {
    /// Builds from a full row-major matrix. Checks shape, symmetry and the
    /// zero diagonal.
    pub fn from_rows(labels: Vec<String>, d: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if d.len() != n * n {
            return Err(Error::InvalidArgument(alloc::format!(
                "expected {} entries, got {}",
                n * n,
                d.len()
            )));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "non-zero diagonal at {i}"
                )));
            }
            for j in 0..i {
                if d[i * n + j] != d[j * n + i] || !d[i * n + j].is_finite() {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "asymmetric or non-finite entry at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { labels, d })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.labels.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.labels.len();
        &self.d[i * n..(i + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        let n = self.labels.len();
        DMatrix::from_row_slice(n, n, &self.d)
    }
}

/// Cosine dissimilarity between the concept rows of `m` under `view`.
///
/// Rows are binary, so the cosine is `|x ∩ y| / sqrt(|x| |y|)`.
pub fn cosine_dissim(m: &NormMatrix, view: View) -> Result<DissimilarityMatrix> {
    let rows: Vec<Vec<u32>> = m
        .concepts()
        .iter()
        .map(|c| m.row(c.id, view).into_iter().map(|f| f.0).collect())
        .collect();
    for (c, r) in m.concepts().iter().zip(&rows) {
        if r.is_empty() {
            return Err(Error::EmptyRow(c.label.clone()));
        }
    }
    let weights: Vec<Vec<f64>> = rows.iter().map(|r| vec![1.0; r.len()]).collect();
    let labels = m.concepts().iter().map(|c| c.label.clone()).collect();
    Ok(sparse_cosine(labels, &rows, &weights))
}

/// Cosine dissimilarity over dense real vectors (one per label).
pub fn cosine_dissim_dense(labels: Vec<String>, vectors: &[Vec<f64>]) -> Result<DissimilarityMatrix> {
    if labels.len() != vectors.len() {
        return Err(Error::InvalidArgument("label/vector count mismatch".into()));
    }
    let mut rows = Vec::with_capacity(vectors.len());
    let mut weights = Vec::with_capacity(vectors.len());
    for (l, v) in labels.iter().zip(vectors) {
        let idx: Vec<u32> = (0..v.len() as u32).filter(|&k| v[k as usize] != 0.0).collect();
        if idx.is_empty() {
            return Err(Error::EmptyRow(l.clone()));
        }
        weights.push(idx.iter().map(|&k| v[k as usize]).collect());
        rows.push(idx);
    }
    Ok(sparse_cosine(labels, &rows, &weights))
}

fn sparse_cosine(labels: Vec<String>, rows: &[Vec<u32>], weights: &[Vec<f64>]) -> DissimilarityMatrix {
    let n = rows.len();
    let sq_norms: Vec<f64> = weights
        .iter()
        .map(|w| w.iter().map(|x| x * x).sum())
        .collect();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dot = sparse_dot(&rows[i], &weights[i], &rows[j], &weights[j]);
            let v = (1.0 - dot / libm::sqrt(sq_norms[i] * sq_norms[j])).clamp(0.0, 2.0);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    DissimilarityMatrix { labels, d }
}

fn sparse_dot(ia: &[u32], wa: &[f64], ib: &[u32], wb: &[f64]) -> f64 {
    let (mut p, mut q, mut s) = (0, 0, 0.0);
    while p < ia.len() && q < ib.len() {
        match ia[p].cmp(&ib[q]) {
            core::cmp::Ordering::Less => p += 1,
            core::cmp::Ordering::Greater => q += 1,
            core::cmp::Ordering::Equal => {
                s += wa[p] * wb[q];
                p += 1;
                q += 1;
            }
        }
    }
    s
}

/// Result of aligning configuration B onto configuration A.
#[derive(Debug, Clone)]
pub struct ProcrustesResult {
    /// Orthogonal matrix applied to the right of standardized B.
    pub rotation: DMatrix<f64>,
    /// Optimal scale applied after rotation (sum of singular values).
    pub scale: f64,
    /// `||A_std - aligned_b||_F^2`, in [0, 1].
    pub disparity: f64,
    /// Column-centered, unit-Frobenius-norm A.
    pub a_std: DMatrix<f64>,
    /// `scale * B_std * rotation`.
    pub aligned_b: DMatrix<f64>,
    /// Numerical rank of `B_stdᵀ A_std`.
    pub rank: usize,
    /// Set when either configuration has no spread or the cross-product is
    /// rank deficient beyond what centering explains.
    pub degenerate: bool,
}

fn standardize(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let mut out = m.clone();
    let rows = m.nrows() as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / rows;
        col.add_scalar_mut(-mean);
    }
    let norm = out.norm();
    if norm == 0.0 || !norm.is_finite() {
        return (out, true);
    }
    out /= norm;
    (out, false)
}

/// Orthogonal Procrustes on two point configurations with matching rows.
///
/// Both are column-centered and scaled to unit Frobenius norm; the rotation
/// is `U Vᵀ` from the SVD `B_stdᵀ A_std = U Σ Vᵀ`, the scale is `tr Σ`, and
/// the disparity is `1 - (tr Σ)²`.
pub fn procrustes_points(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<ProcrustesResult> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument("configuration shapes differ".into()));
    }
    if a.nrows() < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let (a_std, a_flat) = standardize(a);
    let (b_std, b_flat) = standardize(b);
    let k = a.ncols();
    if a_flat || b_flat {
        // Nothing of A is explained by a point cloud with no spread.
        return Ok(ProcrustesResult {
            rotation: DMatrix::identity(k, k),
            scale: 0.0,
            disparity: 1.0,
            a_std,
            aligned_b: DMatrix::zeros(a.nrows(), k),
            rank: 0,
            degenerate: true,
        });
    }
    let cross = b_std.transpose() * &a_std;
    let svd = cross.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let rotation = u * v_t;
    let scale: f64 = svd.singular_values.iter().sum();
    let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = max_sv * (k as f64) * f64::EPSILON * 16.0;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let aligned_b = &b_std * &rotation * scale;
    let disparity = (&a_std - &aligned_b).norm_squared().clamp(0.0, 1.0);
    Ok(ProcrustesResult {
        rotation,
        scale,
        disparity,
        a_std,
        aligned_b,
        rank,
        degenerate: rank + 1 < k.min(a.nrows()),
    })
}

/// Aligns the rows of `b` onto the rows of `a`, treating each dissimilarity
/// row as a point.
pub fn procrustes(a: &DissimilarityMatrix, b: &DissimilarityMatrix) -> Result<ProcrustesResult> {
    if a.labels != b.labels {
        return Err(Error::LabelMismatch);
    }
    procrustes_points(&a.to_dmatrix(), &b.to_dmatrix())
}

/// Concepts ordered by how badly their rows align, worst first.
///
/// The score is the Euclidean norm of the residual row
/// `A_std[i] - aligned_b[i]`; equal scores are ordered by label.
pub fn rank_discrepant(labels: &[String], result: &ProcrustesResult) -> Vec<(String, f64)> {
    let resid = &result.a_std - &result.aligned_b;
    let mut out: Vec<(String, f64)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), resid.row(i).norm()))
        .collect();
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn as_str(self) -> &'static str {
        match self {
            Choice::A => "A",
            Choice::B => "B",
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

/// A target concept with two options and each constructing space's pick.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub target: ConceptId,
    pub opt_a: ConceptId,
    pub opt_b: ConceptId,
    pub pred_by_space: BTreeMap<String, Choice>,
    /// `min(|Δa|, |Δb|)`: how confidently both spaces disagree.
    pub score: f64,
}

impl Triplet {
    /// Name of the space that picks `choice`, if any.
    pub fn space_choosing(&self, choice: Choice) -> Option<&str> {
        self.pred_by_space
            .iter()
            .find(|(_, &c)| c == choice)
            .map(|(s, _)| s.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub n_triplets: usize,
    pub per_target: usize,
    pub seed: u64,
    /// Both distance differences must exceed this.
    pub noise_floor: f64,
    pub space_a: String,
    pub space_b: String,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            n_triplets: 1_424,
            per_target: 2,
            seed: 0,
            noise_floor: 1e-6,
            space_a: "human".into(),
            space_b: "full".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    /// Targets for which no disagreeing option pair exists.
    pub skipped_targets: Vec<ConceptId>,
}

/// Signed margins for target `t` and options `x`, `y` in both spaces, and
/// whether they form a disagreement above `floor`.
pub fn sign_flip(
    a: &DissimilarityMatrix,
    b: &DissimilarityMatrix,
    t: usize,
    x: usize,
    y: usize,
    floor: f64,
) -> Option<f64> {
    let da = a.get(t, x) - a.get(t, y);
    let db = b.get(t, x) - b.get(t, y);
    let flipped = (da > 0.0 && db < 0.0) || (da < 0.0 && db > 0.0);
    (flipped && da.abs() > floor && db.abs() > floor).then(|| da.abs().min(db.abs()))
}

#[derive(Clone, Copy)]
struct Candidate {
    t: usize,
    x: usize,
    y: usize,
    score: f64,
}

fn by_score_desc(p: &Candidate, q: &Candidate) -> core::cmp::Ordering {
    q.score
        .total_cmp(&p.score)
        .then((p.t, p.x, p.y).cmp(&(q.t, q.x, q.y)))
}

fn concept_set(c: &Candidate) -> [usize; 3] {
    let mut s = [c.t, c.x, c.y];
    s.sort_unstable();
    s
}

/// Mines triplets whose predicted choice differs between spaces `a` and `b`.
///
/// Each target keeps its `per_target` best-scoring disagreeing pairs; the
/// pooled set is cut to the `n_triplets` best, or topped up from the best
/// remaining candidates when it falls short. A triplet is never repeated
/// with the same three concepts. The seed only decides which option is
/// shown as A.
pub fn mine_triplets(
    a: &DissimilarityMatrix,
    b: &DissimilarityMatrix,
    cfg: &MiningConfig,
) -> Result<MiningOutcome> {
    if a.labels != b.labels {
        return Err(Error::LabelMismatch);
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::InvalidArgument("need at least three concepts".into()));
    }
    if cfg.space_a == cfg.space_b {
        return Err(Error::InvalidArgument("space names must differ".into()));
    }

    let mut selected: Vec<Candidate> = Vec::new();
    let mut remainder: Vec<Candidate> = Vec::new();
    let mut skipped = Vec::new();
    let mut used: BTreeSet<[usize; 3]> = BTreeSet::new();
    for t in 0..n {
        let mut cands = Vec::new();
        for x in 0..n {
            for y in x + 1..n {
                if x == t || y == t {
                    continue;
                }
                if let Some(score) = sign_flip(a, b, t, x, y, cfg.noise_floor) {
                    cands.push(Candidate { t, x, y, score });
                }
            }
        }
        if cands.is_empty() {
            skipped.push(ConceptId(t as u32));
            continue;
        }
        cands.sort_by(by_score_desc);
        let mut kept = 0;
        for c in cands {
            if kept < cfg.per_target && used.insert(concept_set(&c)) {
                selected.push(c);
                kept += 1;
            } else {
                remainder.push(c);
            }
        }
    }

    selected.sort_by(by_score_desc);
    if selected.len() > cfg.n_triplets {
        selected.truncate(cfg.n_triplets);
    } else if selected.len() < cfg.n_triplets {
        remainder.sort_by(by_score_desc);
        for c in remainder {
            if selected.len() >= cfg.n_triplets {
                break;
            }
            if used.insert(concept_set(&c)) {
                selected.push(c);
            }
        }
    }

    let mut rng = SeededRng::new(cfg.seed);
    let triplets = selected
        .into_iter()
        .map(|c| {
            let (opt_a, opt_b) = if rng.coin() { (c.y, c.x) } else { (c.x, c.y) };
            // Space `a` picks whichever option it places closer.
            let a_pick = if a.get(c.t, opt_a) < a.get(c.t, opt_b) {
                Choice::A
            } else {
                Choice::B
            };
            let mut pred = BTreeMap::new();
            pred.insert(cfg.space_a.clone(), a_pick);
            pred.insert(cfg.space_b.clone(), a_pick.flip());
            Triplet {
                target: ConceptId(c.t as u32),
                opt_a: ConceptId(opt_a as u32),
                opt_b: ConceptId(opt_b as u32),
                pred_by_space: pred,
                score: c.score,
            }
        })
        .collect();
    Ok(MiningOutcome {
        triplets,
        skipped_targets: skipped,
    })
}
