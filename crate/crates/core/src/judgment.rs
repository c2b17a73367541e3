//! Predicting triadic choices from a semantic space, majority votes, and
//! the exact binomial and paired t tests used to compare spaces.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::norms::ConceptId;
use crate::similarity::{Choice, DissimilarityMatrix, Triplet};
use crate::special::{ln_choose, student_t_two_sided};

/// Word vectors keyed by word, all of one dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WordVectorTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, word: String, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                phrase: word,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "non-finite entry for {word:?}"
            )));
        }
        self.vectors.insert(word, vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.get(word).or_else(|| self.get(&word.to_lowercase()))
    }

    /// Vector for a concept label: the label itself if present, otherwise
    /// the unweighted mean of its whitespace-separated words that are
    /// present.
    pub fn resolve(&self, label: &str) -> Result<Vec<f64>> {
        let label = label.trim();
        if let Some(v) = self.lookup(label) {
            return Ok(v.to_vec());
        }
        let mut sum = vec![0.0; self.dim];
        let mut k = 0usize;
        for w in label.split_whitespace() {
            if let Some(v) = self.lookup(w) {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                k += 1;
            }
        }
        if k == 0 {
            return Err(Error::Unresolvable(label.to_string()));
        }
        Ok(sum.into_iter().map(|s| s / k as f64).collect())
    }
}

/// Anything that can say how far apart two concepts are.
pub trait ConceptSpace {
    fn distance(&self, a: ConceptId, b: ConceptId) -> Result<f64>;
}

impl ConceptSpace for DissimilarityMatrix {
    fn distance(&self, a: ConceptId, b: ConceptId) -> Result<f64> {
        let n = self.len();
        if a.index() >= n {
            return Err(Error::UnknownConcept(a.index()));
        }
        if b.index() >= n {
            return Err(Error::UnknownConcept(b.index()));
        }
        Ok(self.get(a.index(), b.index()))
    }
}

/// Concept vectors resolved from a word-vector table, compared by cosine
/// dissimilarity. Concepts whose label cannot be resolved stay `None` and
/// fail at query time.
#[derive(Debug, Clone)]
pub struct VectorSpace {
    labels: Vec<String>,
    vectors: Vec<Option<Vec<f64>>>,
}

impl VectorSpace {
    pub fn from_table(table: &WordVectorTable, labels: &[String]) -> Self {
        Self {
            labels: labels.to_vec(),
            vectors: labels.iter().map(|l| table.resolve(l).ok()).collect(),
        }
    }

    pub fn unresolved(&self) -> Vec<&str> {
        self.labels
            .iter()
            .zip(&self.vectors)
            .filter(|(_, v)| v.is_none())
            .map(|(l, _)| l.as_str())
            .collect()
    }

    fn vector(&self, c: ConceptId) -> Result<&[f64]> {
        match self.vectors.get(c.index()) {
            None => Err(Error::UnknownConcept(c.index())),
            Some(None) => Err(Error::Unresolvable(self.labels[c.index()].clone())),
            Some(Some(v)) => Ok(v),
        }
    }
}

impl ConceptSpace for VectorSpace {
    fn distance(&self, a: ConceptId, b: ConceptId) -> Result<f64> {
        let (x, y) = (self.vector(a)?, self.vector(b)?);
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = libm::sqrt(x.iter().map(|p| p * p).sum());
        let ny = libm::sqrt(y.iter().map(|q| q * q).sum());
        if nx == 0.0 || ny == 0.0 {
            return Ok(1.0);
        }
        Ok(1.0 - dot / (nx * ny))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prediction {
    A,
    B,
    Tie,
}

impl From<Choice> for Prediction {
    fn from(c: Choice) -> Self {
        match c {
            Choice::A => Prediction::A,
            Choice::B => Prediction::B,
        }
    }
}

impl Prediction {
    pub fn as_str(self) -> &'static str {
        match self {
            Prediction::A => "A",
            Prediction::B => "B",
            Prediction::Tie => "Tie",
        }
    }
}

/// The option closer to the target; exact ties are reported as such.
pub fn predict_choice<S: ConceptSpace + ?Sized>(space: &S, t: &Triplet) -> Result<Prediction> {
    let da = space.distance(t.target, t.opt_a)?;
    let db = space.distance(t.target, t.opt_b)?;
    Ok(if da < db {
        Prediction::A
    } else if db < da {
        Prediction::B
    } else {
        Prediction::Tie
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriadResponse {
    pub participant: String,
    pub triplet: usize,
    pub choice: Choice,
}

/// Strict-majority choice for one triplet.
pub fn majority_vote(responses: &[TriadResponse], triplet: usize) -> Result<Prediction> {
    let (mut a, mut b) = (0usize, 0usize);
    for r in responses.iter().filter(|r| r.triplet == triplet) {
        match r.choice {
            Choice::A => a += 1,
            Choice::B => b += 1,
        }
    }
    if a + b == 0 {
        return Err(Error::NoResponses(triplet));
    }
    Ok(match a.cmp(&b) {
        core::cmp::Ordering::Greater => Prediction::A,
        core::cmp::Ordering::Less => Prediction::B,
        core::cmp::Ordering::Equal => Prediction::Tie,
    })
}

/// Majority votes for triplets `0..n`, or an error naming the first triplet
/// without responses.
pub fn majority_votes(responses: &[TriadResponse], n: usize) -> Result<Vec<Prediction>> {
    let mut tally = vec![(0usize, 0usize); n];
    for r in responses {
        if r.triplet >= n {
            return Err(Error::InvalidArgument(alloc::format!(
                "response for unknown triplet {}",
                r.triplet
            )));
        }
        match r.choice {
            Choice::A => tally[r.triplet].0 += 1,
            Choice::B => tally[r.triplet].1 += 1,
        }
    }
    tally
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| match (a, b) {
            (0, 0) => Err(Error::NoResponses(i)),
            (a, b) if a > b => Ok(Prediction::A),
            (a, b) if b > a => Ok(Prediction::B),
            _ => Ok(Prediction::Tie),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgreementFlag {
    Agree,
    Disagree,
    /// Excluded: the human vote was tied.
    VoteTie,
    /// Excluded: the space placed both options equally far.
    PredictionTie,
}

impl AgreementFlag {
    pub fn counted(self) -> Option<bool> {
        match self {
            AgreementFlag::Agree => Some(true),
            AgreementFlag::Disagree => Some(false),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgreementFlag::Agree => "agree",
            AgreementFlag::Disagree => "disagree",
            AgreementFlag::VoteTie => "vote_tie",
            AgreementFlag::PredictionTie => "prediction_tie",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub space: String,
    pub proportion: f64,
    pub k: u64,
    pub n: u64,
    pub p_value: f64,
    pub flags: Vec<AgreementFlag>,
}

/// Scores a space's predictions against the human majority votes.
pub fn agreement<S: ConceptSpace + ?Sized>(
    name: &str,
    space: &S,
    triplets: &[Triplet],
    votes: &[Prediction],
) -> Result<AgreementReport> {
    if votes.len() != triplets.len() {
        return Err(Error::MissingVote(votes.len().min(triplets.len())));
    }
    let mut flags = Vec::with_capacity(triplets.len());
    let (mut k, mut n) = (0u64, 0u64);
    for (t, &vote) in triplets.iter().zip(votes) {
        let flag = if vote == Prediction::Tie {
            AgreementFlag::VoteTie
        } else {
            match predict_choice(space, t)? {
                Prediction::Tie => AgreementFlag::PredictionTie,
                p if p == vote => AgreementFlag::Agree,
                _ => AgreementFlag::Disagree,
            }
        };
        if let Some(agreed) = flag.counted() {
            n += 1;
            k += agreed as u64;
        }
        flags.push(flag);
    }
    let proportion = if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let p_value = if n == 0 { 1.0 } else { binomial_test(k, n, 0.5)? };
    Ok(AgreementReport {
        space: name.to_string(),
        proportion,
        k,
        n,
        p_value,
        flags,
    })
}

/// Exact two-sided binomial test: the total probability of outcomes no more
/// likely than the observed one. Computed in log space.
pub fn binomial_test(k: u64, n: u64, p0: f64) -> Result<f64> {
    if n == 0 || k > n {
        return Err(Error::InvalidArgument(alloc::format!(
            "binomial test needs 0 <= k <= n and n >= 1 (k={k}, n={n})"
        )));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::ProbabilityOutOfRange(p0));
    }
    let (lp, lq) = (libm::log(p0), libm::log1p(-p0));
    let ln_pmf = |i: u64| ln_choose(n, i) + i as f64 * lp + (n - i) as f64 * lq;
    let observed = ln_pmf(k);
    // Relative slack so outcomes equal to P(k) up to rounding count as
    // "as extreme".
    let cutoff = observed + 1e-7;
    let mut total = 0.0;
    for i in 0..=n {
        let l = ln_pmf(i);
        if l <= cutoff {
            total += libm::exp(l);
        }
    }
    Ok(total.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Paired two-sided t test on `x - y`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTestResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("paired samples differ in length".into()));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t test needs n >= 2".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    if var.is_nan() || var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = mean / libm::sqrt(var / nf);
    let df = nf - 1.0;
    Ok(TTestResult {
        t,
        df,
        p_value: student_t_two_sided(t, df),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triplet(t: u32, a: u32, b: u32) -> Triplet {
        Triplet {
            target: ConceptId(t),
            opt_a: ConceptId(a),
            opt_b: ConceptId(b),
            pred_by_space: BTreeMap::new(),
            score: 1.0,
        }
    }

    struct Table(Vec<Vec<f64>>);
    impl ConceptSpace for Table {
        fn distance(&self, a: ConceptId, b: ConceptId) -> Result<f64> {
            Ok(self.0[a.index()][b.index()])
        }
    }

    fn resp(p: &str, t: usize, c: Choice) -> TriadResponse {
        TriadResponse {
            participant: p.into(),
            triplet: t,
            choice: c,
        }
    }

    #[test]
    fn word_table_resolution() {
        let mut w = WordVectorTable::new(3);
        w.insert("fire".into(), vec![1.0, 0.0, 2.0]).unwrap();
        w.insert("truck".into(), vec![3.0, 2.0, 0.0]).unwrap();
        assert_eq!(w.resolve("fire truck").unwrap(), vec![2.0, 1.0, 1.0]);
        assert_eq!(w.resolve("Fire").unwrap(), vec![1.0, 0.0, 2.0]);
        assert!(matches!(w.resolve("boat"), Err(Error::Unresolvable(_))));
        assert!(w.insert("x".into(), vec![1.0]).is_err());
    }

    #[test]
    fn predict_examples() {
        let s = Table(vec![vec![0.0, 0.2, 0.5], vec![0.2, 0.0, 0.1], vec![0.5, 0.1, 0.0]]);
        assert_eq!(predict_choice(&s, &triplet(0, 1, 2)).unwrap(), Prediction::A);
        assert_eq!(predict_choice(&s, &triplet(0, 2, 1)).unwrap(), Prediction::B);
        let tie = Table(vec![vec![0.0, 0.3, 0.3], vec![0.3, 0.0, 0.1], vec![0.3, 0.1, 0.0]]);
        assert_eq!(predict_choice(&tie, &triplet(0, 1, 2)).unwrap(), Prediction::Tie);
    }

    #[test]
    fn vote_examples() {
        let mut r = Vec::new();
        for i in 0..16 {
            r.push(resp(&alloc::format!("p{i}"), 0, Choice::A));
        }
        for i in 16..31 {
            r.push(resp(&alloc::format!("p{i}"), 0, Choice::B));
        }
        for i in 0..3 {
            r.push(resp(&alloc::format!("p{i}"), 1, Choice::A));
            r.push(resp(&alloc::format!("q{i}"), 1, Choice::B));
        }
        assert_eq!(majority_vote(&r, 0).unwrap(), Prediction::A);
        assert_eq!(majority_vote(&r, 1).unwrap(), Prediction::Tie);
        assert!(matches!(majority_vote(&r, 2), Err(Error::NoResponses(2))));
        assert_eq!(majority_votes(&r, 2).unwrap(), vec![Prediction::A, Prediction::Tie]);
        assert!(majority_votes(&r, 3).is_err());
    }

    #[test]
    fn agreement_with_self_and_anti() {
        let s = Table(vec![
            vec![0.0, 0.2, 0.5, 0.4],
            vec![0.2, 0.0, 0.1, 0.3],
            vec![0.5, 0.1, 0.0, 0.6],
            vec![0.4, 0.3, 0.6, 0.0],
        ]);
        let ts = vec![triplet(0, 1, 2), triplet(1, 3, 2), triplet(3, 0, 2)];
        let votes: Vec<Prediction> = ts.iter().map(|t| predict_choice(&s, t).unwrap()).collect();
        let anti: Vec<Prediction> = votes
            .iter()
            .map(|v| match v {
                Prediction::A => Prediction::B,
                Prediction::B => Prediction::A,
                Prediction::Tie => Prediction::Tie,
            })
            .collect();
        let good = agreement("s", &s, &ts, &votes).unwrap();
        assert_eq!(good.proportion, 1.0);
        let bad = agreement("s", &s, &ts, &anti).unwrap();
        assert_eq!(bad.proportion, 0.0);
        assert_eq!(good.n, bad.n);
        let mut with_tie = votes.clone();
        with_tie[1] = Prediction::Tie;
        let r = agreement("s", &s, &ts, &with_tie).unwrap();
        assert_eq!(r.n, 2);
        assert_eq!(r.flags[1], AgreementFlag::VoteTie);
        assert!(agreement("s", &s, &ts, &votes[..2]).is_err());
    }

    #[test]
    fn binomial_examples() {
        for n in [2u64, 10, 100, 1424] {
            assert_eq!(binomial_test(n / 2, n, 0.5).unwrap(), 1.0);
        }
        assert!((binomial_test(2, 2, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!(binomial_test(1228, 1424, 0.5).unwrap() < 0.001);
        assert!(binomial_test(3, 2, 0.5).is_err());
        assert!(binomial_test(0, 0, 0.5).is_err());
    }

    #[test]
    fn binomial_matches_enumeration() {
        use statrs::distribution::{Binomial, Discrete};
        for &(k, n, p) in &[(3u64, 10u64, 0.5), (7, 20, 0.3), (0, 15, 0.2), (50, 60, 0.5)] {
            let d = Binomial::new(p, n).unwrap();
            let pk = d.pmf(k);
            let want: f64 = (0..=n).map(|i| d.pmf(i)).filter(|&q| q <= pk * (1.0 + 1e-7)).sum();
            let got = binomial_test(k, n, p).unwrap();
            assert!((got - want.min(1.0)).abs() < 1e-10, "{k}/{n}: {got} vs {want}");
        }
    }

    #[test]
    fn t_test_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(paired_t_test(&x, &x).unwrap_err(), Error::ZeroVariance);
        let r = paired_t_test(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        assert_eq!(r.df, 3.0);
    }

    proptest! {
        #[test]
        fn binomial_symmetric(n in 1u64..400, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).round() as u64;
            let a = binomial_test(k, n, 0.5).unwrap();
            let b = binomial_test(n - k, n, 0.5).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn t_antisymmetric(pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Ok(a), Ok(b)) = (paired_t_test(&x, &y), paired_t_test(&y, &x)) {
                prop_assert!((a.t + b.t).abs() < 1e-9 * (1.0 + a.t.abs()));
                prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
            }
        }

        #[test]
        fn monotone_distance_transform_keeps_choice(d in proptest::collection::vec(0.0f64..2.0, 3)) {
            let s = Table(vec![
                vec![0.0, d[0], d[1]],
                vec![d[0], 0.0, d[2]],
                vec![d[1], d[2], 0.0],
            ]);
            let g = Table(s.0.iter().map(|r| r.iter().map(|v| libm::exp(3.0 * v) + 7.0).collect()).collect());
            let t = triplet(0, 1, 2);
            prop_assert_eq!(predict_choice(&s, &t).unwrap(), predict_choice(&g, &t).unwrap());
        }
    }
}
