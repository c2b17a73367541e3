use alloc::string::String;

/// Errors produced by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("duplicate concept label {label:?} (collides with {existing:?})")]
    DuplicateConcept { label: String, existing: String },

    #[error("unknown concept id {0}")]
    UnknownConcept(usize),

    #[error("unknown feature id {0}")]
    UnknownFeature(usize),

    #[error("phrase {0:?} has a zero-norm embedding")]
    ZeroNormEmbedding(String),

    #[error("embedding for {phrase:?} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        phrase: String,
        expected: usize,
        found: usize,
    },

    #[error("phrase {0:?} appears more than once")]
    DuplicatePhrase(String),

    #[error("sample size {requested} exceeds population of {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("concept {0:?} has no features in the selected view")]
    EmptyRow(String),

    #[error("label sets of the two matrices differ")]
    LabelMismatch,

    #[error("no prediction for pair (concept {concept}, feature {feature})")]
    MissingPrediction { concept: usize, feature: usize },

    #[error("need at least one positive and one negative item (got {positives} and {negatives})")]
    DegenerateClasses { positives: u64, negatives: u64 },

    #[error("perplexity {perplexity} infeasible for {points} points")]
    InfeasiblePerplexity { perplexity: f64, points: usize },

    #[error("word {0:?} is not in the vector table")]
    Unresolvable(String),

    #[error("differences have zero variance")]
    ZeroVariance,

    #[error("no responses for triplet {0}")]
    NoResponses(usize),

    #[error("no majority vote for triplet {0}")]
    MissingVote(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
