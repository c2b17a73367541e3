//! Verification prompts, response parsing and cache keys.

use alloc::string::{String, ToString};
use core::fmt::Write;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::norms::{ConceptId, FeatureId};

/// Instruction preceding each question, reproduced verbatim (including the
/// doubled "question").
pub const INSTRUCTION: &str = "In one word True or False, answer the following question question:";

/// Responses are cut to this many whitespace-delimited tokens before
/// matching.
pub const MAX_RESPONSE_TOKENS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptMode {
    ZeroShot,
    TwoShot,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "0shot",
            PromptMode::TwoShot => "2shot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0shot" | "zero-shot" | "zeroshot" | "zero_shot" => Some(PromptMode::ZeroShot),
            "2shot" | "two-shot" | "twoshot" | "two_shot" => Some(PromptMode::TwoShot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub concept: String,
    pub feature: String,
    pub answer: bool,
}

impl Exemplar {
    pub fn new(concept: &str, feature: &str, answer: bool) -> Self {
        Self {
            concept: concept.to_string(),
            feature: feature.to_string(),
            answer,
        }
    }
}

/// Default in-context examples: one true pair and one false pair.
pub fn default_exemplars() -> [Exemplar; 2] {
    [
        Exemplar::new("dog", "has ears", true),
        Exemplar::new("car", "has feathers", false),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    mode: PromptMode,
    exemplars: Option<[Exemplar; 2]>,
}

impl PromptTemplate {
    pub fn zero_shot() -> Self {
        Self {
            mode: PromptMode::ZeroShot,
            exemplars: None,
        }
    }

    /// Two-shot template; the exemplars must hold exactly one true and one
    /// false answer.
    pub fn two_shot(exemplars: [Exemplar; 2]) -> Result<Self> {
        if exemplars[0].answer == exemplars[1].answer {
            return Err(Error::InvalidArgument(
                "two-shot exemplars need one true and one false answer".into(),
            ));
        }
        for e in &exemplars {
            if e.concept.trim().is_empty() || e.feature.trim().is_empty() {
                return Err(Error::InvalidArgument("empty exemplar".into()));
            }
        }
        Ok(Self {
            mode: PromptMode::TwoShot,
            exemplars: Some(exemplars),
        })
    }

    pub fn for_mode(mode: PromptMode, exemplars: [Exemplar; 2]) -> Result<Self> {
        match mode {
            PromptMode::ZeroShot => Ok(Self::zero_shot()),
            PromptMode::TwoShot => Self::two_shot(exemplars),
        }
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn exemplars(&self) -> Option<&[Exemplar; 2]> {
        self.exemplars.as_ref()
    }

    /// Hex SHA-256 over the exemplars, or `"none"` for zero-shot.
    pub fn exemplars_digest(&self) -> String {
        match &self.exemplars {
            None => "none".to_string(),
            Some(ex) => {
                let mut h = Sha256::new();
                for e in ex {
                    h.update(e.concept.as_bytes());
                    h.update([0x1f]);
                    h.update(e.feature.as_bytes());
                    h.update([0x1f]);
                    h.update(if e.answer { b"True" as &[u8] } else { b"False" });
                    h.update([0x1e]);
                }
                hex(&h.finalize())
            }
        }
    }
}

fn question(concept: &str, feature: &str) -> String {
    alloc::format!("{INSTRUCTION} Is the property [{feature}] true for [{concept}]? Answer:")
}

/// Renders the verification prompt for one concept-feature pair.
///
/// Two-shot prompts prefix the exemplars as answered question blocks,
/// separated by blank lines.
pub fn build_prompt(t: &PromptTemplate, concept: &str, feature: &str) -> Result<String> {
    let (concept, feature) = (concept.trim(), feature.trim());
    if concept.is_empty() || feature.is_empty() {
        return Err(Error::InvalidArgument(
            "concept and feature must be non-empty".into(),
        ));
    }
    let mut out = String::new();
    if let Some(ex) = &t.exemplars {
        for e in ex {
            let answer = if e.answer { "True" } else { "False" };
            let _ = write!(out, "{} {answer}\n\n", question(&e.concept, &e.feature));
        }
    }
    out.push_str(&question(concept, feature));
    Ok(out)
}

/// Maps raw model text to a verdict.
///
/// The first five whitespace-delimited tokens are stripped of surrounding
/// punctuation and scanned left to right; the first token equal (ignoring
/// case) to `true`/`yes` gives `true`, to `false`/`no` gives `false`.
/// Anything else defaults to `false`.
pub fn parse_response(raw: &str) -> bool {
    for token in raw.split_whitespace().take(MAX_RESPONSE_TOKENS) {
        let word = token.trim_matches(|c: char| !c.is_alphanumeric());
        if word.eq_ignore_ascii_case("true") || word.eq_ignore_ascii_case("yes") {
            return true;
        }
        if word.eq_ignore_ascii_case("false") || word.eq_ignore_ascii_case("no") {
            return false;
        }
    }
    false
}

/// Stable key identifying one verification request.
pub fn cache_key(
    model_id: &str,
    mode: PromptMode,
    exemplars_digest: &str,
    concept: &str,
    feature: &str,
) -> String {
    let mut h = Sha256::new();
    for part in [
        model_id,
        mode.as_str(),
        exemplars_digest,
        concept.trim(),
        feature.trim(),
    ] {
        h.update(part.as_bytes());
        h.update([0x1f]);
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// One model decision on a concept-feature pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationRecord {
    pub concept_id: ConceptId,
    pub feature_id: FeatureId,
    pub model_id: String,
    pub mode: PromptMode,
    pub raw_text: String,
    pub parsed: bool,
    pub cache_key: String,
}

/// Outcome of the two-stage cascade for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CascadeVerdict {
    pub stage1: bool,
    /// `None` when stage 1 said false and stage 2 was never asked.
    pub stage2: Option<bool>,
}

impl CascadeVerdict {
    pub fn accepted(&self) -> bool {
        self.stage1 && self.stage2 == Some(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn zero_shot_prompt_text() {
        let p = build_prompt(&PromptTemplate::zero_shot(), "alligator", "has legs").unwrap();
        assert!(p.contains("Is the property [has legs] true for [alligator]? Answer:"));
        assert_eq!(
            p,
            "In one word True or False, answer the following question question: \
             Is the property [has legs] true for [alligator]? Answer:"
        );
    }

    #[test]
    fn two_shot_prompt_layout() {
        let t = PromptTemplate::two_shot([
            Exemplar::new("dog", "has ears", true),
            Exemplar::new("car", "has feathers", false),
        ])
        .unwrap();
        let p = build_prompt(&t, "alligator", "has legs").unwrap();
        let blocks: Vec<&str> = p.split("\n\n").collect();
        assert_eq!(blocks.len(), 3);
        assert!(blocks[0].ends_with("Is the property [has ears] true for [dog]? Answer: True"));
        assert!(blocks[1].ends_with("Is the property [has feathers] true for [car]? Answer: False"));
        assert!(blocks[2].ends_with("Is the property [has legs] true for [alligator]? Answer:"));
    }

    #[test]
    fn two_shot_requires_mixed_answers() {
        let r = PromptTemplate::two_shot([
            Exemplar::new("dog", "has ears", true),
            Exemplar::new("cat", "has ears", true),
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(build_prompt(&PromptTemplate::zero_shot(), "", "x").is_err());
        assert!(build_prompt(&PromptTemplate::zero_shot(), "x", " ").is_err());
    }

    #[test]
    fn parse_examples() {
        assert!(parse_response("True"));
        assert!(!parse_response("I am not certain about it"));
        assert!(!parse_response("Not really, no."));
        assert!(!parse_response("blah blah blah blah blah true"));
        assert!(parse_response("  yes."));
        assert!(parse_response("**TRUE**"));
        assert!(!parse_response(""));
        assert!(!parse_response("False, but true sometimes"));
        assert!(parse_response("Answer: True"));
    }

    #[test]
    fn cache_key_is_stable_and_sensitive() {
        let d = PromptTemplate::zero_shot().exemplars_digest();
        let k = cache_key("m", PromptMode::ZeroShot, &d, "dog", "barks");
        assert_eq!(k, cache_key("m", PromptMode::ZeroShot, &d, " dog", "barks "));
        assert_eq!(k.len(), 64);
        assert_ne!(k, cache_key("m2", PromptMode::ZeroShot, &d, "dog", "barks"));
        assert_ne!(k, cache_key("m", PromptMode::TwoShot, &d, "dog", "barks"));
        assert_ne!(k, cache_key("m", PromptMode::ZeroShot, &d, "dog", "bark"));
    }

    #[test]
    fn cascade_verdict_conjunction() {
        let v = CascadeVerdict { stage1: false, stage2: None };
        assert!(!v.accepted());
        assert!(!CascadeVerdict { stage1: true, stage2: Some(false) }.accepted());
        assert!(CascadeVerdict { stage1: true, stage2: Some(true) }.accepted());
    }
}
