use std::collections::BTreeMap;

use normforge_core::judgment::{agreement, majority_votes, AgreementFlag, TriadResponse};
use normforge_core::norms::{build_elicitation_matrix, ElicitationRecord};
use normforge_core::reduction::{cluster_phrases, ClusterConfig, PhraseEmbedding};
use normforge_core::similarity::{cosine_dissim, cosine_dissim_dense, mine_triplets, procrustes, Choice, MiningConfig};
use normforge_core::verifier::{build_prompt, parse_response, PromptTemplate};
use normforge_core::{CellProvenance, NormMatrix, SeededRng, View};
use proptest::prelude::*;

fn records() -> Vec<ElicitationRecord> {
    let rows = [
        ("p1", "dog", "barks"),
        ("p2", "dog", "it barks"),
        ("p1", "dog", "has fur"),
        ("p2", "Cat", "has fur"),
        ("p1", "cat", "meows"),
        ("p3", "cow", "moos"),
        ("p3", "cow", "has four legs"),
        ("p1", "dog", "has four legs"),
        ("p2", "cat", "has 4 legs"),
        ("p3", "duck", "quacks"),
        ("p3", "duck", "can fly"),
        ("p1", "duck", "flies"),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, (p, c, f))| ElicitationRecord {
            line: i + 1,
            participant: p.to_string(),
            concept: c.to_string(),
            phrase: f.to_string(),
        })
        .collect()
}

fn embedding(phrase: &str) -> Vec<f64> {
    let base = match phrase {
        "barks" | "it barks" => 0,
        "has fur" => 1,
        "meows" => 2,
        "moos" => 3,
        "has four legs" | "has 4 legs" => 4,
        "quacks" => 5,
        "can fly" | "flies" => 6,
        _ => unreachable!("{phrase}"),
    };
    let mut v = vec![0.0; 8];
    v[base] = 1.0;
    v[7] = if phrase.len().is_multiple_of(2) { 0.01 } else { 0.0 };
    v
}

#[test]
fn elicitation_to_triplets() {
    let el = build_elicitation_matrix(&records(), 1).unwrap();
    assert_eq!(el.matrix.n_concepts(), 4);
    assert_eq!(el.matrix.n_features(), 10);
    assert_eq!(el.collisions.len(), 2);
    assert!(el.collisions.iter().all(|c| c.canonical == "Cat"));

    let embs: Vec<PhraseEmbedding> = el
        .matrix
        .features()
        .iter()
        .map(|f| PhraseEmbedding {
            phrase: f.phrase.clone(),
            vector: embedding(&f.phrase),
        })
        .collect();
    let merged = cluster_phrases(&embs, &ClusterConfig::default(), &el.phrase_frequency).unwrap();
    assert_eq!(merged.len(), 7);
    let mut m = el.matrix.merge_features(merged).unwrap();
    let legs = m.find_feature("has 4 legs").unwrap();
    assert_eq!(m.feature(legs).unwrap().phrase, "has four legs");
    let before = m.clone();

    // Impute a few cells as a verifier cascade would.
    let yes = |c: &str, f: &str| parse_response(if (c, f) == ("cow", "has fur") || f == "has four legs" { "Yes." } else { "No" });
    let absent: Vec<_> = m.absent_cells().collect();
    for (c, f) in absent {
        let (cl, fp) = (m.concept(c).unwrap().label.clone(), m.feature(f).unwrap().phrase.clone());
        let prompt = build_prompt(&PromptTemplate::zero_shot(), &cl, &fp).unwrap();
        assert!(prompt.contains(&format!("[{fp}]")) && prompt.contains(&format!("[{cl}]")));
        if yes(&cl, &fp) {
            m.set(c, f, CellProvenance::AiImputed).unwrap();
        }
    }
    assert_eq!(m.human_only(), before.human_only());
    assert_eq!(m.count(View::Full), before.count(View::Full) + 2);

    let human = cosine_dissim(&m, View::HumanOnly).unwrap();
    let full = cosine_dissim(&m, View::Full).unwrap();
    let p = procrustes(&human, &full).unwrap();
    assert!((0.0..=1.0).contains(&p.disparity));

    let cfg = MiningConfig {
        n_triplets: 4,
        per_target: 1,
        ..Default::default()
    };
    let mined = mine_triplets(&human, &full, &cfg).unwrap();
    let votes_for = |t: &normforge_core::similarity::Triplet| t.pred_by_space["full"];
    let responses: Vec<TriadResponse> = mined
        .triplets
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let v = votes_for(t);
            (0..3).map(move |p| TriadResponse {
                participant: format!("r{p}"),
                triplet: i,
                choice: if p == 2 { v.flip() } else { v },
            })
        })
        .collect();
    let votes = majority_votes(&responses, mined.triplets.len()).unwrap();
    let full_report = agreement("full", &full, &mined.triplets, &votes).unwrap();
    let human_report = agreement("human", &human, &mined.triplets, &votes).unwrap();
    assert_eq!(full_report.k, full_report.n);
    assert_eq!(human_report.k, 0);
    assert!(human_report.flags.iter().all(|f| *f == AgreementFlag::Disagree));
    for t in &mined.triplets {
        assert!(matches!(t.pred_by_space["human"], Choice::A | Choice::B));
    }
}

fn arb_matrix() -> impl Strategy<Value = (NormMatrix, Vec<(usize, usize)>)> {
    (2usize..8, 2usize..8, any::<u64>()).prop_map(|(nc, nf, seed)| {
        let mut rng = SeededRng::new(seed);
        let records: Vec<ElicitationRecord> = (0..nc * 2)
            .map(|i| ElicitationRecord {
                line: i + 1,
                participant: "p".into(),
                concept: format!("c{}", i % nc),
                phrase: format!("f{}", rng.below(nf)),
            })
            .collect();
        let m = build_elicitation_matrix(&records, 1).unwrap().matrix;
        let picks = (0..6)
            .map(|_| (rng.below(m.n_concepts()), rng.below(m.n_features())))
            .collect();
        (m, picks)
    })
}

proptest! {
    #[test]
    fn imputation_never_touches_the_human_view((m, picks) in arb_matrix()) {
        let mut full = m.clone();
        let absent: Vec<_> = m.absent_cells().collect();
        for (c, f) in &picks {
            let cell = absent.iter().find(|(a, b)| a.index() == *c && b.index() == *f);
            if let Some(&(a, b)) = cell {
                full.set(a, b, CellProvenance::AiImputed).unwrap();
            }
        }
        prop_assert_eq!(full.human_only(), m.human_only());
        for (c, f, p) in m.cells() {
            prop_assert_eq!(full.get(c, f), p);
        }
    }

    #[test]
    fn dense_dissimilarity_ignores_positive_row_scale(
        rows in prop::collection::vec(prop::collection::vec(0.1f64..5.0, 4), 3..8),
        scales in prop::collection::vec(0.01f64..100.0, 8),
    ) {
        let labels: Vec<String> = (0..rows.len()).map(|i| format!("c{i}")).collect();
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .zip(&scales)
            .map(|(r, s)| r.iter().map(|x| x * s).collect())
            .collect();
        let a = cosine_dissim_dense(labels.clone(), &rows).unwrap();
        let b = cosine_dissim_dense(labels, &scaled).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mining_is_deterministic(seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let n = 7;
        let space = |rng: &mut SeededRng| {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
            cosine_dissim_dense((0..n).map(|i| format!("c{i}")).collect(), &rows).unwrap()
        };
        let (a, b) = (space(&mut rng), space(&mut rng));
        let cfg = MiningConfig { n_triplets: 6, per_target: 2, seed, ..Default::default() };
        let x = mine_triplets(&a, &b, &cfg).unwrap();
        let y = mine_triplets(&a, &b, &cfg).unwrap();
        prop_assert_eq!(x, y);
    }
}

#[test]
fn phrase_frequency_names_clusters() {
    let el = build_elicitation_matrix(&records(), 1).unwrap();
    let freq: &BTreeMap<String, usize> = &el.phrase_frequency;
    assert_eq!(freq["has fur"], 2);
    assert_eq!(freq["barks"], 1);
}
