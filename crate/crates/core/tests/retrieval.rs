mod common;

use std::collections::{HashMap, HashSet};

use adaprompt::query::{build_queries, build_retrieval_set, InputText, QueryMode, RetrievalPlan};
use adaprompt::text::dedup_key;
use adaprompt::{build_index, CorpusIndex, PromptTemplate, ScoringMode};
use common::{Oracle, OracleMode, TableLm};
use proptest::prelude::*;

fn table_lm(words: &[(&str, f64)]) -> TableLm {
    TableLm {
        probs: words
            .iter()
            .map(|(w, p)| (w.to_string(), *p))
            .collect::<HashMap<_, _>>(),
    }
}

fn plan(top_o: usize, k: usize) -> RetrievalPlan {
    RetrievalPlan {
        top_o,
        k,
        mode: QueryMode::PromptAware,
        query_source: "test".into(),
    }
}

#[test]
fn queries_follow_prediction_order() {
    let t = PromptTemplate::parse("sst2", "{input} In summary, this movie is {mask}.").unwrap();
    let lm = table_lm(&[("good", 0.5), ("great", 0.3), ("bad", 0.2)]);
    let qs = build_queries(&lm, &t, "It's a charming journey.", 3).unwrap();
    assert_eq!(
        qs,
        [
            "It's a charming journey. In summary, this movie is good.",
            "It's a charming journey. In summary, this movie is great.",
            "It's a charming journey. In summary, this movie is bad.",
        ]
    );
}

#[test]
fn distinct_and_overlapping_hits() {
    let t = PromptTemplate::parse("t", "{input} {mask}").unwrap();
    let lm = table_lm(&[("alpha", 0.6), ("beta", 0.4)]);
    let inputs = [InputText::new("0", "x")];

    let distinct = CorpusIndex::from_sentences(
        [
            "alpha one",
            "alpha two",
            "alpha three",
            "beta one",
            "beta two",
            "beta three",
        ]
        .map(|s| (s, "c")),
        ScoringMode::Bm25,
    )
    .unwrap();
    let set = build_retrieval_set(&distinct, &lm, &t, &inputs, &plan(2, 3)).unwrap();
    assert_eq!((set.size_raw, set.size_deduped()), (6, 6));

    // two sentences mention both fillers, so both queries return them
    let overlapping = CorpusIndex::from_sentences(
        ["alpha beta one", "alpha beta two", "alpha three", "beta three"].map(|s| (s, "c")),
        ScoringMode::Bm25,
    )
    .unwrap();
    let set = build_retrieval_set(&overlapping, &lm, &t, &inputs, &plan(2, 3)).unwrap();
    assert_eq!((set.size_raw, set.size_deduped()), (6, 4));
    let shared = set.provenance.iter().filter(|p| p.len() == 2).count();
    assert_eq!(shared, 2);
}

#[test]
fn textual_duplicates_collapse_with_first_seen_order() {
    let t = PromptTemplate::parse("t", "{input} {mask}").unwrap();
    let lm = table_lm(&[("alpha", 1.0)]);
    let idx = CorpusIndex::from_sentences(
        ["alpha  beta", "alpha beta", "Alpha beta", "alpha gamma"].map(|s| (s, "c")),
        ScoringMode::Bm25,
    )
    .unwrap();
    let set = build_retrieval_set(&idx, &lm, &t, &[InputText::new("0", "x")], &plan(1, 10)).unwrap();
    assert_eq!(set.size_raw, 4);
    // whitespace collapses, case is kept
    assert_eq!(set.size_deduped(), 3);
    let keys: HashSet<String> = set.sentences.iter().map(|s| dedup_key(s)).collect();
    assert_eq!(keys.len(), set.sentences.len());
}

#[test]
fn saved_sets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "alpha one\nbeta two\n\nalpha beta\n").unwrap();
    let idx = build_index(&[&corpus], ScoringMode::Bm25).unwrap();
    let t = PromptTemplate::parse("t", "{input} {mask}").unwrap();
    let lm = table_lm(&[("alpha", 0.6), ("beta", 0.4)]);
    let set = build_retrieval_set(
        &idx,
        &lm,
        &t,
        &[InputText::new("a", "x"), InputText::new("b", "y")],
        &plan(2, 2),
    )
    .unwrap();
    let (s, p) = (dir.path().join("s.txt"), dir.path().join("p.jsonl"));
    set.save(&s, &p).unwrap();
    assert_eq!(adaprompt::query::read_sentences(&s).unwrap(), set.sentences);
    let lines: Vec<_> = std::fs::read_to_string(&p)
        .unwrap()
        .lines()
        .map(|l| adaprompt::query::parse_provenance_line(l).unwrap())
        .collect();
    assert_eq!(lines.len(), set.sentences.len());
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l.sentence, i);
        assert_eq!(l.hits, set.provenance[i]);
    }
}

fn corpus() -> impl Strategy<Value = Vec<String>> {
    let word = prop::sample::select((0..30).map(|i| format!("t{i}")).collect::<Vec<_>>());
    prop::collection::vec(prop::collection::vec(word, 1..10).prop_map(|w| w.join(" ")), 1..60)
}

fn query() -> impl Strategy<Value = String> {
    prop::collection::vec((0..35usize).prop_map(|i| format!("t{i}")), 1..5).prop_map(|w| w.join(" "))
}

fn mode() -> impl Strategy<Value = ScoringMode> {
    prop_oneof![Just(ScoringMode::Bm25), Just(ScoringMode::ClassicTfIdf)]
}

proptest! {
    #[test]
    fn smaller_k_is_a_prefix(docs in corpus(), q in query(), k in 1usize..20, mode in mode()) {
        let idx = CorpusIndex::from_sentences(docs.iter().map(|d| (d.as_str(), "c")), mode).unwrap();
        let small = idx.retrieve(&q, k);
        let big = idx.retrieve(&q, k + 7);
        prop_assert!(small.len() <= k);
        prop_assert_eq!(&big[..small.len()], &small[..]);
    }

    #[test]
    fn retrieval_is_deterministic_and_survives_encoding(docs in corpus(), q in query(), mode in mode()) {
        let idx = CorpusIndex::from_sentences(docs.iter().map(|d| (d.as_str(), "c")), mode).unwrap();
        let again = CorpusIndex::from_sentences(docs.iter().map(|d| (d.as_str(), "c")), mode).unwrap();
        prop_assert_eq!(idx.encode(), again.encode());
        let decoded = CorpusIndex::decode(&idx.encode()).unwrap();
        prop_assert_eq!(idx.retrieve(&q, 50), decoded.retrieve(&q, 50));
    }

    #[test]
    fn scores_are_positive_and_match_oracle(docs in corpus(), q in query(), mode in mode()) {
        let idx = CorpusIndex::from_sentences(docs.iter().map(|d| (d.as_str(), "c")), mode).unwrap();
        let omode = if mode == ScoringMode::Bm25 { OracleMode::Bm25 } else { OracleMode::TfIdf };
        let want = Oracle::new(&docs).rank(&q, omode);
        let got = idx.retrieve(&q, docs.len());
        prop_assert_eq!(got.len(), want.len());
        for (h, (d, s)) in got.iter().zip(&want) {
            prop_assert!(h.score > 0.0);
            prop_assert_eq!(h.doc_id, *d);
            prop_assert!((h.score - s).abs() <= 1e-9);
        }
    }

    #[test]
    fn retrieval_sets_are_idempotent_and_complete(docs in corpus(), inputs in prop::collection::vec(query(), 1..6), top_o in 1usize..4, k in 1usize..6) {
        let idx = CorpusIndex::from_sentences(docs.iter().map(|d| (d.as_str(), "c")), ScoringMode::Bm25).unwrap();
        let lm = table_lm(&[("t1", 0.4), ("t2", 0.3), ("t3", 0.2), ("zz", 0.1)]);
        let t = PromptTemplate::parse("t", "{input} {mask}").unwrap();
        let inputs: Vec<InputText> = inputs.iter().enumerate().map(|(i, q)| InputText::new(i.to_string(), q.clone())).collect();
        let a = build_retrieval_set(&idx, &lm, &t, &inputs, &plan(top_o, k)).unwrap();
        let b = build_retrieval_set(&idx, &lm, &t, &inputs, &plan(top_o, k)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.size_deduped() <= a.size_raw);
        prop_assert!(a.size_raw <= inputs.len() * top_o * k);
        for (s, prov) in a.sentences.iter().zip(&a.provenance) {
            prop_assert!(!prov.is_empty());
            for h in prov {
                let input = &inputs[h.input_id.parse::<usize>().unwrap()];
                let q = &a.queries[h.input_id.parse::<usize>().unwrap()][h.query_index];
                prop_assert!(q.starts_with(&input.text));
                let hit = &idx.retrieve(q, k)[h.rank - 1];
                prop_assert_eq!(dedup_key(&idx.doc(hit.doc_id).unwrap().text), dedup_key(s));
            }
        }

        let raw = RetrievalPlan { mode: QueryMode::RawInput, ..plan(top_o, k) };
        let r = build_retrieval_set(&idx, &lm, &t, &inputs, &raw).unwrap();
        prop_assert_eq!(r.queries_issued, inputs.len());
    }
}
