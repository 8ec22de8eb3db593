use adaprompt::eval::LabeledExample;
use adaprompt::lm::CountMlm;
use adaprompt::pipeline::run_zero_shot;
use adaprompt::{MaskedLm, PromptTemplate, TrainConfig, Verbalizer};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

// Reference values below were produced by a separate Python implementation
// of the smoothed window model and frozen here.

#[test]
fn distribution_matches_reference() {
    let m = CountMlm::trained(
        0.1,
        5,
        [
            "the movie was good and fun",
            "the film was bad and dull",
            "a fun movie , good",
            "dull plot , bad film",
            "the cast was good",
        ],
    );
    assert_eq!(m.vocab().len(), 12);
    assert_eq!(m.total_tokens(), 24);
    let masked = "the movie was <mask> and fun";
    assert_eq!(m.context(masked).unwrap(), ["the", "movie", "was", "and", "fun"]);
    let top = m.predict_fillers(masked, 4).unwrap();
    assert_eq!(top[0].token, "good");
    assert!((top[0].prob - 0.8234872374615967).abs() < TOL);
    assert_eq!(top[1].token, "and");
    assert!((top[1].prob - 0.05419573739933061).abs() < TOL);
    // "the" and "was" are equal up to rounding
    for p in &top[2..] {
        assert!(p.token == "the" || p.token == "was");
        assert!((p.prob - 0.030321687503985).abs() < TOL);
    }
    let all = m.predict_fillers(masked, 100).unwrap();
    assert_eq!(all.len(), 12);
    assert!((all.iter().map(|p| p.prob).sum::<f64>() - 1.0).abs() < TOL);
}

#[test]
fn toy_zero_shot_matches_hand_scoring() {
    let m = CountMlm::trained(
        0.1,
        5,
        [
            "a warm funny story , it was good",
            "warm and funny , it was good",
            "a sweet story , it was good",
            "a cold boring story , it was bad",
            "boring and cold , it was bad",
            "a grim story , it was bad",
        ],
    );
    let template = PromptTemplate::parse("toy", "{input} it was {mask} .").unwrap();
    let verb = Verbalizer::new([("pos", vec!["good"]), ("neg", vec!["bad"])]).unwrap();
    // (text, gold, reference prediction, p(good), p(bad))
    let table = [
        ("warm story", "pos", "pos", 0.36462765310178885, 0.017363221576275668),
        ("funny film", "pos", "pos", 0.2722260518729769, 0.01296314532728462),
        (
            "sweet and warm",
            "pos",
            "pos",
            0.8046457200064667,
            0.0034833148052228007,
        ),
        ("boring plot", "neg", "neg", 0.01296314532728462, 0.2722260518729769),
        ("cold and grim", "neg", "neg", 0.0034833148052228007, 0.8046457200064667),
        ("a grim ending", "neg", "neg", 0.018621540057118337, 0.20483694062830174),
        ("funny but cold", "pos", "pos", 0.04758249654052725, 0.04758249654052725),
        (
            "boring yet sweet",
            "neg",
            "neg",
            0.03988212955281664,
            0.0761386109644681,
        ),
        ("plain story", "pos", "pos", 0.15253944224282118, 0.15253944224282118),
        ("nothing here", "neg", "pos", 0.10408682243426325, 0.10408682243426325),
    ];
    let eval: Vec<LabeledExample> = table
        .iter()
        .enumerate()
        .map(|(i, (t, g, ..))| LabeledExample {
            example_id: i.to_string(),
            text: t.to_string(),
            label: g.to_string(),
        })
        .collect();
    let out = run_zero_shot(&m, &template, &verb, &eval).unwrap();
    for (rec, (text, _, pred, pg, pb)) in out.predictions.iter().zip(&table) {
        assert_eq!(rec.predicted.as_deref(), Some(*pred), "{text}");
        assert!((rec.scores[0].score - pg).abs() < TOL, "{text}");
        assert!((rec.scores[1].score - pb).abs() < TOL, "{text}");
    }
    assert_eq!(out.accuracy, 0.9);
}

#[test]
fn training_flips_the_top_filler() {
    let base = CountMlm::trained(0.1, 5, ["the plot was fine", "the plot was fine", "it was good"]);
    let masked = "the plot was <mask>";
    assert_eq!(base.predict_fillers(masked, 1).unwrap()[0].token, "fine");
    let trained = base
        .continual_train(
            &[
                "the plot was good".to_string(),
                "the plot was good".to_string(),
                "the plot was good".to_string(),
            ],
            &TrainConfig::default(),
        )
        .unwrap();
    assert_eq!(trained.predict_fillers(masked, 1).unwrap()[0].token, "good");
    assert_eq!(base.predict_fillers(masked, 1).unwrap()[0].token, "fine");
    assert_ne!(trained.checkpoint(), base.checkpoint());
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f", "g"]), 1..8).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn distribution_is_normalized(sents in prop::collection::vec(sentence(), 1..20), left in sentence(), right in sentence()) {
        let m = CountMlm::trained(0.1, 3, &sents);
        let dist = m.predict_fillers(&format!("{left} <mask> {right}"), usize::MAX).unwrap();
        let total: f64 = dist.iter().map(|p| p.prob).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(dist.windows(2).all(|w| w[0].prob >= w[1].prob));
    }

    #[test]
    fn counting_is_order_independent(mut sents in prop::collection::vec(sentence(), 1..20), seed in any::<u64>()) {
        let a = CountMlm::trained(0.1, 5, &sents);
        let n = sents.len();
        sents.rotate_left((seed as usize) % n);
        sents.reverse();
        let b = CountMlm::trained(0.1, 5, &sents);
        prop_assert_eq!(a.checkpoint(), b.checkpoint());
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn state_round_trips(sents in prop::collection::vec(sentence(), 0..10)) {
        let a = CountMlm::trained(0.3, 2, &sents);
        let b = CountMlm::from_json(&a.to_json()).unwrap();
        prop_assert_eq!(a.checkpoint(), b.checkpoint());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn training_never_mutates_the_receiver(base in prop::collection::vec(sentence(), 1..5), extra in prop::collection::vec(sentence(), 0..5)) {
        let m = CountMlm::trained(0.1, 5, &base);
        let before = m.to_json();
        let _ = m.continual_train(&extra, &TrainConfig::default()).unwrap();
        prop_assert_eq!(before, m.to_json());
    }
}
