//! Pattern-verbalizer classification.
//!
//! A [`PromptTemplate`] turns an input into a cloze question with one mask;
//! a [`Verbalizer`] maps label words back to labels. A label scores the mean
//! mask probability of its words and the prediction is the best-scoring
//! label, earliest declared label on ties.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::MaskedLm;
use crate::text::tokenize;

pub const INPUT_SLOT: &str = "{input}";
pub const MASK_SLOT: &str = "{mask}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TemplatePart {
    Literal(String),
    Input,
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPosition {
    /// The input comes before the mask (`x. In summary, ... <mask>.`).
    BeforeMask,
    /// The mask comes first (`Can you tell me the <mask> x`).
    AfterMask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    parts: Vec<TemplatePart>,
    source: String,
}

impl PromptTemplate {
    /// Parses a template with exactly one `{input}` and one `{mask}`.
    pub fn parse(template_id: impl Into<String>, source: &str) -> Result<PromptTemplate> {
        let n_input = source.matches(INPUT_SLOT).count();
        let n_mask = source.matches(MASK_SLOT).count();
        if n_input != 1 || n_mask != 1 {
            return Err(Error::MalformedTemplate(format!(
                "`{source}` needs exactly one {INPUT_SLOT} and one {MASK_SLOT} \
                 (found {n_input} and {n_mask})"
            )));
        }
        let mut parts = Vec::new();
        let mut rest = source;
        while !rest.is_empty() {
            let next = [(INPUT_SLOT, TemplatePart::Input), (MASK_SLOT, TemplatePart::Mask)]
                .into_iter()
                .filter_map(|(slot, part)| rest.find(slot).map(|i| (i, slot, part)))
                .min_by_key(|(i, _, _)| *i);
            match next {
                Some((i, slot, part)) => {
                    if i > 0 {
                        parts.push(TemplatePart::Literal(rest[..i].to_string()));
                    }
                    parts.push(part);
                    rest = &rest[i + slot.len()..];
                }
                None => {
                    parts.push(TemplatePart::Literal(rest.to_string()));
                    rest = "";
                }
            }
        }
        Ok(PromptTemplate {
            template_id: template_id.into(),
            parts,
            source: source.to_string(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn parts(&self) -> &[TemplatePart] {
        &self.parts
    }

    pub fn input_position(&self) -> InputPosition {
        let input = self.parts.iter().position(|p| *p == TemplatePart::Input);
        let mask = self.parts.iter().position(|p| *p == TemplatePart::Mask);
        if input < mask {
            InputPosition::BeforeMask
        } else {
            InputPosition::AfterMask
        }
    }

    /// `Prompt(x)`: the template with `x` substituted and the mask marker in
    /// the mask slot.
    pub fn apply(&self, x: &str, mask_token: &str) -> Result<String> {
        if x.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        if x.contains(mask_token) {
            return Err(Error::MalformedPrompt {
                marker: mask_token.to_string(),
                found: x.matches(mask_token).count() + 1,
            });
        }
        Ok(self.render(Some(x), mask_token))
    }

    /// Probe sentence for verbalizer augmentation: the template text without
    /// the input, with `word` in the mask slot, whitespace collapsed.
    pub fn fill(&self, word: &str) -> String {
        let s = self.render(None, word);
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    /// Tokens of the literal template text.
    pub fn literal_tokens(&self) -> Vec<String> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                TemplatePart::Literal(s) => Some(tokenize(s)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn render(&self, input: Option<&str>, mask: &str) -> String {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                TemplatePart::Literal(s) => out.push_str(s),
                TemplatePart::Input => out.push_str(input.unwrap_or("")),
                TemplatePart::Mask => out.push_str(mask),
            }
        }
        out
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.template_id, self.source)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Seed,
    Augmented,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelWords {
    pub label: String,
    pub seeds: Vec<String>,
    #[serde(default)]
    pub augmented: Vec<String>,
}

impl LabelWords {
    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.seeds.iter().chain(&self.augmented)
    }

    pub fn len(&self) -> usize {
        self.seeds.len() + self.augmented.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Label set in declaration order with the word set of each label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub labels: Vec<LabelWords>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Verbalizer {
    /// Seed verbalizer from `(label, words)` pairs. Words are lowercased.
    pub fn new<L, W, S>(labels: L) -> Result<Verbalizer>
    where
        L: IntoIterator<Item = (S, W)>,
        W: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let v = Verbalizer {
            labels: labels
                .into_iter()
                .map(|(label, words)| LabelWords {
                    label: label.into(),
                    seeds: words.into_iter().map(|w| w.into().to_lowercase()).collect(),
                    augmented: Vec::new(),
                })
                .collect(),
            provenance: Provenance::Seed,
        };
        v.validate()?;
        Ok(v)
    }

    /// Checks non-empty sets, single-token words and cross-label disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidVerbalizer("no labels".into()));
        }
        let mut owner: HashMap<String, &str> = HashMap::new();
        for lw in &self.labels {
            if lw.seeds.is_empty() {
                return Err(Error::InvalidVerbalizer(format!(
                    "label `{}` has no seed words",
                    lw.label
                )));
            }
            if self.labels.iter().filter(|o| o.label == lw.label).count() > 1 {
                return Err(Error::InvalidVerbalizer(format!("label `{}` declared twice", lw.label)));
            }
            for w in lw.words() {
                let toks = tokenize(w);
                if toks.len() != 1 || toks[0] != w.to_lowercase() {
                    return Err(Error::InvalidVerbalizer(format!(
                        "`{w}` is not a single token; multi-token label words are unsupported"
                    )));
                }
                if let Some(prev) = owner.insert(w.to_lowercase(), &lw.label) {
                    if prev != lw.label {
                        return Err(Error::InvalidVerbalizer(format!(
                            "`{w}` is used by both `{prev}` and `{}`",
                            lw.label
                        )));
                    }
                    return Err(Error::InvalidVerbalizer(format!("`{w}` repeated in `{prev}`")));
                }
            }
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.label.clone()).collect()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.label == label)
    }

    pub fn is_word(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        self.labels.iter().any(|l| l.words().any(|x| *x == w))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub score: f64,
}

/// Mean of the word probabilities. With a single word this is the word
/// probability itself.
pub fn mean_probability(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs.iter().sum::<f64>() / probs.len() as f64
}

/// Index of the largest score; the first one wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s.partial_cmp(&b) != Some(std::cmp::Ordering::Greater) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Scores every label of `verbalizer` for input `x` with one backend call.
pub fn score_labels(
    backend: &dyn MaskedLm,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    x: &str,
) -> Result<Vec<LabelScore>> {
    let masked = template.apply(x, backend.mask_token())?;
    let words: Vec<String> = verbalizer.labels.iter().flat_map(|l| l.words().cloned()).collect();
    let probs = backend.word_probabilities(&masked, &words)?;
    if probs.len() != words.len() {
        return Err(Error::Protocol(format!(
            "backend returned {} probabilities for {} words",
            probs.len(),
            words.len()
        )));
    }
    let mut it = words.iter().zip(probs);
    let mut out = Vec::with_capacity(verbalizer.labels.len());
    for lw in &verbalizer.labels {
        let ps: Vec<f64> = it
            .by_ref()
            .take(lw.len())
            .map(|(w, p)| {
                if !p.known {
                    log::warn!("label word `{w}` is outside the backend vocabulary; using its smoothed probability");
                }
                p.prob
            })
            .collect();
        out.push(LabelScore {
            label: lw.label.clone(),
            score: mean_probability(&ps),
        });
    }
    Ok(out)
}

pub fn score_label(
    backend: &dyn MaskedLm,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    x: &str,
    label: &str,
) -> Result<LabelScore> {
    let idx = verbalizer
        .label_index(label)
        .ok_or_else(|| Error::InvalidVerbalizer(format!("unknown label `{label}`")))?;
    Ok(score_labels(backend, template, verbalizer, x)?.swap_remove(idx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub scores: Vec<LabelScore>,
}

pub fn predict_label(
    backend: &dyn MaskedLm,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    x: &str,
) -> Result<Prediction> {
    let scores = score_labels(backend, template, verbalizer, x)?;
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let best = argmax_first(&raw).expect("validated verbalizer has labels");
    Ok(Prediction {
        label: scores[best].label.clone(),
        scores,
    })
}

/// Built-in patterns and seed words for the five benchmark tasks.
pub mod presets {
    use super::*;

    pub struct TaskPreset {
        pub name: &'static str,
        pub templates: &'static [(&'static str, &'static str)],
        pub labels: &'static [(&'static str, &'static str)],
    }

    pub const PRESETS: &[TaskPreset] = &[
        TaskPreset {
            name: "sst2",
            templates: &[
                ("sst2", "{input} In summary, this movie is {mask}."),
                ("sst2-p2", "{input} In summary, the movie is {mask}."),
            ],
            labels: &[("positive", "good"), ("negative", "bad")],
        },
        TaskPreset {
            name: "yelp",
            templates: &[("yelp", "{input} In summary, this restaurant is {mask}.")],
            labels: &[("positive", "good"), ("negative", "bad")],
        },
        TaskPreset {
            name: "agnews",
            templates: &[("agnews", "[Category: {mask}] {input}")],
            labels: &[
                ("world", "world"),
                ("sports", "sport"),
                ("business", "business"),
                ("tech", "tech"),
            ],
        },
        TaskPreset {
            name: "trec",
            templates: &[
                ("trec", "Can you tell me the {mask} {input}"),
                ("trec-p1", "Tell me the {mask} {input}"),
                ("trec-p2", "Can you tell me the {mask}: {input}"),
            ],
            labels: &[
                ("abbreviation", "explanation"),
                ("description", "description"),
                ("human", "person"),
                ("location", "location"),
                ("numeric", "number"),
                ("entity", "entity"),
            ],
        },
        TaskPreset {
            name: "dbpedia",
            templates: &[
                ("dbpedia-p1", "Description to the {mask} {input}"),
                ("dbpedia-p2", "Introduction to the {mask} {input}"),
            ],
            labels: &[
                ("company", "company"),
                ("educational_institution", "school"),
                ("artist", "artist"),
                ("film", "film"),
                ("written_work", "book"),
                ("plant", "plan"),
                ("building", "building"),
                ("village", "village"),
                ("animal", "animal"),
                ("athlete", "sport"),
                ("album", "album"),
                ("office_holder", "officer"),
                ("natural_place", "scenery"),
                ("mean_of_transportation", "transportation"),
            ],
        },
    ];

    /// Looks up a built-in template by id.
    pub fn template(id: &str) -> Option<PromptTemplate> {
        PRESETS
            .iter()
            .flat_map(|p| p.templates.iter())
            .find(|(tid, _)| *tid == id)
            .map(|(tid, src)| PromptTemplate::parse(*tid, src).expect("preset templates are valid"))
    }

    /// The task a template id belongs to.
    pub fn task_for_template(id: &str) -> Option<&'static TaskPreset> {
        PRESETS.iter().find(|p| p.templates.iter().any(|(t, _)| *t == id))
    }

    pub fn task(name: &str) -> Option<&'static TaskPreset> {
        PRESETS.iter().find(|p| p.name == name)
    }

    impl TaskPreset {
        pub fn verbalizer(&self) -> Verbalizer {
            Verbalizer::new(self.labels.iter().map(|(l, w)| (*l, [*w]))).expect("preset verbalizers are valid")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::CountMlm;

    #[test]
    fn apply_presets() {
        let sst = presets::template("sst2").unwrap();
        assert_eq!(
            sst.apply("It's a charming journey.", "<mask>").unwrap(),
            "It's a charming journey. In summary, this movie is <mask>."
        );
        let trec = presets::template("trec").unwrap();
        assert_eq!(
            trec.apply("What are the twin cities?", "<mask>").unwrap(),
            "Can you tell me the <mask> What are the twin cities?"
        );
        assert_eq!(sst.input_position(), InputPosition::BeforeMask);
        assert_eq!(trec.input_position(), InputPosition::AfterMask);
        assert!(matches!(sst.apply("", "<mask>"), Err(Error::EmptyInput)));
        assert!(sst.apply("has <mask> inside", "<mask>").is_err());
    }

    #[test]
    fn parse_rejects_missing_or_repeated_slots() {
        assert!(PromptTemplate::parse("t", "{input} only").is_err());
        assert!(PromptTemplate::parse("t", "{mask} only").is_err());
        assert!(PromptTemplate::parse("t", "{input} {mask} {mask}").is_err());
        let t = PromptTemplate::parse("t", "{input}{mask}").unwrap();
        assert_eq!(t.parts(), [TemplatePart::Input, TemplatePart::Mask]);
    }

    #[test]
    fn fill_drops_input() {
        let sst = presets::template("sst2").unwrap();
        assert_eq!(sst.fill("good"), "In summary, this movie is good.");
        let trec = presets::template("trec").unwrap();
        assert_eq!(trec.fill("location"), "Can you tell me the location");
    }

    #[test]
    fn verbalizer_validation() {
        assert!(Verbalizer::new([("pos", vec!["good"]), ("neg", vec!["good"])]).is_err());
        assert!(Verbalizer::new([("pos", vec!["very good"])]).is_err());
        assert!(Verbalizer::new([("pos", Vec::<&str>::new())]).is_err());
        let v = Verbalizer::new([("pos", vec!["Good"]), ("neg", vec!["bad"])]).unwrap();
        assert_eq!(v.labels[0].seeds, ["good"]);
        assert!(v.is_word("GOOD"));
    }

    #[test]
    fn argmax_first_wins_ties() {
        assert_eq!(argmax_first(&[0.6, 0.4]), Some(0));
        assert_eq!(argmax_first(&[0.4, 0.6]), Some(1));
        assert_eq!(argmax_first(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn mean_of_two() {
        assert_eq!(mean_probability(&[0.2, 0.4]), (0.2 + 0.4) / 2.0);
    }

    #[test]
    fn uniform_backend_predicts_first_label() {
        let m = CountMlm::new(0.1, 5).with_vocabulary(["good bad"]);
        let t = presets::template("sst2").unwrap();
        let v = presets::task("sst2").unwrap().verbalizer();
        for x in ["great film", "terrible film", "meh"] {
            assert_eq!(predict_label(&m, &t, &v, x).unwrap().label, "positive");
        }
    }

    #[test]
    fn zero_probability_word_never_raises_score() {
        let m = CountMlm::trained(0.1, 5, ["this movie is good", "this movie is bad"]);
        let t = PromptTemplate::parse("t", "{input} this movie is {mask}").unwrap();
        let base = Verbalizer::new([("pos", vec!["good"]), ("neg", vec!["bad"])]).unwrap();
        let mut wider = base.clone();
        // "zzz" is out of vocabulary, so it only carries smoothing mass
        wider.labels[0].augmented.push("zzz".into());
        let a = score_label(&m, &t, &base, "ok", "pos").unwrap().score;
        let b = score_label(&m, &t, &wider, "ok", "pos").unwrap().score;
        assert!(b <= a);
    }
}
