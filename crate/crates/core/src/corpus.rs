//! Dialogue cases, corpus files, tokenization and the synthetic corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::rng::substream;

/// One incomplete-utterance rewriting instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueCase {
    pub id: String,
    pub context: Vec<String>,
    pub incomplete: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omission_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<BTreeMap<String, i64>>,
}

impl DialogueCase {
    /// The text used for retrieval and representation: context turns followed
    /// by the incomplete utterance. The rewrite is never included.
    pub fn query_text(&self) -> String {
        let mut text = self.context.join(" ");
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&self.incomplete);
        text
    }

    pub fn annotation(&self, key: &str) -> Option<i64> {
        self.annotations.as_ref().and_then(|a| a.get(key).copied())
    }

    pub fn rewrite_or_err(&self) -> Result<&str> {
        self.rewrite.as_deref().ok_or_else(|| Error::MissingField {
            id: self.id.clone(),
            field: "rewrite",
        })
    }
}

/// What a corpus file is used for; decides which fields are required.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Candidates,
    Train,
    Dev,
    Test,
    /// Cases without gold rewrites, only used for selection output.
    Inference,
}

impl SplitRole {
    pub fn requires_rewrite(self) -> bool {
        !matches!(self, SplitRole::Inference)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub candidates: Vec<DialogueCase>,
    pub train: Vec<DialogueCase>,
    pub dev: Vec<DialogueCase>,
    pub test: Vec<DialogueCase>,
}

impl CorpusSplit {
    pub fn all_cases(&self) -> impl Iterator<Item = &DialogueCase> {
        self.candidates
            .iter()
            .chain(&self.train)
            .chain(&self.dev)
            .chain(&self.test)
    }

    pub fn candidate_ids(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.id.clone()).collect()
    }

    /// Id lookup over every split.
    pub fn index(&self) -> HashMap<&str, &DialogueCase> {
        self.all_cases().map(|c| (c.id.as_str(), c)).collect()
    }

    /// Checks that candidates and train share no id.
    pub fn check_disjoint(&self) -> Result<()> {
        let cands: HashSet<&str> = self.candidates.iter().map(|c| c.id.as_str()).collect();
        if let Some(c) = self.train.iter().find(|c| cands.contains(c.id.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "case {:?} appears in both candidates and train",
                c.id
            )));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawCase {
    id: Option<String>,
    context: Option<Vec<String>>,
    incomplete: Option<String>,
    rewrite: Option<String>,
    omission_type: Option<String>,
    annotations: Option<BTreeMap<String, i64>>,
}

pub fn load_corpus(path: &Path, role: SplitRole) -> Result<Vec<DialogueCase>> {
    let records: Vec<(usize, RawCase)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut cases = Vec::with_capacity(records.len());
    for (line, raw) in records {
        let missing = |field: &str| Error::record(path, line, format!("missing required field {field:?}"));
        let id = raw.id.ok_or_else(|| missing("id"))?;
        let incomplete = raw.incomplete.ok_or_else(|| missing("incomplete"))?;
        let context = raw.context.ok_or_else(|| missing("context"))?;
        if role.requires_rewrite() && raw.rewrite.is_none() {
            return Err(missing("rewrite"));
        }
        if tokenize(&incomplete, TokenizeMode::Word).is_empty() {
            return Err(Error::record(path, line, "field \"incomplete\" has no tokens"));
        }
        if let Some(r) = &raw.rewrite {
            if role.requires_rewrite() && r.trim().is_empty() {
                return Err(Error::record(path, line, "field \"rewrite\" is empty"));
            }
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { id, line });
        }
        cases.push(DialogueCase {
            id,
            context,
            incomplete,
            rewrite: raw.rewrite,
            omission_type: raw.omission_type,
            annotations: raw.annotations,
        });
    }
    Ok(cases)
}

pub fn save_corpus(path: &Path, cases: &[DialogueCase]) -> Result<()> {
    write_jsonl(path, cases)
}

/// Merges an annotations sidecar (`{id, pos_type_count, chunk_count, ...}`
/// lines) into the matching cases.
pub fn apply_annotations(cases: &mut [DialogueCase], path: &Path) -> Result<AnnotationReport> {
    let records: Vec<(usize, BTreeMap<String, serde_json::Value>)> = read_jsonl(path)?;
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, c) in cases.iter().enumerate() {
        by_id.insert(c.id.clone(), i);
    }
    let mut report = AnnotationReport::default();
    for (line, mut rec) in records {
        let id = match rec.remove("id") {
            Some(serde_json::Value::String(s)) => s,
            _ => return Err(Error::record(path, line, "missing required field \"id\"")),
        };
        let Some(&idx) = by_id.get(&id) else {
            report.unknown_ids.push(id);
            continue;
        };
        let ann = cases[idx].annotations.get_or_insert_with(BTreeMap::new);
        for (key, value) in rec {
            let n = value
                .as_i64()
                .filter(|n| *n >= 0)
                .ok_or_else(|| Error::record(path, line, format!("field {key:?} must be a nonnegative integer")))?;
            ann.insert(key, n);
        }
        report.applied += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationReport {
    pub applied: usize,
    /// Sidecar ids with no matching case; skipped.
    pub unknown_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    #[default]
    Word,
    Char,
}

/// Word mode lowercases, splits on whitespace and detaches leading and
/// trailing ASCII punctuation characters as single-character tokens. Char
/// mode emits every non-whitespace character.
pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .flat_map(char::to_lowercase)
            .map(String::from)
            .collect(),
        TokenizeMode::Word => {
            let mut out = Vec::new();
            for chunk in text.split_whitespace() {
                let chunk = chunk.to_lowercase();
                let core = chunk.trim_matches(|c: char| c.is_ascii_punctuation());
                if core.is_empty() {
                    out.extend(chunk.chars().map(String::from));
                    continue;
                }
                let start = chunk.find(core).unwrap_or(0);
                let lead = &chunk[..start];
                let trail = &chunk[start + core.len()..];
                out.extend(lead.chars().map(String::from));
                out.push(core.to_string());
                out.extend(trail.chars().map(String::from));
            }
            out
        }
    }
}

pub const OMISSION_TYPES: [&str; 4] = [
    "dropped-attribute",
    "dropped-subject",
    "dropped-location",
    "dropped-object",
];

struct Topic {
    noun: &'static str,
    nouns: &'static str,
    names: &'static [&'static str],
    kinds: &'static [&'static str],
    features: &'static [&'static str],
    items: &'static [&'static str],
    fillers: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    Topic {
        noun: "restaurant",
        nouns: "restaurants",
        names: &["golden wok kitchen", "river bistro", "copper kettle diner", "saffron garden", "blue olive grill"],
        kinds: &["italian", "chinese", "mediterranean", "indian", "fusion", "thai"],
        features: &["outdoor seating", "a vegetarian menu", "live music", "free wifi"],
        items: &["seafood platter", "tasting menu", "lamb curry", "wood fired pizza"],
        fillers: &[
            "I want to take my family out for dinner this weekend.",
            "We are celebrating a birthday and need somewhere nice to eat.",
            "The last restaurant we tried had terrible food and slow waiters.",
            "My friends love trying new dishes and different cuisines.",
            "We would like a table for dinner around seven tonight.",
            "Our group is hungry after a long day and wants a good meal.",
        ],
    },
    Topic {
        noun: "hotel",
        nouns: "hotels",
        names: &["harbour view inn", "grand meridian lodge", "maple leaf suites", "cityline palace", "willow court hotel"],
        kinds: &["boutique", "budget", "luxury", "family", "business", "guesthouse"],
        features: &["free parking", "a swimming pool", "room service", "a gym"],
        items: &["double room", "family suite", "breakfast package", "single room"],
        fillers: &[
            "I need a place to stay for three nights next month.",
            "We are travelling with two kids and need a comfortable room.",
            "The conference is downtown so I need accommodation nearby.",
            "Last time the hotel room was noisy and the bed was small.",
            "I will arrive late on friday night after my flight.",
            "We want to check in early and check out on sunday.",
        ],
    },
    Topic {
        noun: "museum",
        nouns: "museums",
        names: &["national history hall", "modern art gallery", "maritime heritage centre", "science discovery museum", "old town archive"],
        kinds: &["art", "history", "science", "maritime", "natural history", "photography"],
        features: &["guided tours", "free admission", "an audio guide", "a cafe"],
        items: &["dinosaur exhibit", "impressionist collection", "planetarium show", "sculpture garden"],
        fillers: &[
            "I am visiting the city and want to see some exhibitions.",
            "My students are studying ancient cultures this term.",
            "We love paintings and old artifacts from around the world.",
            "It is going to rain so we want an indoor activity.",
            "The children are curious about space and fossils.",
            "I have a free afternoon and enjoy quiet galleries.",
        ],
    },
    Topic {
        noun: "cinema",
        nouns: "cinemas",
        names: &["starlight picture house", "odeon central", "silver screen plaza", "roxy film club", "northgate movies"],
        kinds: &["imax", "independent", "drive in", "multiplex", "art house", "retro"],
        features: &["reclining seats", "a late showing", "student discounts", "3d screens"],
        items: &["evening screening", "premiere tickets", "popcorn combo", "matinee tickets"],
        fillers: &[
            "I want to watch the new science fiction film tonight.",
            "My partner and I are planning a movie night out.",
            "The film critics loved the latest thriller release.",
            "We missed the premiere last week because of work.",
            "The kids want to see the animated movie everyone talks about.",
            "I prefer big screens and loud sound for action films.",
        ],
    },
    Topic {
        noun: "gym",
        nouns: "gyms",
        names: &["iron peak fitness", "core strength studio", "pulse athletic club", "summit climbing hall", "zen yoga loft"],
        kinds: &["crossfit", "yoga", "boxing", "climbing", "budget", "pilates"],
        features: &["a sauna", "personal trainers", "showers", "twenty four hour access"],
        items: &["monthly membership", "day pass", "spin class", "trial session"],
        fillers: &[
            "I am trying to get fit before the marathon in spring.",
            "My doctor told me to exercise more and lose some weight.",
            "I used to lift weights every morning before work.",
            "My old gym closed down and I need a new place to train.",
            "I want to improve my flexibility and strength.",
            "We are looking for somewhere to work out after the office.",
        ],
    },
    Topic {
        noun: "bakery",
        nouns: "bakeries",
        names: &["sunrise bread house", "butter and crumb", "little oven patisserie", "wheatfield bakers", "honey bun corner"],
        kinds: &["french", "vegan", "gluten free", "artisan", "german", "japanese"],
        features: &["fresh sourdough", "seating inside", "custom cakes", "early opening"],
        items: &["croissants", "birthday cake", "rye loaf", "cinnamon rolls"],
        fillers: &[
            "I need pastries for a breakfast meeting tomorrow.",
            "My daughter wants a special cake for her party.",
            "Fresh bread in the morning is my favourite thing.",
            "We are hosting brunch and want some baked treats.",
            "The supermarket bread is always stale and dry.",
            "I have a sweet tooth and love cakes and cookies.",
        ],
    },
];

const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];
const LANDMARKS: &[&str] = &["the train station", "the city park", "the old bridge", "the university", "the harbour", "the cathedral"];
const COUNTS: &[&str] = &["two", "three", "four", "five", "six"];

fn pick<'a>(rng: &mut impl Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("nonempty pool")
}

/// Builds `(context anchor turns, incomplete, rewrite)` for one omission type.
fn build_case(rng: &mut impl Rng, topic: &Topic, omission: usize) -> (Vec<String>, String, String) {
    let noun = topic.noun;
    let nouns = topic.nouns;
    match omission {
        0 => {
            let price = pick(rng, PRICES);
            let feature = pick(rng, topic.features);
            let kind = pick(rng, topic.kinds);
            let kind2 = loop {
                let k = pick(rng, topic.kinds);
                if k != kind {
                    break k;
                }
            };
            let anchors = vec![
                format!("I am looking for a {price} {noun} that has {feature}."),
                format!("Sorry, there are no {kind} {nouns} listed in the {price} price range."),
            ];
            let (inc, rew) = match rng.random_range(0..3) {
                0 => (
                    format!("How about {kind2} {nouns}?"),
                    format!("How about {kind2} {nouns} in the {price} price range with {feature}?"),
                ),
                1 => (
                    format!("What about a {kind2} one?"),
                    format!("What about a {kind2} one in the {price} price range with {feature}?"),
                ),
                _ => (
                    format!("Any {kind2} options?"),
                    format!("Any {kind2} options in the {price} price range with {feature}?"),
                ),
            };
            (anchors, inc, rew)
        }
        1 => {
            let name = pick(rng, topic.names);
            let kind = pick(rng, topic.kinds);
            let area = pick(rng, AREAS);
            let anchors = vec![format!("{} is a {kind} {noun} in the {area} of town.", capitalize(name))];
            let (inc, rew) = match rng.random_range(0..3) {
                0 => (
                    "What is the phone number?".to_string(),
                    format!("What is the phone number of the {kind} {noun} {name}?"),
                ),
                1 => (
                    "Can I get the address?".to_string(),
                    format!("Can I get the address of the {kind} {noun} {name}?"),
                ),
                _ => (
                    "What are the opening hours?".to_string(),
                    format!("What are the opening hours of the {kind} {noun} {name}?"),
                ),
            };
            (anchors, inc, rew)
        }
        2 => {
            let area = pick(rng, AREAS);
            let landmark = pick(rng, LANDMARKS);
            let kind = pick(rng, topic.kinds);
            let anchors = vec![format!("I am staying near {landmark} in the {area} of town.")];
            let (inc, rew) = match rng.random_range(0..3) {
                0 => (
                    format!("Are there any {kind} {nouns}?"),
                    format!("Are there any {kind} {nouns} near {landmark} in the {area} of town?"),
                ),
                1 => (
                    format!("Can you find me a {noun}?"),
                    format!("Can you find me a {noun} near {landmark} in the {area} of town?"),
                ),
                _ => (
                    format!("Is there a good {kind} one?"),
                    format!("Is there a good {kind} one near {landmark} in the {area} of town?"),
                ),
            };
            (anchors, inc, rew)
        }
        _ => {
            let name = pick(rng, topic.names);
            let item = pick(rng, topic.items);
            let count = pick(rng, COUNTS);
            let anchors = vec![format!("{} is famous for its {item}.", capitalize(name))];
            let (inc, rew) = match rng.random_range(0..3) {
                0 => (
                    "I would like to order.".to_string(),
                    format!("I would like to order the {item} from {name}."),
                ),
                1 => (
                    format!("Can you reserve for {count} people?"),
                    format!("Can you reserve the {item} at {name} for {count} people?"),
                ),
                _ => (
                    format!("Please book {count}."),
                    format!("Please book {count} of the {item} at {name}."),
                ),
            };
            (anchors, inc, rew)
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn synth_cases(
    rng: &mut impl Rng,
    prefix: &str,
    n: usize,
    seen: &mut HashSet<(Vec<String>, String)>,
) -> Vec<DialogueCase> {
    // Exactly balanced omission types, shuffled into random order.
    let mut types: Vec<usize> = (0..n).map(|i| i % OMISSION_TYPES.len()).collect();
    types.shuffle(rng);
    let width = n.to_string().len().max(4);
    types
        .into_iter()
        .enumerate()
        .map(|(i, omission)| loop {
            let topic = &TOPICS[rng.random_range(0..TOPICS.len())];
            let (anchors, incomplete, rewrite) = build_case(rng, topic, omission);
            let mut fillers: Vec<&str> = topic.fillers.choose_multiple(rng, 3).copied().collect();
            fillers.shuffle(rng);
            let mut context: Vec<String> = fillers.into_iter().map(String::from).collect();
            context.extend(anchors);
            if seen.insert((context.clone(), incomplete.clone())) {
                break DialogueCase {
                    id: format!("{prefix}{:0width$}", i + 1),
                    context,
                    incomplete,
                    rewrite: Some(rewrite),
                    omission_type: Some(OMISSION_TYPES[omission].to_string()),
                    annotations: None,
                };
            }
        })
        .collect()
}

/// Template-generated corpus with four balanced omission types.
///
/// Ids are prefixed per split (`c`, `t`, `d`, `x`) so splits never collide,
/// and no two cases share the same context and incomplete utterance.
pub fn synth_corpus(seed: u64, n_candidates: usize, n_train: usize, n_dev: usize) -> CorpusSplit {
    synth_corpus_with_test(seed, n_candidates, n_train, n_dev, 0)
}

pub fn synth_corpus_with_test(
    seed: u64,
    n_candidates: usize,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
) -> CorpusSplit {
    let mut rng = substream(seed, "synth", &[] as &[&str]);
    let mut seen = HashSet::new();
    CorpusSplit {
        candidates: synth_cases(&mut rng, "c", n_candidates, &mut seen),
        train: synth_cases(&mut rng, "t", n_train, &mut seen),
        dev: synth_cases(&mut rng, "d", n_dev, &mut seen),
        test: synth_cases(&mut rng, "x", n_test, &mut seen),
    }
}
