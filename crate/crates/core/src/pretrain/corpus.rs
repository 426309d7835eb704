use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIALS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercasing whitespace tokenizer with the specials at ids 0..5.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Tokenizer {
    /// Vocabulary of the `max_vocab - 5` most frequent words (ties broken
    /// alphabetically) plus the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: usize) -> Result<Self> {
        if max_vocab < NUM_SPECIALS {
            return Err(Error::Config(vec![format!(
                "max_vocab ({max_vocab}) must be >= {NUM_SPECIALS}"
            )]));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words(t) {
                if !SPECIALS.contains(&w.to_uppercase().as_str()) {
                    *freq.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_vocab - NUM_SPECIALS).map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Data(format!(
                "vocabulary must start with {}",
                SPECIALS.join(" ")
            )));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(&w).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or("[UNK]", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Documents of tokenized sentences.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Vec<Vec<usize>>>,
    pub tokenizer: Tokenizer,
}

/// Splits text into documents (blank-line separated) of sentences (one per
/// line). Whitespace-only lines inside a document are dropped.
pub fn split_documents(text: &str) -> Vec<Vec<&str>> {
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line.trim());
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

impl Corpus {
    pub fn from_text(text: &str, max_vocab: usize) -> Result<Self> {
        let tokenizer = Tokenizer::build(text.lines(), max_vocab)?;
        Self::with_tokenizer(text, tokenizer)
    }

    pub fn with_tokenizer(text: &str, tokenizer: Tokenizer) -> Result<Self> {
        let documents: Vec<Vec<Vec<usize>>> = split_documents(text)
            .into_iter()
            .map(|d| d.into_iter().map(|s| tokenizer.encode(s)).collect())
            .collect();
        if documents.is_empty() {
            return Err(Error::Data("corpus has no documents".into()));
        }
        Ok(Self { documents, tokenizer })
    }

    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn num_tokens(&self) -> usize {
        self.documents.iter().flatten().map(Vec::len).sum()
    }
}

struct Topic {
    name: &'static str,
    nouns: &'static [&'static str],
    adjectives: &'static [&'static str],
    verbs: &'static [&'static str],
    places: &'static [&'static str],
}

const TOPICS: [Topic; 6] = [
    Topic {
        name: "sea",
        nouns: &["ship", "sailor", "whale", "wave", "anchor", "gull", "reef", "tide"],
        adjectives: &["salty", "stormy", "deep", "blue", "calm"],
        verbs: &["sails", "drifts", "dives", "crashes", "floats"],
        places: &["harbor", "ocean", "bay", "shore", "lagoon"],
    },
    Topic {
        name: "forest",
        nouns: &["oak", "fox", "owl", "moss", "fern", "deer", "acorn", "pine"],
        adjectives: &["green", "shady", "wild", "mossy", "quiet"],
        verbs: &["grows", "hides", "rustles", "climbs", "sleeps"],
        places: &["woods", "grove", "thicket", "glade", "canopy"],
    },
    Topic {
        name: "city",
        nouns: &["taxi", "tower", "subway", "crowd", "bridge", "neon", "office", "tram"],
        adjectives: &["busy", "loud", "bright", "crowded", "modern"],
        verbs: &["honks", "rushes", "glows", "waits", "hums"],
        places: &["street", "downtown", "plaza", "avenue", "station"],
    },
    Topic {
        name: "space",
        nouns: &[
            "rocket",
            "comet",
            "planet",
            "astronaut",
            "star",
            "orbit",
            "moon",
            "probe",
        ],
        adjectives: &["distant", "dark", "cosmic", "silent", "frozen"],
        verbs: &["launches", "orbits", "spins", "shines", "explores"],
        places: &["galaxy", "nebula", "void", "cosmos", "station"],
    },
    Topic {
        name: "farm",
        nouns: &["cow", "tractor", "barn", "hen", "wheat", "farmer", "pig", "fence"],
        adjectives: &["muddy", "golden", "rustic", "early", "dusty"],
        verbs: &["plows", "grazes", "clucks", "harvests", "feeds"],
        places: &["field", "pasture", "meadow", "stable", "orchard"],
    },
    Topic {
        name: "kitchen",
        nouns: &["pan", "oven", "chef", "spoon", "bread", "soup", "knife", "kettle"],
        adjectives: &["hot", "spicy", "fresh", "warm", "sweet"],
        verbs: &["bakes", "boils", "stirs", "chops", "simmers"],
        places: &["stove", "counter", "pantry", "table", "sink"],
    },
];

pub const NUM_TOPICS: usize = TOPICS.len();

pub fn topic_name(topic: usize) -> &'static str {
    TOPICS[topic % NUM_TOPICS].name
}

fn pick<'a, R: Rng + ?Sized>(xs: &'a [&'a str], rng: &mut R) -> &'a str {
    xs.choose(rng).copied().expect("non-empty word list")
}

/// One templated sentence about `topic`.
pub fn toy_sentence<R: Rng + ?Sized>(topic: usize, rng: &mut R) -> String {
    let t = &TOPICS[topic % NUM_TOPICS];
    let (n1, n2) = (pick(t.nouns, rng), pick(t.nouns, rng));
    let (a, v, p) = (pick(t.adjectives, rng), pick(t.verbs, rng), pick(t.places, rng));
    match rng.random_range(0..4) {
        0 => format!("the {a} {n1} {v} in the {p}"),
        1 => format!("a {n1} {v} near the {a} {n2}"),
        2 => format!("in the {p} the {n1} {v} with a {n2}"),
        _ => format!("every {a} {n1} {v} by the {p} and the {n2}"),
    }
}

/// Synthetic corpus text: `docs` single-topic documents of 4 to 8 sentences.
pub fn toy_corpus_text(seed: u64, docs: usize) -> String {
    let mut rng = substream(seed, Stream::Data);
    let mut out = String::new();
    for d in 0..docs {
        let topic = (d + rng.random_range(0..NUM_TOPICS)) % NUM_TOPICS;
        let n = rng.random_range(4..=8);
        for _ in 0..n {
            out.push_str(&toy_sentence(topic, &mut rng));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Labeled toy sentences: the label is the parity of the topic index, so
/// any topic word decides the class.
pub fn toy_classification(seed: u64, n: usize) -> Vec<(String, usize)> {
    let mut rng = substream(seed, Stream::Classifier);
    (0..n)
        .map(|_| {
            let topic = rng.random_range(0..NUM_TOPICS);
            (toy_sentence(topic, &mut rng), topic % 2)
        })
        .collect()
}
