//! Byte-level corpus handling and a seeded synthetic text generator.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte values of a UTF-8 text file, in file order.
pub fn ingest_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Invalid(format!(
            "corpus {} is empty",
            path.display()
        )));
    }
    Ok(tokenize(&bytes))
}

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Consecutive chunks of `context_length` tokens; the last may be short.
pub fn chunk_sequences(tokens: &[u32], context_length: usize) -> Vec<Vec<u32>> {
    tokens
        .chunks(context_length.max(1))
        .map(<[u32]>::to_vec)
        .collect()
}

/// Sequences split into a training head and an evaluation tail; the
/// tail holds `ceil(eval_fraction * n)` whole sequences.
pub fn split_sequences(seqs: Vec<Vec<u32>>, eval_fraction: f64) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let n_eval = ((seqs.len() as f64) * eval_fraction.clamp(0.0, 1.0)).ceil() as usize;
    let mut train = seqs;
    let eval = train.split_off(train.len() - n_eval.min(train.len()));
    (train, eval)
}

struct Topic {
    nouns: &'static [&'static str],
    places: &'static [&'static str],
    verbs: &'static [&'static str],
    adjectives: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    Topic {
        nouns: &[
            "cat", "dog", "horse", "rabbit", "fox", "owl", "goat", "mouse", "bird", "sheep",
        ],
        places: &["barn", "field", "forest", "meadow", "farm", "river bank"],
        verbs: &["chased", "watched", "followed", "fed", "heard", "found"],
        adjectives: &["small", "brown", "quiet", "wild", "old", "sleepy"],
    },
    Topic {
        nouns: &[
            "bread", "soup", "knife", "bowl", "apple", "kettle", "spoon", "cheese", "onion",
            "plate",
        ],
        places: &["kitchen", "market", "bakery", "pantry", "table", "garden"],
        verbs: &["cooked", "sliced", "washed", "bought", "tasted", "carried"],
        adjectives: &["warm", "fresh", "sharp", "green", "sweet", "heavy"],
    },
    Topic {
        nouns: &[
            "ship", "sailor", "wave", "anchor", "whale", "harbor", "storm", "net", "shell",
            "island",
        ],
        places: &["sea", "coast", "port", "beach", "bay", "lighthouse"],
        verbs: &["sailed", "pulled", "saw", "crossed", "repaired", "lost"],
        adjectives: &["blue", "cold", "stormy", "distant", "salty", "calm"],
    },
    Topic {
        nouns: &[
            "train", "street", "tower", "bridge", "car", "lamp", "station", "window", "door",
            "clock",
        ],
        places: &["city", "square", "station", "park", "office", "museum"],
        verbs: &["built", "painted", "opened", "closed", "passed", "cleaned"],
        adjectives: &["tall", "busy", "bright", "grey", "narrow", "new"],
    },
    Topic {
        nouns: &[
            "computer", "program", "robot", "signal", "number", "machine", "network", "model",
            "sensor", "screen",
        ],
        places: &[
            "lab",
            "server room",
            "workshop",
            "library",
            "school",
            "factory",
        ],
        verbs: &[
            "trained",
            "tested",
            "measured",
            "improved",
            "restarted",
            "studied",
        ],
        adjectives: &["fast", "clever", "broken", "large", "digital", "simple"],
    },
];

const NAMES: &[&str] = &[
    "Anna", "Ben", "Clara", "David", "Emma", "Felix", "Grace", "Hugo", "Iris", "Jonas",
];
const ADVERBS: &[&str] = &[
    "slowly",
    "quickly",
    "carefully",
    "happily",
    "again",
    "suddenly",
    "often",
    "never",
];
const PREPS: &[&str] = &["in", "near", "behind", "across", "inside", "outside"];
const TIMES: &[&str] = &[
    "In the morning",
    "At night",
    "Yesterday",
    "Later",
    "Every day",
    "After lunch",
];
const INTRANSITIVE: &[&str] = &["slept", "waited", "laughed", "walked", "sang", "rested"];
const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap_or("")
}

fn noun_phrase(rng: &mut ChaCha8Rng, t: &Topic) -> String {
    if rng.random_bool(0.5) {
        format!("the {} {}", pick(rng, t.adjectives), pick(rng, t.nouns))
    } else {
        format!("the {}", pick(rng, t.nouns))
    }
}

fn sentence(rng: &mut ChaCha8Rng, t: &Topic) -> String {
    match rng.random_range(0..8) {
        0 => format!(
            "{} {} {} {} the {}.",
            capitalize(&noun_phrase(rng, t)),
            pick(rng, t.verbs),
            noun_phrase(rng, t),
            pick(rng, PREPS),
            pick(rng, t.places)
        ),
        1 => format!(
            "{} {} {} {}.",
            pick(rng, NAMES),
            pick(rng, t.verbs),
            noun_phrase(rng, t),
            pick(rng, ADVERBS)
        ),
        2 => format!(
            "{}, {} {} {} the {}.",
            pick(rng, TIMES),
            noun_phrase(rng, t),
            pick(rng, INTRANSITIVE),
            pick(rng, PREPS),
            pick(rng, t.places)
        ),
        3 => {
            let a = rng.random_range(0..5usize);
            let b = rng.random_range(0..5usize);
            format!(
                "{} plus {} is {}.",
                capitalize(NUMBER_WORDS[a]),
                NUMBER_WORDS[b],
                NUMBER_WORDS[a + b]
            )
        }
        4 => format!(
            "\"Where is {}?\" asked {}. \"It is {} the {}.\"",
            noun_phrase(rng, t),
            pick(rng, NAMES),
            pick(rng, PREPS),
            pick(rng, t.places)
        ),
        5 => {
            let n = rng.random_range(2..10);
            format!(
                "There were {} {}s {} the {}.",
                NUMBER_WORDS[n],
                pick(rng, t.nouns),
                pick(rng, PREPS),
                pick(rng, t.places)
            )
        }
        6 => format!(
            "{} said that {} was {}.",
            pick(rng, NAMES),
            noun_phrase(rng, t),
            pick(rng, t.adjectives)
        ),
        _ => format!(
            "{} and {} {} {}.",
            pick(rng, NAMES),
            pick(rng, NAMES),
            pick(rng, t.verbs),
            noun_phrase(rng, t)
        ),
    }
}

/// Seeded English-like text of at least `min_bytes` bytes. Paragraphs stay
/// on one topic, so the text has both local syntax and longer-range
/// context for a small model to pick up.
pub fn synthetic_corpus(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 256);
    while out.len() < min_bytes {
        let topic = &TOPICS[rng.random_range(0..TOPICS.len())];
        let n = rng.random_range(3..8);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&sentence(&mut rng, topic));
        }
        out.push('\n');
    }
    out
}
