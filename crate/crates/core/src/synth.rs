//! Seeded toy instruction corpus and the character vocabulary that covers it.
//! Responses are short deterministic functions of the instruction, so a
//! small teacher can become confident on them.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, CorpusMetadata, InstructionRecord, TaskCategory};
use crate::vocab::{VocabError, Vocabulary};

/// Every character the generator can emit.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,:;?!'\"()+-=*/<>_";

const NOUNS: &[&str] = &[
    "river", "garden", "lamp", "window", "forest", "bridge", "coffee", "rocket", "violin", "harbor", "pencil",
    "meadow", "castle", "candle", "island", "mirror", "tunnel", "planet", "basket", "ladder",
];
const ROLES: &[&str] = &[
    "pirate", "chef", "doctor", "wizard", "pilot", "teacher", "farmer", "knight", "robot", "sailor",
];
const NAMES: &[&str] = &[
    "Ana", "Ben", "Cai", "Dev", "Eli", "Fay", "Gus", "Hal", "Ivy", "Jon", "Kim", "Lea",
];
const COLORS: &[&str] = &["red", "blue", "green", "black", "white", "pink", "gray", "gold"];
const ELEMENTS: &[(&str, &str)] = &[
    ("hydrogen", "H"),
    ("helium", "He"),
    ("carbon", "C"),
    ("nitrogen", "N"),
    ("oxygen", "O"),
    ("sodium", "Na"),
    ("iron", "Fe"),
    ("copper", "Cu"),
    ("silver", "Ag"),
    ("gold", "Au"),
    ("zinc", "Zn"),
    ("neon", "Ne"),
];
const WRITERS: &[(&str, &str)] = &[
    ("whales", "Melville"),
    ("war and peace", "Tolstoy"),
    ("utopia", "More"),
    ("the raven", "Poe"),
    ("odysseus", "Homer"),
    ("hamlet", "Shakespeare"),
    ("emma", "Austen"),
    ("faust", "Goethe"),
];
const WORDS: &[&str] = &[
    "tick", "moon", "salt", "wave", "fern", "jazz", "mint", "oak", "plum", "drum",
];

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty list")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn pair(category: TaskCategory, rng: &mut ChaCha8Rng) -> (String, String) {
    use TaskCategory::*;
    match category {
        Writing => {
            let n = pick(rng, NOUNS);
            (format!("Write a slogan about a {n}."), format!("A {n} for every day."))
        }
        Roleplay => {
            let r = pick(rng, ROLES);
            (format!("Act as a {r} and greet me."), format!("Hello! I am your {r}."))
        }
        Reasoning => {
            let a = pick(rng, NAMES);
            let mut b = pick(rng, NAMES);
            while b == a {
                b = pick(rng, NAMES);
            }
            (
                format!("{a} is taller than {b}; who is shorter?"),
                format!("Step 1: {a}>{b}. So {b}."),
            )
        }
        Mathematics => {
            let x = rng.random_range(0..10);
            let y = rng.random_range(0..10);
            (
                format!("What is {x} plus {y}?"),
                format!("Step 1: {x}+{y}={}. Answer: {}", x + y, x + y),
            )
        }
        Coding => {
            let w = pick(rng, WORDS);
            (format!("Write code to print {w}."), format!("print(\"{w}\")"))
        }
        Extraction => {
            let c = pick(rng, COLORS);
            let n = pick(rng, NOUNS);
            (format!("Extract the color: the {c} {n}."), format!("Color: {c}"))
        }
        Stem => {
            let (e, s) = pick(rng, ELEMENTS);
            (format!("What is the symbol for {e}?"), format!("The symbol is {s}."))
        }
        Humanity => {
            let (t, w) = pick(rng, WRITERS);
            (format!("Who wrote about {t}?"), format!("{w} did."))
        }
        Other => {
            let w = pick(rng, WORDS);
            (format!("Say {w} twice."), format!("{} {w}", capitalize(w)))
        }
    }
}

/// `n` seed records with responses, ids `1..=n`, categories in round-robin order.
pub fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let category = TaskCategory::ALL[i % TaskCategory::ALL.len()];
            let (instruction, response) = pair(category, &mut rng);
            InstructionRecord::seed(i as u64 + 1, category, instruction).with_response(response)
        })
        .collect();
    let metadata = CorpusMetadata {
        name: "synthetic".into(),
        created_unix: None,
        stage: Some("seed".into()),
    };
    Corpus::new(records, metadata).expect("generated ids are unique and increasing")
}

/// Character vocabulary over [`ALPHABET`], padded with reserved tokens to `size`.
pub fn synthetic_vocab(size: usize) -> Result<Vocabulary, VocabError> {
    Vocabulary::char_vocab(ALPHABET, Some(size))
}

/// Bigram vocabulary over [`ALPHABET`] holding the most frequent bigrams of
/// `corpus` (ties broken lexicographically), padded to `size`.
pub fn bigram_vocab_for(corpus: &Corpus, size: usize) -> Result<Vocabulary, VocabError> {
    let mut counts: std::collections::BTreeMap<String, usize> = Default::default();
    for r in corpus.records() {
        for text in [&r.instruction, &r.response] {
            let chars: Vec<char> = text.chars().collect();
            for c in chars.chunks(2).filter(|c| c.len() == 2) {
                *counts.entry(c.iter().collect()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = size.saturating_sub(1 + ALPHABET.chars().count());
    let bigrams: Vec<String> = ranked.into_iter().take(room).map(|(b, _)| b).collect();
    Vocabulary::bigram_vocab(ALPHABET, &bigrams, Some(size))
}
