//! Byte-level corpora: file ingestion, deterministic train/held-out split,
//! and a seeded synthetic English-like text generator for tests and demos.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const SPLIT_BLOCK: usize = 1024;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corpus {0} is empty")]
    Empty(String),
}

/// Reads a file as byte tokens.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Vec<u8>, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.is_empty() {
        return Err(CorpusError::Empty(path.display().to_string()));
    }
    Ok(bytes)
}

/// Train and held-out streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u8>,
    pub heldout: Vec<u8>,
}

/// Shuffles fixed-size blocks with `seed` and assigns one tenth of them
/// (rounded, at least one when there are two or more blocks) to held-out.
/// Blocks keep their original relative order inside each part.
pub fn split_corpus(tokens: &[u8], block: usize, seed: u64) -> Split {
    let blocks: Vec<&[u8]> = tokens.chunks(block.max(1)).collect();
    let n = blocks.len();
    let n_held = if n >= 2 { ((n as f64 / 10.0).round() as usize).max(1) } else { 0 };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = vec![false; n];
    for &i in &order[..n_held] {
        held[i] = true;
    }
    let mut out = Split {
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for (i, b) in blocks.iter().enumerate() {
        if held[i] {
            out.heldout.extend_from_slice(b);
        } else {
            out.train.extend_from_slice(b);
        }
    }
    out
}

const SUBJECTS: &[&str] = &[
    "the cat", "a dog", "the old man", "my sister", "the farmer", "a small bird", "the teacher",
    "our neighbor", "the king", "a young girl", "the river", "the wind",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "carries", "watches", "follows", "paints", "remembers", "builds",
    "hears", "keeps", "wants",
];
const OBJECTS: &[&str] = &[
    "the house", "a red ball", "the garden", "an apple", "the long road", "a letter", "the boat",
    "some bread", "the green hill", "a song", "the door", "the stars",
];
const ADVERBS: &[&str] = &["slowly", "every day", "at night", "again", "in the morning", "quietly"];
const JOINS: &[&str] = &["and then", "but", "because", "so", "while"];

/// Deterministic grammar-generated text of exactly `n_bytes` bytes.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 128);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.gen_range(0..xs.len())];
    while out.len() < n_bytes {
        let clause = |rng: &mut ChaCha8Rng, out: &mut String| {
            out.push_str(pick(rng, SUBJECTS));
            out.push(' ');
            out.push_str(pick(rng, VERBS));
            out.push(' ');
            out.push_str(pick(rng, OBJECTS));
            if rng.gen_bool(0.3) {
                out.push(' ');
                out.push_str(pick(rng, ADVERBS));
            }
        };
        let start = out.len();
        clause(&mut rng, &mut out);
        if rng.gen_bool(0.35) {
            out.push(' ');
            out.push_str(pick(&mut rng, JOINS));
            out.push(' ');
            clause(&mut rng, &mut out);
        }
        if let Some(c) = out[start..start + 1].chars().next() {
            out.replace_range(start..start + 1, &c.to_uppercase().to_string());
        }
        out.push_str(if rng.gen_bool(0.1) { "!\n" } else { ". " });
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}

/// Printable ASCII without space, then the upper half of the byte range.
fn symbols() -> Vec<u8> {
    (33u8..=126).chain(160u8..=255).collect()
}
/// Weight of each row's preferred successor; the Zipf tail sums to about 4.8.
const LEAD_WEIGHT: f64 = 6.0;
/// Fixes the symbol chain so every seed samples the same language.
const CHAIN_SEED: u64 = 0x51_6d_62;

/// Zipf-weighted successor tables, one cumulative row per symbol.
fn symbol_chain(symbols: &[u8]) -> Vec<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(CHAIN_SEED);
    let n = symbols.len();
    (0..n)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let mut acc = 0.0;
            order
                .into_iter()
                .enumerate()
                .map(|(r, c)| {
                    acc += if r == 0 { LEAD_WEIGHT } else { 1.0 / (r + 1) as f64 };
                    (c, acc)
                })
                .collect()
        })
        .collect()
}

/// Grammar sentences interleaved with records whose identifiers follow a
/// Zipf-weighted symbol chain.
///
/// Unlike [`synthetic_text`], many positions have dozens of plausible
/// successors, so the tail of a next-token ranking carries signal.
pub fn mixed_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let symbols = symbols();
    let chain = symbol_chain(&symbols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_bytes + 256);
    let step = |rng: &mut ChaCha8Rng, prev: usize| -> usize {
        let row = &chain[prev];
        let u = rng.gen_range(0.0..row[row.len() - 1].1);
        row.iter().find(|(_, acc)| *acc > u).map_or(row[0].0, |(c, _)| *c)
    };
    while out.len() < n_bytes {
        if rng.gen_bool(0.15) {
            out.extend(synthetic_text(rng.gen_range(40..120), rng.gen()));
            out.push(b' ');
            continue;
        }
        for field in ["id=", " key=", " ref="] {
            out.extend_from_slice(field.as_bytes());
            let mut s = rng.gen_range(0..symbols.len());
            for _ in 0..rng.gen_range(6..16) {
                out.push(symbols[s]);
                s = step(&mut rng, s);
            }
        }
        out.extend_from_slice(format!(" n={};\n", rng.gen_range(0..1000)).as_bytes());
    }
    out.truncate(n_bytes);
    out
}
