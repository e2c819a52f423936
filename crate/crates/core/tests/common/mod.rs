#![allow(dead_code)]

//! Synthetic corpora shared by the integration and acceptance suites.

use cnnjm::corpus::{TrainingSample, BOS_ID, PAD_ID};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALPHABET: u32 = 50;
pub const SOURCE_LEN: usize = 12;
pub const FIRST_ID: u32 = 4;

/// Vocabulary size (alphabet plus reserved ids) on both sides.
pub fn vocab_size() -> usize {
    (FIRST_ID + ALPHABET) as usize
}

/// Fixed bijection from source tokens to target tokens.
pub fn translate(src: u32) -> u32 {
    FIRST_ID + ((src - FIRST_ID) * 7 + 3) % ALPHABET
}

fn left_pad(tokens: &[u32], maxlen: usize) -> (Vec<u32>, usize) {
    let offset = maxlen - tokens.len();
    let mut ids = vec![PAD_ID; offset];
    ids.extend_from_slice(tokens);
    (ids, offset)
}

/// Tagged-position task: the gold word translates the token at one random
/// source position, and that position is the affiliated one. The history is
/// all BOS so it carries nothing.
pub fn tag_task(n: usize, maxlen: usize, k: usize, seed: u64) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let tokens: Vec<u32> = (0..SOURCE_LEN)
                .map(|_| rng.gen_range(FIRST_ID..FIRST_ID + ALPHABET))
                .collect();
            let p = rng.gen_range(0..SOURCE_LEN);
            let (source_ids, offset) = left_pad(&tokens, maxlen);
            TrainingSample {
                source_ids,
                affiliated: vec![offset + p],
                head_positions: vec![],
                history: bos_history(k),
                target: translate(tokens[p]),
            }
        })
        .collect()
}

/// Number of marker tokens in the history-guided task.
pub const MARKERS: u32 = 6;

/// History-guided task: the source is six (marker, content) pairs in random
/// order. History words come from a six-word set and the last one selects a
/// marker; the relevant position is the one right after that marker, so it
/// is a deterministic function of the history. The gold word translates the
/// token found there.
pub fn history_task(n: usize, maxlen: usize, k: usize, seed: u64) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = FIRST_ID + MARKERS..FIRST_ID + ALPHABET;
    (0..n)
        .map(|_| {
            let mut markers: Vec<u32> = (FIRST_ID..FIRST_ID + MARKERS).collect();
            markers.shuffle(&mut rng);
            let mut tokens = Vec::with_capacity(SOURCE_LEN);
            for &m in &markers {
                tokens.push(m);
                tokens.push(rng.gen_range(content.clone()));
            }
            let history: Vec<u32> = (0..k)
                .map(|_| rng.gen_range(FIRST_ID..FIRST_ID + MARKERS))
                .collect();
            let key = history[k - 1];
            let p = tokens.iter().position(|&t| t == key).unwrap() + 1;
            let (source_ids, offset) = left_pad(&tokens, maxlen);
            TrainingSample {
                source_ids,
                affiliated: vec![offset + p],
                head_positions: vec![],
                history,
                target: translate(tokens[p]),
            }
        })
        .collect()
}

/// Deterministic toy translation: a word-for-word dictionary with
/// monotone one-to-one alignment. Source sentences come from a fixed Markov
/// grammar where every word has two possible successors. Returns (source,
/// target, alignment) lines.
pub fn toy_translation_corpus(pairs: usize, words: u32, seed: u64) -> Vec<(String, String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let successor = |w: u32, b: bool| if b { (3 * w + 1) % words } else { (5 * w + 2) % words };
    (0..pairs)
        .map(|_| {
            let len = rng.gen_range(3..=6);
            let mut src = vec![rng.gen_range(0..words)];
            while src.len() < len {
                let next = successor(*src.last().unwrap(), rng.gen());
                src.push(next);
            }
            let s = src.iter().map(|w| format!("s{w}")).collect::<Vec<_>>().join(" ");
            let t = src
                .iter()
                .map(|w| format!("t{}", (w * 7 + 3) % words))
                .collect::<Vec<_>>()
                .join(" ");
            let a = (0..len).map(|i| format!("{i}-{i}")).collect::<Vec<_>>().join(" ");
            (s, t, a)
        })
        .collect()
}

pub fn bos_history(k: usize) -> Vec<u32> {
    vec![BOS_ID; k]
}

/// Affiliation by exhaustive search: among aligned target words pick the
/// nearest to `t`, the right one on ties, and return its sorted sources.
pub fn brute_affiliation(t: usize, links: &[(usize, usize)], m: usize) -> Option<Vec<usize>> {
    let aligned = |j: usize| -> Vec<usize> {
        let mut v: Vec<usize> = links.iter().filter(|l| l.1 == j).map(|l| l.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut best: Option<(usize, bool, usize)> = None;
    for j in 0..m {
        if aligned(j).is_empty() {
            continue;
        }
        let d = j.abs_diff(t);
        // smaller distance wins; on ties the right neighbour wins
        let key = (d, j < t, j);
        if best.map_or(true, |b| (key.0, key.1) < (b.0, b.1)) {
            best = Some(key);
        }
    }
    best.map(|b| aligned(b.2))
}
