use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::corpus::{load_corpus, Structure, Triplet};

/// Shape of generated S1-style triplets:
/// `q = [A, B]`, `s+ = [A+, B+]`, `s- = [A+, B-]`, where `A+` and `B+` are
/// `A` and `B` with a fraction of words swapped out and `B-` is fresh.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub count: usize,
    pub a_words: (usize, usize),
    pub b_words: (usize, usize),
    /// Probability that a word of `A` or `B` is replaced in the positive.
    pub paraphrase_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            count: 64,
            a_words: (4, 6),
            b_words: (6, 10),
            paraphrase_rate: 0.25,
        }
    }
}

fn vocabulary() -> Vec<String> {
    let mut words = BTreeSet::new();
    for s in Structure::ALL {
        for t in load_corpus(s).expect("bundled corpus") {
            for text in [&t.q, &t.s_plus, &t.s_minus] {
                for w in text.split_whitespace() {
                    let w: String = w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
                    if !w.is_empty() {
                        words.insert(w);
                    }
                }
            }
        }
    }
    words.into_iter().collect()
}

/// Deterministic S1-style triplets drawn from the bundled corpus vocabulary.
pub fn synthetic_triplets(config: &SyntheticConfig, seed: u64) -> Vec<Triplet> {
    let vocab = vocabulary();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let words = |rng: &mut Xoshiro256StarStar, (lo, hi): (usize, usize)| -> Vec<String> {
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| vocab.choose(rng).expect("vocabulary").clone()).collect()
    };
    let paraphrase = |rng: &mut Xoshiro256StarStar, src: &[String]| -> Vec<String> {
        src.iter()
            .map(|w| {
                if rng.random_bool(config.paraphrase_rate) {
                    vocab.choose(rng).expect("vocabulary").clone()
                } else {
                    w.clone()
                }
            })
            .collect()
    };
    (0..config.count)
        .map(|_| {
            let a = words(&mut rng, config.a_words);
            let b = words(&mut rng, config.b_words);
            let a_plus = paraphrase(&mut rng, &a);
            let b_plus = paraphrase(&mut rng, &b);
            let b_minus = words(&mut rng, config.b_words);
            let join = |x: &[String], y: &[String]| format!("{} {}", x.join(" "), y.join(" "));
            let (a_len, a_plus_len) = (a.join(" ").len(), a_plus.join(" ").len());
            Triplet {
                q: join(&a, &b),
                s_plus: join(&a_plus, &b_plus),
                s_minus: join(&a_plus, &b_minus),
                structure: Structure::S1,
                a_boundary: [a_len, a_plus_len, a_plus_len],
                noise: None,
            }
        })
        .collect()
}
