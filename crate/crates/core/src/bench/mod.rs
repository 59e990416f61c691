//! Synthetic triplet benchmarks.
//!
//! Each triplet asks whether `q` is closer to `s_plus` than to `s_minus`
//! under cosine similarity. Exact ties score one half.

mod corpus;
mod synthetic;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use corpus::{load_corpus, load_corpus_file, parse_corpus, Sentence, Structure, Triplet};
pub use synthetic::{synthetic_triplets, SyntheticConfig};

use crate::backend::toy::ToyTokenizer;
use crate::backend::Backend;
use crate::pooling::cosine;
use crate::strategy::{embed_with, EmbedOptions, Pooling};
use crate::templating::Template;
use crate::{Error, Scalar};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BenchError {
    #[error("corpus missing: {0}")]
    CorpusMissing(String),
    #[error("malformed corpus row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
}

/// Which part of each sentence is pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    /// Only tokens of the A-portion.
    APortion,
}

/// Run parameters echoed into a report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunConfig {
    pub strategy: String,
    pub pooling: String,
    pub template_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub accuracy: f64,
    /// `cosine(q, s_plus) - cosine(q, s_minus)` per triplet.
    pub margins: Vec<f64>,
    /// `(cosine(q, s_plus), cosine(q, s_minus))` per triplet.
    pub similarities: Vec<(f64, f64)>,
    pub config: RunConfig,
}

/// 1 for a strictly larger positive similarity, 0.5 for an exact tie.
pub fn triplet_score(sim_plus: f64, sim_minus: f64) -> f64 {
    if sim_plus > sim_minus {
        1.0
    } else if sim_plus == sim_minus {
        0.5
    } else {
        0.0
    }
}

/// Mean triplet score; `None` for an empty list.
pub fn accuracy(similarities: &[(f64, f64)]) -> Option<f64> {
    if similarities.is_empty() {
        return None;
    }
    let total: f64 = similarities.iter().map(|&(p, m)| triplet_score(p, m)).sum();
    Some(total / similarities.len() as f64)
}

/// Cosine pairs for every triplet, in input order.
pub fn similarity_gap<F>(triplets: &[Triplet], embed_fn: F) -> Result<Vec<(f64, f64)>, Error>
where
    F: Fn(Sentence<'_>) -> Result<Vec<f64>, Error> + Sync,
{
    triplets
        .par_iter()
        .map(|t| {
            let [q, p, m] = t.sentences();
            let (q, p, m) = (embed_fn(q)?, embed_fn(p)?, embed_fn(m)?);
            Ok((cosine(&q, &p)?, cosine(&q, &m)?))
        })
        .collect()
}

/// Scores `triplets` with `embed_fn`. An empty list gives accuracy 0.5.
pub fn triplet_accuracy<F>(triplets: &[Triplet], config: RunConfig, embed_fn: F) -> Result<BenchReport, Error>
where
    F: Fn(Sentence<'_>) -> Result<Vec<f64>, Error> + Sync,
{
    let similarities = similarity_gap(triplets, embed_fn)?;
    Ok(BenchReport {
        accuracy: accuracy(&similarities).unwrap_or(0.5),
        margins: similarities.iter().map(|&(p, m)| p - m).collect(),
        similarities,
        config,
    })
}

/// Embedding function over a template and backend, pooling either the whole
/// occurrence or its A-portion. A sentence's noise word is appended after the
/// full render.
pub fn strategy_embedder<'a, S, B>(
    template: &'a Template,
    pooling: Pooling,
    backend: &'a B,
    scope: Scope,
) -> impl Fn(Sentence<'_>) -> Result<Vec<f64>, Error> + Sync + 'a
where
    S: Scalar,
    B: Backend<S> + ?Sized,
{
    move |s: Sentence<'_>| {
        let trailing = s.noise.map(|n| format!(" {n}"));
        let options = EmbedOptions {
            span: (scope == Scope::APortion).then_some(0..s.a_boundary),
            trailing: trailing.as_deref(),
            eos_marker: None,
        };
        Ok(embed_with(s.text, template, pooling, backend, &options)?.embedding.vector)
    }
}

/// Gives every sentence one pseudo-word drawn uniformly from
/// `1..vocab_size`. Deterministic per seed.
pub fn append_noise_token(triplets: &[Triplet], seed: u64, vocab_size: usize) -> Vec<Triplet> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let hi = vocab_size.max(2) as u32;
    triplets
        .iter()
        .map(|t| {
            let noise = std::array::from_fn(|_| ToyTokenizer::pseudo_word(rng.random_range(1..hi)));
            Triplet {
                noise: Some(noise),
                ..t.clone()
            }
        })
        .collect()
}
