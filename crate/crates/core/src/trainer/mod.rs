//! Contrastive fine-tuning of the toy model.
//!
//! Every batch comes from a single dataset. An example's candidates are its
//! positive, its hard negatives and the positives of the other examples in
//! the batch. Rendered inputs end in a trainable end-of-sequence token that
//! is pooled together with the occurrence.

mod gradcheck;
mod loss;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport, GroupError, GRAD_NORM_FLOOR};
pub use loss::{simcse_loss, simcse_loss_grad, LossGrad};

use crate::backend::toy::{ToyModel, EOS_MARKER};
use crate::bench::{Sentence, Triplet};
use crate::strategy::{embed_with, pooled_indices, shorten, EmbedOptions, Pooling};
use crate::templating::{align_spans, render, RenderedInput, Strategy, Template};
use crate::{Error, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no training examples")]
    EmptyData,
    #[error("malformed training row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("pooled embedding is the zero vector")]
    ZeroVector,
    #[error("loss diverged at step {step}: {loss}")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("cannot read training data: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingExample {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub hard_negatives: Vec<String>,
    pub instruction: String,
    pub symmetric: bool,
    pub dataset_id: String,
}

impl TrainingExample {
    fn validate(&self) -> Result<(), String> {
        if self.positive.trim().is_empty() {
            return Err("positive is empty".into());
        }
        if self.query.trim().is_empty() {
            return Err("query is empty".into());
        }
        if self.dataset_id.is_empty() {
            return Err("dataset_id is empty".into());
        }
        if self.instruction.trim().is_empty() {
            return Err("instruction is empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub pooling: Pooling,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 1.0 / 50.0,
            learning_rate: 8e-4,
            momentum: 0.9,
            batch_size: 32,
            steps: 200,
            seed: 0,
            pooling: Pooling::Mean,
            strategy: Strategy::Echo,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.strategy == Strategy::Summarization {
            return bad("training supports the classical and echo strategies".into());
        }
        if self.pooling == Pooling::FinalToken {
            return bad("training pools with mean or last".into());
        }
        Ok(())
    }
}

/// Indices into the example list, all from `dataset_id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub dataset_id: String,
    pub examples: Vec<usize>,
}

/// One pass over `examples` in single-dataset batches. Each batch's dataset
/// is drawn with probability proportional to its remaining examples; batches
/// of one are dropped.
pub fn make_batches(examples: &[TrainingExample], batch_size: usize, seed: u64) -> Vec<Batch> {
    make_batches_with(examples, batch_size, &mut Xoshiro256StarStar::seed_from_u64(seed))
}

fn make_batches_with<R: Rng>(examples: &[TrainingExample], batch_size: usize, rng: &mut R) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut pools: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        pools.entry(&e.dataset_id).or_default().push(i);
    }
    let mut pools: Vec<(&str, Vec<usize>)> = pools.into_iter().collect();
    for (_, idx) in &mut pools {
        idx.shuffle(rng);
    }
    let mut out = Vec::new();
    loop {
        let remaining: usize = pools.iter().map(|(_, v)| v.len()).sum();
        if remaining == 0 {
            return out;
        }
        let mut pick = rng.random_range(0..remaining);
        let slot = pools
            .iter()
            .position(|(_, v)| {
                if pick < v.len() {
                    true
                } else {
                    pick -= v.len();
                    false
                }
            })
            .expect("pick below the remaining total");
        let (name, idx) = &mut pools[slot];
        let take = idx.len().min(batch_size);
        let examples: Vec<usize> = idx.drain(..take).collect();
        if examples.len() >= 2 {
            out.push(Batch {
                dataset_id: (*name).to_owned(),
                examples,
            });
        }
    }
}

fn query_template(example: &TrainingExample, strategy: Strategy) -> Template {
    Template::training_query(strategy, &example.instruction)
}

fn document_template(example: &TrainingExample, strategy: Strategy) -> Template {
    if example.symmetric {
        query_template(example, strategy)
    } else {
        Template::training_document(strategy)
    }
}

fn with_eos(mut r: RenderedInput) -> RenderedInput {
    r.append_eos(" ", EOS_MARKER);
    r
}

/// Query side and positive side of `example`, each ending in the EOS token.
/// Symmetric examples use the instructed template on both sides.
pub fn render_training_pair(example: &TrainingExample, strategy: Strategy) -> Result<(RenderedInput, RenderedInput), Error> {
    let q = render(&query_template(example, strategy), &example.query)?;
    let d = render(&document_template(example, strategy), &example.positive)?;
    Ok((with_eos(q), with_eos(d)))
}

/// Reads a JSONL training file.
pub fn load_training_data(path: &Path) -> Result<Vec<TrainingExample>, TrainError> {
    let src = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    parse_training_data(&src)
}

pub fn parse_training_data(source: &str) -> Result<Vec<TrainingExample>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| TrainError::MalformedRow { line: i + 1, reason };
        let e: TrainingExample = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        e.validate().map_err(malformed)?;
        out.push(e);
    }
    Ok(out)
}

/// Symmetric examples: `q` as query, `s_plus` as positive, `s_minus` as the
/// hard negative.
pub fn examples_from_triplets(triplets: &[Triplet], instruction: &str, dataset_id: &str) -> Vec<TrainingExample> {
    triplets
        .iter()
        .map(|t| TrainingExample {
            query: t.q.clone(),
            positive: t.s_plus.clone(),
            hard_negatives: vec![t.s_minus.clone()],
            instruction: instruction.to_owned(),
            symmetric: true,
            dataset_id: dataset_id.to_owned(),
        })
        .collect()
}

/// Instruction used for triplet-derived training data.
pub const SIMILARITY_INSTRUCTION: &str = "Retrieve semantically similar text";

/// Embedding function for a trained model, rendering as during training.
pub fn trained_embedder<'a, S: Scalar>(
    model: &'a ToyModel<S>,
    strategy: Strategy,
    pooling: Pooling,
    instruction: &str,
) -> impl Fn(Sentence<'_>) -> Result<Vec<f64>, Error> + Sync + 'a {
    let template = Template::training_query(strategy, instruction);
    move |s: Sentence<'_>| {
        let options = EmbedOptions {
            eos_marker: Some(EOS_MARKER),
            ..EmbedOptions::default()
        };
        Ok(embed_with(s.text, &template, pooling, model, &options)?.embedding.vector)
    }
}

struct Prepared {
    ids: Vec<u32>,
    pooled: Vec<usize>,
}

fn prepare<S: Scalar>(model: &ToyModel<S>, template: &Template, text: &str, pooling: Pooling) -> Result<Prepared, Error> {
    let max = model.config().max_seq_len;
    let mut input = text.to_owned();
    loop {
        let rendered = with_eos(render(template, &input)?);
        let tokens = model.tokenizer().tokenize(rendered.text());
        if tokens.len() > max {
            input = shorten(&input).ok_or(crate::strategy::StrategyError::RenderTooLong { max })?;
            continue;
        }
        let spans = align_spans(&rendered, &tokens.offsets)?;
        let pooled = pooled_indices(template.strategy, pooling, &rendered, &spans, &tokens.offsets, None)?;
        return Ok(Prepared {
            ids: tokens.token_ids,
            pooled,
        });
    }
}

/// Query index, positive index and hard-negative count of one example.
type ExampleSlots = (usize, usize, usize);

/// Sequences of a batch: per example the query, the positive and the hard
/// negatives, in that order. Returns the sequences and, per example, the
/// index of its query and of its first candidate.
fn batch_sequences<S: Scalar>(
    model: &ToyModel<S>,
    data: &[TrainingExample],
    batch: &[usize],
    config: &TrainConfig,
) -> Result<(Vec<Prepared>, Vec<ExampleSlots>), Error> {
    let mut seqs = Vec::new();
    let mut layout = Vec::new();
    for &i in batch {
        let e = &data[i];
        let qt = query_template(e, config.strategy);
        let dt = document_template(e, config.strategy);
        let q = seqs.len();
        seqs.push(prepare(model, &qt, &e.query, config.pooling)?);
        seqs.push(prepare(model, &dt, &e.positive, config.pooling)?);
        for n in &e.hard_negatives {
            seqs.push(prepare(model, &dt, n, config.pooling)?);
        }
        layout.push((q, q + 1, e.hard_negatives.len()));
    }
    Ok((seqs, layout))
}

/// Mean SimCSE loss over a batch and its gradient with respect to every
/// model parameter.
pub fn batch_loss_grad<S: Scalar>(
    model: &ToyModel<S>,
    data: &[TrainingExample],
    batch: &[usize],
    config: &TrainConfig,
) -> Result<(f64, Vec<S>), Error> {
    let (loss, grads) = batch_eval(model, data, batch, config, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Mean SimCSE loss over a batch.
pub fn batch_loss<S: Scalar>(model: &ToyModel<S>, data: &[TrainingExample], batch: &[usize], config: &TrainConfig) -> Result<f64, Error> {
    Ok(batch_eval(model, data, batch, config, false)?.0)
}

fn batch_eval<S: Scalar>(
    model: &ToyModel<S>,
    data: &[TrainingExample],
    batch: &[usize],
    config: &TrainConfig,
    with_grad: bool,
) -> Result<(f64, Option<Vec<S>>), Error> {
    let d = model.config().d_model;
    let mode = model.config().attention;
    let (seqs, layout) = batch_sequences(model, data, batch, config)?;
    let caches = seqs
        .par_iter()
        .map(|s| model.forward_cached(&s.ids, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let pooled: Vec<Vec<f64>> = seqs
        .iter()
        .zip(&caches)
        .map(|(s, c)| {
            let out = c.output();
            let mut v = vec![0.0f64; d];
            for &i in &s.pooled {
                v.iter_mut().zip(&out[i * d..(i + 1) * d]).for_each(|(a, x)| *a += x.wide());
            }
            let n = s.pooled.len() as f64;
            v.iter_mut().for_each(|a| *a /= n);
            v
        })
        .collect();

    let n = layout.len() as f64;
    let mut total = 0.0;
    let mut d_pooled = vec![vec![0.0f64; d]; seqs.len()];
    for (i, &(q, p, n_hard)) in layout.iter().enumerate() {
        let mut idx = vec![p];
        idx.extend(p + 1..p + 1 + n_hard);
        idx.extend(layout.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, l)| l.1));
        let cands: Vec<&[f64]> = idx.iter().map(|&k| pooled[k].as_slice()).collect();
        let g = simcse_loss_grad(&pooled[q], &cands, config.tau)?;
        total += g.loss;
        d_pooled[q].iter_mut().zip(&g.d_anchor).for_each(|(a, b)| *a += b / n);
        for (&k, dc) in idx.iter().zip(&g.d_candidates) {
            d_pooled[k].iter_mut().zip(dc).for_each(|(a, b)| *a += b / n);
        }
    }
    let loss = total / n;
    if !with_grad {
        return Ok((loss, None));
    }

    let partial: Vec<Vec<S>> = seqs
        .par_iter()
        .zip(caches.par_iter())
        .zip(d_pooled.par_iter())
        .map(|((s, cache), dp)| {
            let mut d_out = vec![S::zero(); cache.seq_len() * d];
            let share = 1.0 / s.pooled.len() as f64;
            for &i in &s.pooled {
                d_out[i * d..(i + 1) * d].iter_mut().zip(dp).for_each(|(o, &g)| *o += S::of(g * share));
            }
            let mut grads = vec![S::zero(); model.layout().total()];
            model.backward(cache, &d_out, &mut grads);
            grads
        })
        .collect();
    let mut grads = vec![S::zero(); model.layout().total()];
    for g in &partial {
        grads.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }
    Ok((loss, Some(grads)))
}

/// Trains with momentum gradient descent and returns the model and the loss
/// of every step. Batches cycle through reshuffled passes over `data`.
pub fn train<S: Scalar>(
    mut model: ToyModel<S>,
    data: &[TrainingExample],
    config: &TrainConfig,
) -> Result<(ToyModel<S>, Vec<f64>), Error> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData.into());
    }
    for (i, e) in data.iter().enumerate() {
        e.validate().map_err(|reason| TrainError::MalformedRow { line: i + 1, reason })?;
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(config.seed);
    let mut queue = std::collections::VecDeque::new();
    let mut velocity = vec![S::zero(); model.layout().total()];
    let (lr, mu) = (S::of(config.learning_rate), S::of(config.momentum));
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if queue.is_empty() {
            queue.extend(make_batches_with(data, config.batch_size, &mut rng));
            if queue.is_empty() {
                return Err(TrainError::InvalidConfig("every dataset has a single example; no batch has negatives".into()).into());
            }
        }
        let batch = queue.pop_front().expect("refilled");
        let (loss, grads) = batch_loss_grad(&model, data, &batch.examples, config)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::DivergenceDetected { step, loss }.into());
        }
        for ((p, v), &g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        losses.push(loss);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyModelConfig;
    use crate::bench::{load_corpus, Structure};
    use crate::templating::SegmentLabel;

    fn example(ds: &str, i: usize) -> TrainingExample {
        TrainingExample {
            query: format!("query number {i}"),
            positive: format!("positive text {i}"),
            hard_negatives: vec![format!("negative text {i}")],
            instruction: "Find the match".into(),
            symmetric: false,
            dataset_id: ds.into(),
        }
    }

    #[test]
    fn batches_are_single_sourced_and_seeded() {
        let data: Vec<_> = (0..4).map(|i| example("a", i)).chain((0..4).map(|i| example("b", i))).collect();
        for seed in 0..20 {
            let b = make_batches(&data, 4, seed);
            assert_eq!(b, make_batches(&data, 4, seed));
            let mut seen: Vec<usize> = b.iter().flat_map(|b| b.examples.clone()).collect();
            seen.sort();
            assert_eq!(seen, (0..8).collect::<Vec<_>>());
            for batch in &b {
                assert!(batch.examples.iter().all(|&i| data[i].dataset_id == batch.dataset_id));
            }
        }
    }

    #[test]
    fn short_final_batches_and_singletons() {
        let data: Vec<_> = (0..5).map(|i| example("a", i)).chain([example("b", 9)]).collect();
        let b = make_batches(&data, 4, 1);
        let sizes: Vec<usize> = b.iter().map(|b| b.examples.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 4, "{sizes:?}");
        let data: Vec<_> = (0..6).map(|i| example("a", i)).collect();
        let sizes: Vec<usize> = make_batches(&data, 4, 1).iter().map(|b| b.examples.len()).collect();
        assert_eq!(sizes, vec![4, 2]);
    }

    #[test]
    fn rendering_sides() {
        let mut e = example("a", 1);
        let (q, d) = render_training_pair(&e, Strategy::Echo).unwrap();
        assert_eq!(q.text(), "Instruct: Find the match\nQuery: query number 1\nQuery again: query number 1 </s>");
        assert_eq!(d.text(), "Document: positive text 1\nDocument again: positive text 1 </s>");
        assert_eq!(d.substring(SegmentLabel::Eos), Some("</s>"));
        e.symmetric = true;
        let (_, d) = render_training_pair(&e, Strategy::Classical).unwrap();
        assert_eq!(d.text(), "Instruct: Find the match\nQuery: positive text 1 </s>");
        assert!(d.span(SegmentLabel::SecondOccurrence).is_none());
    }

    #[test]
    fn data_parsing() {
        let ok = r#"{"query":"a","positive":"b","hard_negatives":["c"],"instruction":"i","symmetric":false,"dataset_id":"x"}"#;
        assert_eq!(parse_training_data(ok).unwrap().len(), 1);
        let bad = r#"{"query":"a","positive":"","hard_negatives":[],"instruction":"i","symmetric":false,"dataset_id":"x"}"#;
        assert!(matches!(parse_training_data(bad), Err(TrainError::MalformedRow { line: 1, .. })));
        assert!(matches!(parse_training_data("{"), Err(TrainError::MalformedRow { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { strategy: Strategy::Summarization, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn small_model(seed: u64) -> ToyModel<f32> {
        ToyModel::init(ToyModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            seed,
            ..ToyModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = examples_from_triplets(&load_corpus(Structure::S3).unwrap(), SIMILARITY_INSTRUCTION, "s3");
        let m = small_model(3);
        let config = TrainConfig {
            learning_rate: 0.0,
            batch_size: 4,
            steps: 3,
            ..Default::default()
        };
        let (trained, losses) = train(m.clone(), &data, &config).unwrap();
        assert_eq!(trained.params(), m.params());
        assert_eq!(losses.len(), 3);
    }

    #[test]
    fn training_is_reproducible() {
        let data = examples_from_triplets(&load_corpus(Structure::S3).unwrap(), SIMILARITY_INSTRUCTION, "s3");
        let config = TrainConfig {
            learning_rate: 0.01,
            batch_size: 4,
            steps: 4,
            ..Default::default()
        };
        let (a, la) = train(small_model(4), &data, &config).unwrap();
        let (b, lb) = train(small_model(4), &data, &config).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn empty_data() {
        let err = train(small_model(1), &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Train(TrainError::EmptyData)));
    }
}
