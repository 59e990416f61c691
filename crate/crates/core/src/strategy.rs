//! End-to-end embedding: render → encode → align → pool.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::pooling::{mean_pool, row_pool, PooledEmbedding, PoolingError};
use crate::templating::{align_spans, render, RenderedInput, SegmentLabel, SpanIndexSet, Strategy, Template};
use crate::{Error, Scalar};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StrategyError {
    #[error("render does not fit max_seq_len {max} even after truncating the input")]
    RenderTooLong { max: usize },
}

/// How token states are reduced to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over the pooled occurrence.
    Mean,
    /// Last token of the pooled occurrence.
    Last,
    /// Last token of the whole rendered sequence.
    FinalToken,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Last => "last",
            Pooling::FinalToken => "final_token",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "last" => Ok(Pooling::Last),
            "final_token" | "final-token" => Ok(Pooling::FinalToken),
            other => Err(format!("unknown pooling `{other}`")),
        }
    }
}

/// Optional knobs for [`embed_with`].
#[derive(Clone, Debug, Default)]
pub struct EmbedOptions<'a> {
    /// Byte range of the input to pool over, inside the pooled occurrence.
    pub span: Option<Range<usize>>,
    /// Text appended after the whole render (as scaffold), e.g. a noise token.
    pub trailing: Option<&'a str>,
    /// End-of-sequence marker appended after the render and pooled together
    /// with the occurrence.
    pub eos_marker: Option<&'a str>,
}

/// An embedding together with the bookkeeping that produced it.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub embedding: PooledEmbedding,
    pub rendered: RenderedInput,
    pub spans: SpanIndexSet,
    /// The input actually rendered (shorter than the request if truncated).
    pub input: String,
    /// Token indices pooled over.
    pub pooled: Vec<usize>,
}

/// Segment whose tokens a strategy pools over.
pub fn pooled_segment(strategy: Strategy) -> SegmentLabel {
    match strategy {
        Strategy::Echo => SegmentLabel::SecondOccurrence,
        Strategy::Classical | Strategy::Summarization => SegmentLabel::FirstOccurrence,
    }
}

/// Token indices a given strategy/pooling combination reads.
///
/// Summarization always reads the final token; `Last` reads the largest
/// index of the occurrence (plus EOS) set.
pub fn pooled_indices(
    strategy: Strategy,
    pooling: Pooling,
    rendered: &RenderedInput,
    spans: &SpanIndexSet,
    offsets: &[(usize, usize)],
    span: Option<&Range<usize>>,
) -> Result<Vec<usize>, PoolingError> {
    let n = spans.sequence_len();
    if strategy == Strategy::Summarization || pooling == Pooling::FinalToken {
        return if n == 0 { Err(PoolingError::EmptySequence) } else { Ok(vec![n - 1]) };
    }
    let label = pooled_segment(strategy);
    let mut selected: Vec<usize> = match span {
        None => spans.indices(label).to_vec(),
        Some(r) => {
            let occ = rendered.span(label).ok_or(PoolingError::EmptySelection)?;
            let (lo, hi) = (occ.start + r.start, occ.start + r.end.min(occ.len()));
            spans
                .indices(label)
                .iter()
                .copied()
                .filter(|&i| r.start < r.end && offsets[i].0 < hi && offsets[i].1.max(offsets[i].0 + 1) > lo)
                .collect()
        }
    };
    if span.is_none() {
        selected.extend_from_slice(spans.indices(SegmentLabel::Eos));
        selected.sort_unstable();
    }
    if selected.is_empty() {
        return Err(PoolingError::EmptySelection);
    }
    if pooling == Pooling::Last {
        let last = *selected.last().expect("non-empty");
        selected = vec![last];
    }
    Ok(selected)
}

/// Drops the last whitespace-delimited word (or, for a single word, the last
/// character). `None` once nothing is left.
pub(crate) fn shorten(input: &str) -> Option<String> {
    let trimmed = input.trim_end();
    let cut = match trimmed.rfind(char::is_whitespace) {
        Some(i) => trimmed[..i].trim_end().len(),
        None => trimmed.char_indices().last().map_or(0, |(i, _)| i),
    };
    let out = &trimmed[..cut];
    (!out.trim().is_empty()).then(|| out.to_owned())
}

/// Embeds `text` with every option; see [`embed`] for the pooling rules.
pub fn embed_with<S: Scalar, B: Backend<S> + ?Sized>(
    text: &str,
    template: &Template,
    pooling: Pooling,
    backend: &B,
    options: &EmbedOptions<'_>,
) -> Result<Embedded, Error> {
    let mut input = text.to_owned();
    loop {
        let mut rendered = render(template, &input)?;
        if let Some(marker) = options.eos_marker {
            rendered.append_eos(" ", marker);
        }
        if let Some(trailing) = options.trailing {
            rendered.append_scaffold(trailing);
        }
        let (tokens, states) = match backend.encode(rendered.text()) {
            Ok(out) => out,
            Err(BackendError::SequenceTooLong { max, .. }) => match shorten(&input) {
                Some(shorter) => {
                    input = shorter;
                    continue;
                }
                None => return Err(StrategyError::RenderTooLong { max }.into()),
            },
            Err(e) => return Err(e.into()),
        };
        let spans = align_spans(&rendered, &tokens.offsets)?;
        let pooled = pooled_indices(
            template.strategy,
            pooling,
            &rendered,
            &spans,
            &tokens.offsets,
            options.span.as_ref(),
        )?;
        let embedding = if template.strategy == Strategy::Summarization || pooling != Pooling::Mean {
            row_pool(&states, pooled[0])?
        } else {
            mean_pool(&states, &pooled)?
        };
        return Ok(Embedded {
            embedding,
            rendered,
            spans,
            input,
            pooled,
        });
    }
}

/// Embeds `text`.
///
/// * classical: pools the (only) occurrence of the input;
/// * echo: pools the second occurrence only;
/// * summarization: last token of the full render, whatever `pooling` says.
///
/// Renders too long for the backend are retried with the input shortened from
/// the right; the scaffold is never cut and both echo copies stay identical.
pub fn embed<S: Scalar, B: Backend<S> + ?Sized>(
    text: &str,
    template: &Template,
    pooling: Pooling,
    backend: &B,
) -> Result<PooledEmbedding, Error> {
    Ok(embed_with(text, template, pooling, backend, &EmbedOptions::default())?.embedding)
}

/// Like [`embed`] but pools only tokens overlapping `range`, a byte range of
/// the input inside the pooled occurrence.
pub fn embed_span<S: Scalar, B: Backend<S> + ?Sized>(
    text: &str,
    template: &Template,
    pooling: Pooling,
    backend: &B,
    range: Range<usize>,
) -> Result<PooledEmbedding, Error> {
    let options = EmbedOptions {
        span: Some(range),
        ..EmbedOptions::default()
    };
    Ok(embed_with(text, template, pooling, backend, &options)?.embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::{ToyModel, ToyModelConfig, ToyTokenizer};
    use crate::backend::AttentionMode;
    use crate::pooling::{cosine, last_pool};

    fn toy(seed: u64) -> ToyModel<f32> {
        ToyModel::init(ToyModelConfig::default().with_seed(seed)).unwrap()
    }

    #[test]
    fn echo_mean_is_mean_over_second_occurrence() {
        let m = toy(1);
        let t = Template::echo_default();
        let text = "she loves summer and the sea";
        let e = embed_with(text, &t, Pooling::Mean, &m, &EmbedOptions::default()).unwrap();
        let rendered = render(&t, text).unwrap();
        let (tokens, states) = m.encode(rendered.text()).unwrap();
        let spans = align_spans(&rendered, &tokens.offsets).unwrap();
        let second = spans.indices(SegmentLabel::SecondOccurrence);
        assert_eq!(second.len(), 6);
        assert_eq!(e.embedding, mean_pool(&states, second).unwrap());
        assert_eq!(e.pooled, second);
    }

    #[test]
    fn classical_last_is_last_token_of_occurrence() {
        let m = toy(2);
        let t = Template::classical_default();
        let e = embed_with("a b c", &t, Pooling::Last, &m, &EmbedOptions::default()).unwrap();
        assert_eq!(e.pooled, vec![5]);
        let (_, states) = m.encode(e.rendered.text()).unwrap();
        assert_eq!(e.embedding.vector, row_pool(&states, 5).unwrap().vector);
    }

    #[test]
    fn summarization_ignores_pooling_argument() {
        let m = toy(3);
        let t = Template::summarization_default();
        let mean = embed("cats purr loudly", &t, Pooling::Mean, &m).unwrap();
        let last = embed("cats purr loudly", &t, Pooling::Last, &m).unwrap();
        assert_eq!(mean, last);
        let (_, states) = m.encode("Summarize the sentence: cats purr loudly in one word:").unwrap();
        assert_eq!(mean, last_pool(&states).unwrap());
    }

    #[test]
    fn same_tokens_same_embedding() {
        let m = toy(4);
        let t = Template::classical_default();
        let a = embed("The Cat sat", &t, Pooling::Mean, &m).unwrap();
        let b = embed("the cat  SAT", &t, Pooling::Mean, &m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_range_span_equals_embed() {
        let m = toy(5);
        for t in [Template::classical_default(), Template::echo_default()] {
            let text = "he reads books every night";
            for pooling in [Pooling::Mean, Pooling::Last] {
                let full = embed(text, &t, pooling, &m).unwrap();
                let span = embed_span(text, &t, pooling, &m, 0..text.len()).unwrap();
                assert_eq!(full, span);
            }
        }
    }

    #[test]
    fn classical_shared_prefix_span_is_identical() {
        let m = toy(6);
        let t = Template::classical_default();
        let q = "He reads books every night, finding solace in fiction";
        let s = "He reads books every night, yet he feels otherwise";
        let a_end = "He reads books every night,".len();
        let eq = embed_span(q, &t, Pooling::Mean, &m, 0..a_end).unwrap();
        let es = embed_span(s, &t, Pooling::Mean, &m, 0..a_end).unwrap();
        assert_eq!(eq.vector, es.vector);
        assert_eq!(cosine(&eq.vector, &es.vector).unwrap(), 1.0);
        assert_eq!(eq.cardinality, 5);
    }

    #[test]
    fn echo_shared_prefix_span_differs() {
        let m = toy(6);
        let t = Template::echo_default();
        let q = "He reads books every night, finding solace in fiction";
        let s = "He reads books every night, yet he feels otherwise";
        let a_end = "He reads books every night,".len();
        let eq = embed_span(q, &t, Pooling::Mean, &m, 0..a_end).unwrap();
        let es = embed_span(s, &t, Pooling::Mean, &m, 0..a_end).unwrap();
        assert_ne!(eq.vector, es.vector);
    }

    #[test]
    fn span_past_the_occurrence_is_empty() {
        let m = toy(7);
        let t = Template::echo_default();
        let err = embed_span("a b", &t, Pooling::Mean, &m, 10..20).unwrap_err();
        assert!(matches!(err, Error::Pooling(PoolingError::EmptySelection)));
        let err = embed_span("a b", &t, Pooling::Mean, &m, 1..1).unwrap_err();
        assert!(matches!(err, Error::Pooling(PoolingError::EmptySelection)));
    }

    #[test]
    fn trailing_token_leaves_occurrence_mean_unchanged() {
        let m = toy(8);
        for t in [Template::classical_default(), Template::echo_default()] {
            let text = "the band plays rock music loudly";
            let plain = embed_with(text, &t, Pooling::Mean, &m, &EmbedOptions::default()).unwrap();
            let noise = ToyTokenizer::pseudo_word(77);
            let trailing = format!(" {noise}");
            let opts = EmbedOptions {
                trailing: Some(&trailing),
                ..Default::default()
            };
            let noised = embed_with(text, &t, Pooling::Mean, &m, &opts).unwrap();
            assert_eq!(plain.embedding, noised.embedding);
            let last_plain = embed(text, &t, Pooling::FinalToken, &m).unwrap();
            let last_noised = embed_with(text, &t, Pooling::FinalToken, &m, &opts).unwrap().embedding;
            assert_ne!(last_plain, last_noised);
        }
    }

    #[test]
    fn truncation_keeps_occurrences_identical() {
        let cfg = ToyModelConfig {
            max_seq_len: 16,
            ..ToyModelConfig::default()
        };
        let m = ToyModel::<f32>::init(cfg).unwrap();
        let t = Template::echo_default();
        let text = "one two three four five six seven eight nine ten";
        let e = embed_with(text, &t, Pooling::Mean, &m, &EmbedOptions::default()).unwrap();
        // scaffold is 4 + 3 words, leaving 4 words per copy
        assert_eq!(e.input, "one two three four");
        assert_eq!(e.spans.sequence_len(), 15);
        e.rendered.check_invariants().unwrap();

        let tiny = ToyModel::<f32>::init(ToyModelConfig {
            max_seq_len: 7,
            ..ToyModelConfig::default()
        })
        .unwrap();
        let err = embed(text, &t, Pooling::Mean, &tiny).unwrap_err();
        assert!(matches!(err, Error::Strategy(StrategyError::RenderTooLong { max: 7 })));
    }

    #[test]
    fn eos_is_pooled_with_the_occurrence() {
        let m = toy(9);
        let t = Template::training_document(Strategy::Echo);
        let opts = EmbedOptions {
            eos_marker: Some("</s>"),
            ..Default::default()
        };
        let e = embed_with("a b", &t, Pooling::Mean, &m, &opts).unwrap();
        // Document: a b Document again: a b </s>
        assert_eq!(e.pooled, vec![5, 6, 7]);
        let last = embed_with("a b", &t, Pooling::Last, &m, &opts).unwrap();
        assert_eq!(last.pooled, vec![7]);
    }

    #[test]
    fn bidirectional_toy_breaks_prefix_identity() {
        let m = ToyModel::<f32>::init(ToyModelConfig::default().with_seed(6).with_attention(AttentionMode::Bidirectional))
            .unwrap();
        let t = Template::classical_default();
        let a_end = "He reads".len();
        let a = embed_span("He reads books", &t, Pooling::Mean, &m, 0..a_end).unwrap();
        let b = embed_span("He reads poems", &t, Pooling::Mean, &m, 0..a_end).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn shorten_rules() {
        assert_eq!(shorten("a b  c").as_deref(), Some("a b"));
        assert_eq!(shorten("abc").as_deref(), Some("ab"));
        assert_eq!(shorten("a"), None);
        assert_eq!(shorten("a b"), Some("a".into()));
    }
}
