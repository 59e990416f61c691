use serde::Serialize;

use super::{RenderedInput, SegmentLabel, TemplateError};

/// Token indices grouped by the segment each token was assigned to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SpanIndexSet {
    sets: [Vec<usize>; 5],
    len: usize,
}

impl SpanIndexSet {
    /// Sorted token indices assigned to `label`.
    pub fn indices(&self, label: SegmentLabel) -> &[usize] {
        &self.sets[label.index()]
    }

    /// Length of the tokenized sequence.
    pub fn sequence_len(&self) -> usize {
        self.len
    }

    /// Label of token `index`, if it is in range.
    pub fn label_of(&self, index: usize) -> Option<SegmentLabel> {
        SegmentLabel::ALL
            .into_iter()
            .find(|l| self.sets[l.index()].binary_search(&index).is_ok())
    }
}

/// Assigns each token to the segment containing its first byte.
///
/// `token_offsets` are byte ranges into `rendered.text()` and must be sorted
/// and non-overlapping.
pub fn align_spans(rendered: &RenderedInput, token_offsets: &[(usize, usize)]) -> Result<SpanIndexSet, TemplateError> {
    let len = rendered.text().len();
    let segments = rendered.segments();
    let mut out = SpanIndexSet {
        len: token_offsets.len(),
        ..SpanIndexSet::default()
    };
    let mut seg = 0;
    let mut prev_end = 0;
    for (i, &(start, end)) in token_offsets.iter().enumerate() {
        if start >= len || end > len {
            return Err(TemplateError::TokenOutOfRange { start, end, len });
        }
        if end < start || start < prev_end {
            return Err(TemplateError::MalformedOffsets(i));
        }
        prev_end = end;
        while segments[seg].end <= start {
            seg += 1;
        }
        out.sets[segments[seg].label.index()].push(i);
    }
    if rendered.span(SegmentLabel::SecondOccurrence).is_some() && out.indices(SegmentLabel::SecondOccurrence).is_empty()
    {
        return Err(TemplateError::EmptySecondOccurrence);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templating::{render, Segment, Template};
    use proptest::prelude::*;

    fn manual(text: &str, segs: &[(SegmentLabel, usize, usize)]) -> RenderedInput {
        RenderedInput {
            text: text.into(),
            segments: segs
                .iter()
                .map(|&(label, start, end)| Segment { label, start, end })
                .collect(),
        }
    }

    #[test]
    fn hand_tokenized_echo() {
        let r = manual(
            "a: cat cat",
            &[
                (SegmentLabel::Scaffold, 0, 3),
                (SegmentLabel::FirstOccurrence, 3, 7),
                (SegmentLabel::SecondOccurrence, 7, 10),
            ],
        );
        let spans = align_spans(&r, &[(0, 2), (3, 6), (7, 10)]).unwrap();
        assert_eq!(spans.indices(SegmentLabel::SecondOccurrence), &[2]);
        assert_eq!(spans.indices(SegmentLabel::FirstOccurrence), &[1]);
        assert_eq!(spans.indices(SegmentLabel::Scaffold), &[0]);
    }

    #[test]
    fn straddling_token_goes_to_its_first_byte() {
        let r = manual(
            "ab cd",
            &[
                (SegmentLabel::FirstOccurrence, 0, 2),
                (SegmentLabel::Scaffold, 2, 5),
            ],
        );
        let spans = align_spans(&r, &[(1, 4)]).unwrap();
        assert_eq!(spans.indices(SegmentLabel::FirstOccurrence), &[0]);
    }

    #[test]
    fn out_of_range_offsets() {
        let r = render(&Template::classical_default(), "x").unwrap();
        let len = r.text().len();
        assert!(matches!(
            align_spans(&r, &[(0, 5), (len, len + 1)]),
            Err(TemplateError::TokenOutOfRange { .. })
        ));
        assert!(matches!(align_spans(&r, &[(0, len + 1)]), Err(TemplateError::TokenOutOfRange { .. })));
    }

    #[test]
    fn overlapping_offsets() {
        let r = render(&Template::classical_default(), "x").unwrap();
        assert_eq!(align_spans(&r, &[(0, 5), (3, 6)]), Err(TemplateError::MalformedOffsets(1)));
    }

    #[test]
    fn missing_second_occurrence_tokens() {
        let r = render(&Template::echo_default(), "x").unwrap();
        // one token covering the whole prompt starts in the scaffold
        let all = [(0, r.text().len())];
        assert_eq!(align_spans(&r, &all), Err(TemplateError::EmptySecondOccurrence));
    }

    proptest! {
        #[test]
        fn every_token_gets_exactly_one_label(words in prop::collection::vec("[a-z]{1,6}", 1..8)) {
            let input = words.join(" ");
            let r = render(&Template::echo_default(), &input).unwrap();
            let mut offsets = Vec::new();
            let mut pos = 0;
            for w in r.text().split(' ') {
                offsets.push((pos, pos + w.len()));
                pos += w.len() + 1;
            }
            let spans = align_spans(&r, &offsets).unwrap();
            let mut seen: Vec<usize> = SegmentLabel::ALL.iter().flat_map(|l| spans.indices(*l).to_vec()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..offsets.len()).collect::<Vec<_>>());
            for i in 0..offsets.len() {
                prop_assert!(spans.label_of(i).is_some());
            }
        }
    }
}
