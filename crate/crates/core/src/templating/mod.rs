//! Prompt rendering with byte-exact segment bookkeeping.
//!
//! A [`Template`] carries a pattern with `{S}` input placeholders (one for
//! classical and summarization prompts, two for echo prompts) and an optional
//! `{instruction}` placeholder. Rendering records which bytes of the output
//! came from which placeholder, so that pooling can later be restricted to
//! the tokens of a single occurrence of the input.

mod align;
mod sampler;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use align::{align_spans, SpanIndexSet};
pub use sampler::{sample_templates, sample_templates_with, TemplateFamilies, BUNDLED_FAMILIES};

/// Placeholder replaced by the input text.
pub const INPUT_PLACEHOLDER: &str = "{S}";
/// Placeholder replaced by the task instruction.
pub const INSTRUCTION_PLACEHOLDER: &str = "{instruction}";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("input is empty after trimming")]
    EmptyInput,
    #[error("{strategy} template needs {expected} input placeholder(s), found {found}")]
    PlaceholderMismatch {
        strategy: Strategy,
        expected: usize,
        found: usize,
    },
    #[error("task instruction {0}")]
    InstructionMismatch(&'static str),
    #[error("token offset ({start}, {end}) lies outside the rendered text of {len} bytes")]
    TokenOutOfRange { start: usize, end: usize, len: usize },
    #[error("token offsets are not sorted and non-overlapping at token {0}")]
    MalformedOffsets(usize),
    #[error("no token starts inside the second occurrence; tokenizer and template disagree")]
    EmptySecondOccurrence,
    #[error("invalid template family config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Classical,
    Echo,
    Summarization,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Classical, Strategy::Echo, Strategy::Summarization];

    /// Number of `{S}` placeholders a template of this strategy must contain.
    pub fn placeholder_count(self) -> usize {
        match self {
            Strategy::Echo => 2,
            Strategy::Classical | Strategy::Summarization => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Classical => "classical",
            Strategy::Echo => "echo",
            Strategy::Summarization => "summarization",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classical" => Ok(Strategy::Classical),
            "echo" => Ok(Strategy::Echo),
            "summarization" => Ok(Strategy::Summarization),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    QueryOrSymmetric,
    Document,
}

/// A prompt template.
///
/// The descriptive fields record how a sampled template was composed; only
/// `pattern` (and `task_instruction`) take part in rendering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub strategy: Strategy,
    pub role: Role,
    pub instruction_verb: String,
    pub wording: String,
    pub separator: String,
    pub prefix_first: String,
    /// Echo only.
    pub prefix_second: String,
    /// Summarization only.
    pub suffix: String,
    pub task_instruction: Option<String>,
    pub pattern: String,
}

impl Template {
    fn fixed(strategy: Strategy, verb: &str, wording: &str, separator: &str, pattern: String) -> Self {
        Template {
            strategy,
            role: Role::QueryOrSymmetric,
            instruction_verb: verb.to_owned(),
            wording: wording.to_owned(),
            separator: separator.to_owned(),
            prefix_first: String::new(),
            prefix_second: String::new(),
            suffix: String::new(),
            task_instruction: None,
            pattern,
        }
    }

    /// `Write a sentence: {S}`
    pub fn classical_default() -> Self {
        Self::fixed(Strategy::Classical, "Write", "Write a sentence", ": ", "Write a sentence: {S}".into())
    }

    /// `Rewrite the following sentence: {S}` / `The rewritten sentence: {S}`
    pub fn echo_default() -> Self {
        let mut t = Self::fixed(
            Strategy::Echo,
            "Rewrite",
            "Rewrite the following sentence",
            ": ",
            "Rewrite the following sentence: {S}\nThe rewritten sentence: {S}".into(),
        );
        t.prefix_second = "\nThe rewritten sentence: ".into();
        t
    }

    /// Single-line echo prompt, `Rewrite the sentence: {S}, rewritten sentence: {S}`.
    pub fn echo_inline() -> Self {
        let mut t = Self::fixed(
            Strategy::Echo,
            "Rewrite",
            "Rewrite the sentence",
            ": ",
            "Rewrite the sentence: {S}, rewritten sentence: {S}".into(),
        );
        t.prefix_second = ", rewritten sentence: ".into();
        t
    }

    /// `Summarize the sentence: {S} in one word:`
    pub fn summarization_default() -> Self {
        let mut t = Self::fixed(
            Strategy::Summarization,
            "Summarize",
            "Summarize the sentence",
            ": ",
            "Summarize the sentence: {S} in one word:".into(),
        );
        t.suffix = "in one word".into();
        t
    }

    pub fn default_for(strategy: Strategy) -> Self {
        match strategy {
            Strategy::Classical => Self::classical_default(),
            Strategy::Echo => Self::echo_default(),
            Strategy::Summarization => Self::summarization_default(),
        }
    }

    /// A template from a raw pattern, checked with [`Template::validate`].
    pub fn custom(strategy: Strategy, pattern: &str, instruction: Option<&str>) -> Result<Self, TemplateError> {
        let mut t = Self::fixed(strategy, "", "", "", pattern.to_owned());
        t.task_instruction = instruction.map(str::to_owned);
        t.validate()?;
        Ok(t)
    }

    /// Instructed query (or symmetric) prompt used for fine-tuning.
    ///
    /// Classical: `Instruct: {instruction}\nQuery: {S}`; echo adds
    /// `\nQuery again: {S}`.
    pub fn training_query(strategy: Strategy, instruction: &str) -> Self {
        let pattern = match strategy {
            Strategy::Echo => "Instruct: {instruction}\nQuery: {S}\nQuery again: {S}",
            _ => "Instruct: {instruction}\nQuery: {S}",
        };
        let mut t = Self::fixed(strategy, "Instruct", "Instruct", "\n", pattern.into());
        t.prefix_first = "Query: ".into();
        if strategy == Strategy::Echo {
            t.prefix_second = "Query again: ".into();
        }
        t.task_instruction = Some(instruction.to_owned());
        t
    }

    /// Uninstructed document prompt used for fine-tuning.
    pub fn training_document(strategy: Strategy) -> Self {
        let pattern = match strategy {
            Strategy::Echo => "Document: {S}\nDocument again: {S}",
            _ => "Document: {S}",
        };
        let mut t = Self::fixed(strategy, "", "", "\n", pattern.into());
        t.role = Role::Document;
        t.prefix_first = "Document: ".into();
        if strategy == Strategy::Echo {
            t.prefix_second = "Document again: ".into();
        }
        t
    }

    /// Checks the placeholder and instruction invariants without rendering.
    pub fn validate(&self) -> Result<(), TemplateError> {
        let pieces = parse_pattern(&self.pattern);
        let found = pieces.iter().filter(|p| matches!(p, Piece::Input)).count();
        let expected = self.strategy.placeholder_count();
        if found != expected {
            return Err(TemplateError::PlaceholderMismatch {
                strategy: self.strategy,
                expected,
                found,
            });
        }
        let wants_instruction = pieces.iter().any(|p| matches!(p, Piece::Instruction));
        let has_instruction = self.task_instruction.as_deref().is_some_and(|s| !s.trim().is_empty());
        match (wants_instruction, has_instruction) {
            (true, false) => Err(TemplateError::InstructionMismatch("required by the pattern but missing")),
            (false, true) => Err(TemplateError::InstructionMismatch("given but the pattern has no slot for it")),
            (true, true) if self.role == Role::Document => {
                Err(TemplateError::InstructionMismatch("not allowed on document templates"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Piece<'a> {
    Literal(&'a str),
    Input,
    Instruction,
}

fn parse_pattern(pattern: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = pattern;
    let mut literal_start = 0;
    let mut cursor = 0;
    while !rest.is_empty() {
        let hit = if rest.starts_with(INPUT_PLACEHOLDER) {
            Some((Piece::Input, INPUT_PLACEHOLDER.len()))
        } else if rest.starts_with(INSTRUCTION_PLACEHOLDER) {
            Some((Piece::Instruction, INSTRUCTION_PLACEHOLDER.len()))
        } else {
            None
        };
        match hit {
            Some((piece, width)) => {
                if literal_start < cursor {
                    pieces.push(Piece::Literal(&pattern[literal_start..cursor]));
                }
                pieces.push(piece);
                cursor += width;
                literal_start = cursor;
            }
            None => cursor += rest.chars().next().map_or(1, char::len_utf8),
        }
        rest = &pattern[cursor..];
    }
    if literal_start < pattern.len() {
        pieces.push(Piece::Literal(&pattern[literal_start..]));
    }
    pieces
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Instruction,
    Scaffold,
    FirstOccurrence,
    SecondOccurrence,
    Eos,
}

impl SegmentLabel {
    pub const ALL: [SegmentLabel; 5] = [
        SegmentLabel::Instruction,
        SegmentLabel::Scaffold,
        SegmentLabel::FirstOccurrence,
        SegmentLabel::SecondOccurrence,
        SegmentLabel::Eos,
    ];

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

/// A labelled half-open byte range of a rendered prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: SegmentLabel,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Prompt text plus the labelled segments that tile it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedInput {
    text: String,
    segments: Vec<Segment>,
}

impl RenderedInput {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn into_text(self) -> String {
        self.text
    }

    /// Byte range of the first segment with `label`.
    pub fn span(&self, label: SegmentLabel) -> Option<Range<usize>> {
        self.segments.iter().find(|s| s.label == label).map(Segment::range)
    }

    pub fn substring(&self, label: SegmentLabel) -> Option<&str> {
        self.span(label).map(|r| &self.text[r])
    }

    fn push(&mut self, label: SegmentLabel, piece: &str) {
        if piece.is_empty() {
            return;
        }
        let start = self.text.len();
        self.text.push_str(piece);
        self.segments.push(Segment {
            label,
            start,
            end: self.text.len(),
        });
    }

    /// Appends `separator` as scaffold followed by an end-of-sequence marker.
    pub fn append_eos(&mut self, separator: &str, marker: &str) {
        self.push(SegmentLabel::Scaffold, separator);
        self.push(SegmentLabel::Eos, marker);
    }

    /// Appends trailing scaffold text after everything rendered so far.
    pub fn append_scaffold(&mut self, text: &str) {
        self.push(SegmentLabel::Scaffold, text);
    }

    /// Checks the tiling and echo-equality invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut cursor = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.start != cursor || seg.end <= seg.start {
                return Err(format!("segment {i} {:?} breaks the tiling at byte {cursor}", seg));
            }
            cursor = seg.end;
        }
        if cursor != self.text.len() {
            return Err(format!("segments cover {cursor} of {} bytes", self.text.len()));
        }
        let firsts = self.count(SegmentLabel::FirstOccurrence);
        let seconds = self.count(SegmentLabel::SecondOccurrence);
        if seconds > 0 && (firsts != 1 || seconds != 1) {
            return Err(format!("echo render has {firsts} first and {seconds} second occurrences"));
        }
        if seconds == 1 && self.substring(SegmentLabel::FirstOccurrence) != self.substring(SegmentLabel::SecondOccurrence)
        {
            return Err("occurrences differ".into());
        }
        Ok(())
    }

    fn count(&self, label: SegmentLabel) -> usize {
        self.segments.iter().filter(|s| s.label == label).count()
    }
}

/// Renders `input` into `template`.
pub fn render(template: &Template, input: &str) -> Result<RenderedInput, TemplateError> {
    if input.trim().is_empty() {
        return Err(TemplateError::EmptyInput);
    }
    template.validate()?;
    let mut out = RenderedInput {
        text: String::with_capacity(template.pattern.len() + 2 * input.len()),
        segments: Vec::new(),
    };
    let mut occurrences = 0;
    for piece in parse_pattern(&template.pattern) {
        match piece {
            Piece::Literal(s) => out.push(SegmentLabel::Scaffold, s),
            Piece::Instruction => {
                let instruction = template.task_instruction.as_deref().unwrap_or_default();
                out.push(SegmentLabel::Instruction, instruction);
            }
            Piece::Input => {
                let label = if occurrences == 0 {
                    SegmentLabel::FirstOccurrence
                } else {
                    SegmentLabel::SecondOccurrence
                };
                occurrences += 1;
                out.push(label, input);
            }
        }
    }
    Ok(out)
}
