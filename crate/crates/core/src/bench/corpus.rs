use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BenchError;

/// Where the discriminating information of a triplet sits.
///
/// * `S1`: `q = [A, B]`, `s+ = [A+, B+]`, `s- = [A+, B-]`.
/// * `S2`: `q = [A, B]`, `s+ = [A+, B+]`, `s- = [A-, B+]`.
/// * `S3`: `q = [A, B]`, `s+ = [A, B+]`, `s- = [A, B-]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Structure {
    S1,
    S2,
    S3,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::S1, Structure::S2, Structure::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::S1 => "S1",
            Structure::S2 => "S2",
            Structure::S3 => "S3",
        }
    }

    fn bundled(self) -> &'static str {
        match self {
            Structure::S1 => include_str!("../../data/structure1.jsonl"),
            Structure::S2 => include_str!("../../data/structure2.jsonl"),
            Structure::S3 => include_str!("../../data/structure3.jsonl"),
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Structure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Structure::S1),
            "S2" => Ok(Structure::S2),
            "S3" => Ok(Structure::S3),
            other => Err(format!("unknown structure `{other}`")),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    q: String,
    s_plus: String,
    s_minus: String,
    structure: Structure,
}

/// A query with a paraphrase-like positive and a hard negative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Triplet {
    pub q: String,
    pub s_plus: String,
    pub s_minus: String,
    pub structure: Structure,
    /// Byte offsets ending the A-portion of `q`, `s_plus`, `s_minus`.
    pub a_boundary: [usize; 3],
    /// Pseudo-word appended after each rendered sentence, if any.
    pub noise: Option<[String; 3]>,
}

/// One sentence of a triplet as handed to an embedding function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sentence<'a> {
    pub text: &'a str,
    pub a_boundary: usize,
    pub noise: Option<&'a str>,
}

impl Triplet {
    /// Builds a triplet, computing the A boundaries.
    pub fn new(q: &str, s_plus: &str, s_minus: &str, structure: Structure) -> Result<Self, String> {
        for (name, s) in [("q", q), ("s_plus", s_plus), ("s_minus", s_minus)] {
            if s.split_whitespace().count() < 2 {
                return Err(format!("`{name}` needs at least two words"));
            }
        }
        let a_boundary = a_boundaries(q, s_plus, s_minus, structure);
        Ok(Triplet {
            q: q.to_owned(),
            s_plus: s_plus.to_owned(),
            s_minus: s_minus.to_owned(),
            structure,
            a_boundary,
            noise: None,
        })
    }

    /// `[q, s_plus, s_minus]`.
    pub fn sentences(&self) -> [Sentence<'_>; 3] {
        let texts = [&self.q, &self.s_plus, &self.s_minus];
        std::array::from_fn(|i| Sentence {
            text: texts[i],
            a_boundary: self.a_boundary[i],
            noise: self.noise.as_ref().map(|n| n[i].as_str()),
        })
    }

    /// The A-portion of each sentence.
    pub fn a_portions(&self) -> [&str; 3] {
        let s = self.sentences();
        std::array::from_fn(|i| &s[i].text[..s[i].a_boundary])
    }
}

/// End of the first `ceil(w / 2)` words.
pub(crate) fn word_half(s: &str) -> usize {
    let words: Vec<(usize, &str)> = s
        .split_whitespace()
        .map(|w| (w.as_ptr() as usize - s.as_ptr() as usize, w))
        .collect();
    let keep = words.len().div_ceil(2).max(1);
    let (start, w) = words[keep - 1];
    start + w.len()
}

/// Longest common byte prefix, backed off to a word boundary and stripped of
/// trailing whitespace.
fn snapped_common_prefix(a: &str, b: &str) -> usize {
    let mut n = a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count();
    while !a.is_char_boundary(n) {
        n -= 1;
    }
    let at_break = |s: &str| s[n..].chars().next().is_none_or(char::is_whitespace);
    if !(at_break(a) && at_break(b)) {
        n = a[..n].rfind(char::is_whitespace).unwrap_or(0);
    }
    a[..n].trim_end().len()
}

/// Start of the longest common byte suffix, moved forward to a word start;
/// returned as the end of the preceding text with whitespace stripped.
fn snapped_common_suffix_start(a: &str, b: &str) -> usize {
    let n = a.bytes().rev().zip(b.bytes().rev()).take_while(|(x, y)| x == y).count();
    let mut start = a.len() - n;
    while !a.is_char_boundary(start) {
        start += 1;
    }
    let at_break = start == 0 || a[..start].ends_with(char::is_whitespace);
    let b_start = b.len() - (a.len() - start);
    let b_break = b_start == 0 || b[..b_start].ends_with(char::is_whitespace);
    if !(at_break && b_break) {
        start = a[start..].find(char::is_whitespace).map_or(a.len(), |i| start + i);
    }
    a[..start].trim_end().len()
}

fn usable(boundary: usize, s: &str) -> Option<usize> {
    (boundary > 0 && boundary < s.trim_end().len()).then_some(boundary)
}

fn a_boundaries(q: &str, s_plus: &str, s_minus: &str, structure: Structure) -> [usize; 3] {
    match structure {
        Structure::S1 | Structure::S3 => {
            let shared = usable(snapped_common_prefix(q, s_minus), q).filter(|&n| n < s_minus.trim_end().len());
            let (bq, bm) = shared.map_or((word_half(q), word_half(s_minus)), |n| (n, n));
            let bp = shared
                .filter(|&n| s_plus.starts_with(&q[..n]))
                .and_then(|n| usable(n, s_plus))
                .or_else(|| usable(snapped_common_prefix(q, s_plus), s_plus))
                .unwrap_or_else(|| word_half(s_plus));
            [bq, bp, bm]
        }
        Structure::S2 => {
            let bq = snapped_common_suffix_start(q, s_minus);
            let bm = bq + s_minus.len() - q.len();
            match (usable(bq, q), usable(bm, s_minus)) {
                (Some(bq), Some(bm)) => [bq, word_half(s_plus), bm],
                _ => [word_half(q), word_half(s_plus), word_half(s_minus)],
            }
        }
    }
}

/// Parses JSONL triplet records. Blank lines are skipped; when `expected`
/// is given every record must carry that structure.
pub fn parse_corpus(source: &str, expected: Option<Structure>) -> Result<Vec<Triplet>, BenchError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| BenchError::MalformedRow { line: i + 1, reason };
        let r: Record = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if let Some(want) = expected {
            if r.structure != want {
                return Err(malformed(format!("structure {} in the {want} corpus", r.structure)));
            }
        }
        out.push(Triplet::new(&r.q, &r.s_plus, &r.s_minus, r.structure).map_err(malformed)?);
    }
    Ok(out)
}

/// The bundled corpus for `structure`.
pub fn load_corpus(structure: Structure) -> Result<Vec<Triplet>, BenchError> {
    let triplets = parse_corpus(structure.bundled(), Some(structure))?;
    if triplets.is_empty() {
        return Err(BenchError::CorpusMissing(format!("bundled {structure} corpus is empty")));
    }
    Ok(triplets)
}

/// Reads a corpus file.
pub fn load_corpus_file(path: &Path) -> Result<Vec<Triplet>, BenchError> {
    let source = std::fs::read_to_string(path).map_err(|e| BenchError::CorpusMissing(format!("{}: {e}", path.display())))?;
    parse_corpus(&source, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_corpora_load() {
        let s1 = load_corpus(Structure::S1).unwrap();
        assert_eq!(s1.len(), 11);
        assert!(s1[0].q.starts_with("She loves to travel in summer"));
        assert_eq!(load_corpus(Structure::S2).unwrap().len(), 6);
        assert_eq!(load_corpus(Structure::S3).unwrap().len(), 11);
    }

    #[test]
    fn s3_a_prefixes_are_identical() {
        for t in load_corpus(Structure::S3).unwrap() {
            let [q, p, m] = t.a_portions();
            assert_eq!(q, m, "{t:?}");
            assert_eq!(q, p, "{t:?}");
            assert!(q.ends_with(','), "{q}");
            for (s, b) in t.sentences().iter().map(|s| (s.text, s.a_boundary)) {
                assert!(b < s.len());
            }
        }
    }

    #[test]
    fn s1_boundaries() {
        let t = &load_corpus(Structure::S1).unwrap()[0];
        let [q, p, m] = t.a_portions();
        assert_eq!(q, "She loves to travel in summer,");
        assert_eq!(m, q);
        // the positive is reworded from the first word on
        assert_eq!(p, "In summer, she adores traveling, specifically to chilly");
    }

    #[test]
    fn s2_boundaries_split_before_the_shared_ending() {
        let t = &load_corpus(Structure::S2).unwrap()[0];
        let [q, _, m] = t.a_portions();
        assert!(q.ends_with("waves crashing,"), "{q}");
        assert!(m.ends_with("quiet of my home,"), "{m}");
        assert_eq!(&t.q[t.a_boundary[0]..], &t.s_minus[t.a_boundary[2]..]);
    }

    #[test]
    fn corrupted_rows_are_rejected() {
        let good = load_corpus(Structure::S3).unwrap();
        assert!(!good.is_empty());
        let bad = "{\"q\": \"a b\", \"s_plus\": \"c d\", \"s_minus\": \"e f\", \"structure\": \"S3\"}\n{\"q\": \"truncated";
        assert!(matches!(parse_corpus(bad, None), Err(BenchError::MalformedRow { line: 2, .. })));
        let wrong = "{\"q\": \"a b\", \"s_plus\": \"c d\", \"s_minus\": \"e f\", \"structure\": \"S2\"}";
        assert!(matches!(parse_corpus(wrong, Some(Structure::S1)), Err(BenchError::MalformedRow { line: 1, .. })));
        let short = "{\"q\": \"a\", \"s_plus\": \"c d\", \"s_minus\": \"e f\", \"structure\": \"S2\"}";
        assert!(matches!(parse_corpus(short, None), Err(BenchError::MalformedRow { .. })));
        let extra = "{\"q\": \"a b\", \"s_plus\": \"c d\", \"s_minus\": \"e f\", \"structure\": \"S2\", \"x\": 1}";
        assert!(parse_corpus(extra, None).is_err());
    }

    #[test]
    fn missing_file() {
        let err = load_corpus_file(Path::new("/nonexistent/corpus.jsonl")).unwrap_err();
        assert!(matches!(err, BenchError::CorpusMissing(_)));
    }

    #[test]
    fn prefix_snapping() {
        assert_eq!(snapped_common_prefix("ab cd ef", "ab cd eg"), 5);
        assert_eq!(snapped_common_prefix("ab cd", "ab cd ef"), 5);
        assert_eq!(snapped_common_prefix("abc", "abd"), 0);
        assert_eq!(word_half("one two three"), 7);
        assert_eq!(word_half("one two three four"), 7);
    }
}
