//! Rank-error analysis on scored sentence pairs.
//!
//! `Err_i = predicted_rank_i - gold_rank_i`, with ranks ascending in score
//! (the most similar pair has rank `n`) and ties sharing their average rank.
//! A positive error means the pair's similarity was overestimated.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pooling::cosine;
use crate::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("sentence has fewer than two words: {0:?}")]
    TooShort(String),
    #[error("input is constant; correlation is undefined")]
    ConstantInput,
    #[error("selected subset is empty")]
    EmptySubset,
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite score")]
    NonFinite,
    #[error("malformed pair row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("cannot read pair file: {0}")]
    Io(String),
}

/// A gold-scored sentence pair as read from a pair file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub x: String,
    pub y: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredPair {
    pub x: String,
    pub y: String,
    pub gold_score: f64,
    pub predicted_sim: f64,
}

/// Which half of each sentence to compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    First,
    Second,
}

impl Half {
    pub fn as_str(self) -> &'static str {
        match self {
            Half::First => "first_half",
            Half::Second => "second_half",
        }
    }
}

/// 1-based ascending ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    Ok(ranks)
}

/// `Err_i` for every pair, in input order.
pub fn rank_error(pairs: &[ScoredPair]) -> Result<Vec<f64>, AnalysisError> {
    if pairs.len() < 2 {
        return Err(AnalysisError::TooFewPairs(pairs.len()));
    }
    let pred = average_ranks(&pairs.iter().map(|p| p.predicted_sim).collect::<Vec<_>>())?;
    let gold = average_ranks(&pairs.iter().map(|p| p.gold_score).collect::<Vec<_>>())?;
    Ok(pred.iter().zip(&gold).map(|(p, g)| p - g).collect())
}

/// Spearman correlation: Pearson correlation of the average ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64, AnalysisError> {
    if pred.len() != gold.len() {
        return Err(AnalysisError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.len() < 2 {
        return Err(AnalysisError::TooFewPairs(pred.len()));
    }
    let (a, b) = (average_ranks(pred)?, average_ranks(gold)?);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(AnalysisError::ConstantInput);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// First `ceil(w / 2)` words and the rest, each re-joined with single spaces.
pub fn split_halves(sentence: &str) -> Result<(String, String), AnalysisError> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    if words.len() < 2 {
        return Err(AnalysisError::TooShort(sentence.to_owned()));
    }
    let k = words.len().div_ceil(2);
    Ok((words[..k].join(" "), words[k..].join(" ")))
}

fn check_fraction(fraction: f64) -> Result<(), AnalysisError> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(AnalysisError::InvalidFraction(fraction.to_string()))
    }
}

/// Indices of the `ceil(fraction * n)` pairs whose chosen halves are most
/// similar under `reference`, most similar first. Ties are broken by the
/// pair contents, so the selection does not depend on input order.
/// Pairs with a sentence too short to split are left out of `n`.
pub fn select_top_fraction<F>(pairs: &[ScoredPair], reference: F, half: Half, fraction: f64) -> Result<Vec<usize>, Error>
where
    F: Fn(&str) -> Result<Vec<f64>, Error> + Sync,
{
    check_fraction(fraction)?;
    let sims = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (Ok(x), Ok(y)) = (split_halves(&p.x), split_halves(&p.y)) else {
                return Ok(None);
            };
            let (x, y) = match half {
                Half::First => (x.0, y.0),
                Half::Second => (x.1, y.1),
            };
            Ok(Some((i, cosine(&reference(&x)?, &reference(&y)?)?)))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let mut eligible: Vec<(usize, f64)> = sims.into_iter().flatten().collect();
    if eligible.is_empty() {
        return Err(AnalysisError::EmptySubset.into());
    }
    eligible.sort_by(|a, b| {
        let (pa, pb) = (&pairs[a.0], &pairs[b.0]);
        b.1.total_cmp(&a.1)
            .then_with(|| pa.x.cmp(&pb.x))
            .then_with(|| pa.y.cmp(&pb.y))
            .then_with(|| pa.gold_score.total_cmp(&pb.gold_score))
            .then_with(|| pa.predicted_sim.total_cmp(&pb.predicted_sim))
            .then(a.0.cmp(&b.0))
    });
    let k = ((fraction * eligible.len() as f64).ceil() as usize).clamp(1, eligible.len());
    Ok(eligible[..k].iter().map(|&(i, _)| i).collect())
}

/// Cosine between embeddings of `x` and `y` for every record.
pub fn score_pairs<F>(records: &[PairRecord], embed: F) -> Result<Vec<ScoredPair>, Error>
where
    F: Fn(&str) -> Result<Vec<f64>, Error> + Sync,
{
    records
        .par_iter()
        .map(|r| {
            if !r.score.is_finite() {
                return Err(AnalysisError::NonFinite.into());
            }
            Ok(ScoredPair {
                x: r.x.clone(),
                y: r.y.clone(),
                gold_score: r.score,
                predicted_sim: cosine(&embed(&r.x)?, &embed(&r.y)?)?,
            })
        })
        .collect()
}

/// Rank errors of one selected subset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetErrors {
    pub half: Half,
    pub indices: Vec<usize>,
    pub errors: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverestimationReport {
    pub first: SubsetErrors,
    pub second: SubsetErrors,
    pub spearman: f64,
}

/// Rank errors over all pairs, restricted to the pairs most similar in their
/// first halves and in their second halves.
pub fn overestimation_report<F>(pairs: &[ScoredPair], reference: F, fraction: f64) -> Result<OverestimationReport, Error>
where
    F: Fn(&str) -> Result<Vec<f64>, Error> + Sync,
{
    let err = rank_error(pairs)?;
    let subset = |half| -> Result<SubsetErrors, Error> {
        let mut indices = select_top_fraction(pairs, &reference, half, fraction)?;
        indices.sort_unstable();
        let errors: Vec<f64> = indices.iter().map(|&i| err[i]).collect();
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        Ok(SubsetErrors {
            half,
            indices,
            errors,
            mean,
        })
    };
    let pred: Vec<f64> = pairs.iter().map(|p| p.predicted_sim).collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    Ok(OverestimationReport {
        first: subset(Half::First)?,
        second: subset(Half::Second)?,
        spearman: spearman(&pred, &gold).or_else(|e| match e {
            AnalysisError::ConstantInput => Ok(f64::NAN),
            other => Err(other),
        })?,
    })
}

impl OverestimationReport {
    /// Histogram CSV with header `subset,err_bin,count`; `err_bin` is the
    /// lower edge of a bin of width `bin_width`. A `mean` row per subset
    /// follows its bins, with the mean in the `count` column.
    pub fn to_csv(&self, bin_width: f64) -> String {
        let mut out = String::from("subset,err_bin,count\n");
        for s in [&self.first, &self.second] {
            let mut bins: Vec<(i64, usize)> = Vec::new();
            for e in &s.errors {
                let b = (e / bin_width).floor() as i64;
                match bins.iter_mut().find(|(k, _)| *k == b) {
                    Some((_, c)) => *c += 1,
                    None => bins.push((b, 1)),
                }
            }
            bins.sort_unstable();
            for (b, c) in bins {
                let _ = writeln!(out, "{},{},{c}", s.half.as_str(), b as f64 * bin_width);
            }
            let _ = writeln!(out, "{},mean,{}", s.half.as_str(), s.mean);
        }
        out
    }
}

pub fn parse_pairs(source: &str) -> Result<Vec<PairRecord>, AnalysisError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PairRecord = serde_json::from_str(line).map_err(|e| AnalysisError::MalformedRow {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !r.score.is_finite() {
            return Err(AnalysisError::MalformedRow {
                line: i + 1,
                reason: "score is not finite".into(),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>, AnalysisError> {
    let src = std::fs::read_to_string(path).map_err(|e| AnalysisError::Io(format!("{}: {e}", path.display())))?;
    parse_pairs(&src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn pairs(pred: &[f64], gold: &[f64]) -> Vec<ScoredPair> {
        pred.iter()
            .zip(gold)
            .enumerate()
            .map(|(i, (&p, &g))| ScoredPair {
                x: format!("left side words {i}"),
                y: format!("right side words {i}"),
                gold_score: g,
                predicted_sim: p,
            })
            .collect()
    }

    #[test]
    fn rank_error_examples() {
        assert_eq!(rank_error(&pairs(&[0.1, 0.9, 0.5], &[1.0, 2.0, 3.0])).unwrap(), vec![0.0, 1.0, -1.0]);
        assert_eq!(rank_error(&pairs(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0])).unwrap(), vec![0.0; 3]);
        let n = 7;
        let up: Vec<f64> = (0..n).map(f64::from).collect();
        let down: Vec<f64> = up.iter().rev().copied().collect();
        let e = rank_error(&pairs(&down, &up)).unwrap();
        assert_eq!(e.iter().sum::<f64>(), 0.0);
        assert_eq!(e.iter().map(|x| x.abs()).fold(0.0, f64::max), f64::from(n - 1));
        assert_eq!(rank_error(&pairs(&[1.0], &[1.0])), Err(AnalysisError::TooFewPairs(1)));
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]).unwrap(), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(rank_error(&pairs(&[0.5, 0.5], &[1.0, 2.0])).unwrap(), vec![0.5, -0.5]);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(AnalysisError::ConstantInput));
        assert_eq!(spearman(&[1.0], &[1.0]), Err(AnalysisError::TooFewPairs(1)));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0]), Err(AnalysisError::LengthMismatch(2, 1)));
    }

    #[test]
    fn halves() {
        assert_eq!(split_halves("a b c d").unwrap(), ("a b".into(), "c d".into()));
        assert_eq!(split_halves("a b c d e").unwrap(), ("a b c".into(), "d e".into()));
        assert_eq!(split_halves("a"), Err(AnalysisError::TooShort("a".into())));
    }

    fn bag(s: &str) -> Result<Vec<f64>, Error> {
        let mut v = vec![0.0; 16];
        for w in s.split_whitespace() {
            let h = w.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
            v[(h % 16) as usize] += 1.0;
        }
        Ok(v)
    }

    fn many(n: usize, seed: u64) -> Vec<ScoredPair> {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let words = ["cat", "dog", "sun", "rain", "tree", "road", "song", "boat"];
        let sentence = |rng: &mut Xoshiro256StarStar| {
            (0..6).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        (0..n)
            .map(|_| ScoredPair {
                x: sentence(&mut rng),
                y: sentence(&mut rng),
                gold_score: rng.random(),
                predicted_sim: rng.random(),
            })
            .collect()
    }

    #[test]
    fn top_fraction_sizes() {
        let p = many(20, 1);
        assert_eq!(select_top_fraction(&p, bag, Half::First, 1.0).unwrap().len(), 20);
        let top = select_top_fraction(&p, bag, Half::First, 0.1).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top, select_top_fraction(&p, bag, Half::First, 0.1).unwrap());
        assert!(matches!(
            select_top_fraction(&p, bag, Half::First, 0.0),
            Err(Error::Analysis(AnalysisError::InvalidFraction(_)))
        ));
        let short = pairs(&[0.1, 0.2], &[0.1, 0.2]).into_iter().map(|p| ScoredPair { x: "one".into(), ..p }).collect::<Vec<_>>();
        assert!(matches!(
            select_top_fraction(&short, bag, Half::Second, 0.5),
            Err(Error::Analysis(AnalysisError::EmptySubset))
        ));
    }

    #[test]
    fn oracle_predictions_have_no_error() {
        let mut p = many(50, 2);
        for q in &mut p {
            q.predicted_sim = q.gold_score;
        }
        let r = overestimation_report(&p, bag, 0.1).unwrap();
        assert!(r.first.errors.iter().chain(&r.second.errors).all(|&e| e == 0.0));
        assert_eq!(r.spearman, 1.0);
        let csv = r.to_csv(1.0);
        assert!(csv.starts_with("subset,err_bin,count\nfirst_half,0,5\nfirst_half,mean,0\n"), "{csv}");
    }

    #[test]
    fn random_predictions_have_small_means() {
        let n = 2000;
        let p = many(n, 3);
        let r = overestimation_report(&p, bag, 0.1).unwrap();
        // Err_i for a random ranking has variance (n^2 - 1) / 6
        let sd = ((n * n - 1) as f64 / 6.0).sqrt();
        for s in [&r.first, &r.second] {
            let bound = 3.0 * sd / (s.errors.len() as f64).sqrt();
            assert!(s.mean.abs() < bound, "{} vs {bound}", s.mean);
        }
    }

    #[test]
    fn report_ignores_pair_order() {
        let p = many(40, 4);
        let a = overestimation_report(&p, bag, 0.2).unwrap();
        let rev: Vec<_> = p.iter().rev().cloned().collect();
        let b = overestimation_report(&rev, bag, 0.2).unwrap();
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        assert_eq!(sorted(&a.first.errors), sorted(&b.first.errors));
        assert_eq!(a.first.mean, b.first.mean);
        assert_eq!(a.second.mean, b.second.mean);
    }

    #[test]
    fn pair_file_parsing() {
        let src = "{\"x\":\"a b\",\"y\":\"c d\",\"score\":3.5}\n\n{\"x\":\"e f\",\"y\":\"g h\",\"score\":1}\n";
        assert_eq!(parse_pairs(src).unwrap().len(), 2);
        assert!(matches!(parse_pairs("{\"x\":1}"), Err(AnalysisError::MalformedRow { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn errors_sum_to_zero(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..30)) {
            let (pred, gold): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let e = rank_error(&pairs(&pred, &gold)).unwrap();
            prop_assert!(e.iter().sum::<f64>().abs() < 1e-9);
        }

        #[test]
        fn spearman_ignores_monotone_maps(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30)) {
            let (pred, gold): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let mapped: Vec<f64> = pred.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            match (spearman(&pred, &gold), spearman(&mapped, &gold)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
