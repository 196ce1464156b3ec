//! ROUGE, token accuracy, perplexity, and synthetic seq2seq tasks.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::Pair;
use crate::error::{Error, Result};
use crate::model::{TokenId, RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(overlap, cand);
        let recall = ratio(overlap, reference);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn lower<T: AsRef<str>>(tokens: &[T]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_default() += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap F1 on lowercased tokens.
pub fn rouge_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::Config("ROUGE-N needs n >= 1".into()));
    }
    let cand = lower(candidate);
    let refr = lower(reference);
    let c = ngram_counts(&cand, n);
    let r = ngram_counts(&refr, n);
    let overlap = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(RougeScore::from_counts(
        overlap,
        c.values().sum(),
        r.values().sum(),
    ))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Plain LCS-based F1 on lowercased tokens.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> RougeScore {
    let cand = lower(candidate);
    let refr = lower(reference);
    RougeScore::from_counts(lcs_len(&cand, &refr), cand.len(), refr.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TokenAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl TokenAccuracy {
    /// Exact-match fraction; 1.0 when nothing was scored.
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn merge(self, other: TokenAccuracy) -> TokenAccuracy {
        TokenAccuracy {
            correct: self.correct + other.correct,
            total: self.total + other.total,
        }
    }
}

/// Counts positions where `predicted` matches `gold`, skipping gold `ignore`.
pub fn token_accuracy(predicted: &[TokenId], gold: &[TokenId], ignore: TokenId) -> Result<TokenAccuracy> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape {
            op: "token_accuracy",
            left: vec![predicted.len()],
            right: vec![gold.len()],
        });
    }
    let mut acc = TokenAccuracy::default();
    for (&p, &g) in predicted.iter().zip(gold) {
        if g != ignore {
            acc.total += 1;
            acc.correct += (p == g) as usize;
        }
    }
    Ok(acc)
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    LeadK(usize),
}

impl TaskKind {
    pub fn target(&self, source: &[TokenId]) -> Vec<TokenId> {
        match *self {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
            TaskKind::LeadK(k) => source[..k.min(source.len())].to_vec(),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            _ => s
                .strip_prefix("lead_")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(TaskKind::LeadK)
                .ok_or_else(|| Error::Config(format!("unknown task `{s}` (copy, reverse, lead_<k>)"))),
        }
    }
}

/// Shape of a synthetic task: source lengths are uniform in `min_len..=max_len`
/// and tokens uniform over the non-reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: TaskKind,
    pub train: usize,
    pub test: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn generate(&self) -> Result<(Vec<Pair>, Vec<Pair>)> {
        if self.train == 0 {
            return Err(Error::Config("synthetic task size must be at least 1".into()));
        }
        if self.vocab_size <= RESERVED {
            return Err(Error::Config(format!("vocab size {} has no free ids", self.vocab_size)));
        }
        let floor = match self.kind {
            TaskKind::LeadK(k) => k,
            _ => 1,
        };
        if self.min_len < floor || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad length range {}..={} for {:?}",
                self.min_len, self.max_len, self.kind
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut draw = |count: usize| -> Vec<Pair> {
            (0..count)
                .map(|_| {
                    let len = rng.random_range(self.min_len..=self.max_len);
                    let source: Vec<TokenId> = (0..len).map(|_| rng.random_range(RESERVED..self.vocab_size)).collect();
                    let target = self.kind.target(&source);
                    Pair { source, target }
                })
                .collect()
        };
        let train = draw(self.train);
        let test = draw(self.test);
        Ok((train, test))
    }
}

/// `size` training pairs and `ceil(size / 4)` held-out pairs with source
/// lengths 4 to 10 (at least k + 1 for lead-k).
pub fn synth_task(kind: TaskKind, size: usize, vocab_size: usize, seed: u64) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let min_len = match kind {
        TaskKind::LeadK(k) => (k + 1).max(4),
        _ => 4,
    };
    SynthSpec {
        kind,
        train: size,
        test: size.div_ceil(4),
        vocab_size,
        min_len,
        max_len: min_len.max(10),
        seed,
    }
    .generate()
}

/// Corpus-level report printed by `eval`. `ppl` is only known when the
/// scorer has model likelihoods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub token_acc: f64,
    pub ppl: Option<f64>,
}

impl EvalReport {
    /// Mean per-line F1 scores over aligned candidate/reference lines, plus
    /// position-aligned token accuracy over reference positions.
    pub fn from_lines<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(Error::Contract(format!(
                "{} candidate lines but {} reference lines",
                candidates.len(),
                references.len()
            )));
        }
        let n = candidates.len().max(1) as f64;
        let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
        let mut acc = TokenAccuracy::default();
        for (c, r) in candidates.iter().zip(references) {
            let c: Vec<&str> = c.as_ref().split_whitespace().collect();
            let r: Vec<&str> = r.as_ref().split_whitespace().collect();
            r1 += rouge_n(&c, &r, 1)?.f1;
            r2 += rouge_n(&c, &r, 2)?.f1;
            rl += rouge_l(&c, &r).f1;
            acc.total += r.len();
            acc.correct += r.iter().zip(&c).filter(|(a, b)| a.to_lowercase() == b.to_lowercase()).count();
        }
        Ok(Self {
            rouge1: r1 / n,
            rouge2: r2 / n,
            rouge_l: rl / n,
            token_acc: acc.fraction(),
            ppl: None,
        })
    }
}
