//! Main-stream generation: greedy and beam search with length penalty and
//! trigram blocking.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax, DecoderCache, EncoderMemory, Model, TokenId, EOS};

pub type Trigram = [TokenId; 3];

/// A partial or finished output. `tokens` ends with `EOS` once finished.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of the per-step log-probabilities of `tokens`.
    pub logp: f64,
    pub trigrams: BTreeSet<Trigram>,
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            logp: 0.0,
            trigrams: BTreeSet::new(),
            finished: false,
        }
    }

    /// The trigram `token` would complete, if any.
    pub fn trigram_with(&self, token: TokenId) -> Option<Trigram> {
        match self.tokens.as_slice() {
            [.., a, b] => Some([*a, *b, token]),
            _ => None,
        }
    }

    pub fn blocks(&self, token: TokenId) -> bool {
        token != EOS && self.trigram_with(token).is_some_and(|t| self.trigrams.contains(&t))
    }

    fn extended(&self, token: TokenId, logp: f64) -> Self {
        let mut next = self.clone();
        if let Some(t) = self.trigram_with(token) {
            next.trigrams.insert(t);
        }
        next.tokens.push(token);
        next.logp += logp;
        next.finished = token == EOS;
        next
    }

    /// Generated tokens with the end marker removed.
    pub fn output(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

/// Length-normalized score `logp / len^alpha`, with the end marker counted.
pub fn score(hyp: &Hypothesis, alpha: f64) -> f64 {
    hyp.logp / (hyp.tokens.len().max(1) as f64).powf(alpha)
}

pub fn trigrams(tokens: &[TokenId]) -> BTreeSet<Trigram> {
    tokens.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

pub fn has_repeated_trigram(tokens: &[TokenId]) -> bool {
    trigrams(tokens).len() < tokens.len().saturating_sub(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam: usize,
    /// Length-penalty exponent.
    pub alpha: f64,
    /// End marker is suppressed until this many tokens are generated.
    pub min_len: usize,
    /// At most this many tokens before the end marker is forced.
    pub max_len: usize,
    pub block_trigrams: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            alpha: 1.2,
            min_len: 0,
            max_len: 64,
            block_trigrams: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    /// Every hypothesis that finished, best first.
    pub completed: Vec<Hypothesis>,
}

/// Caps `max_len` so every step stays inside the position table.
fn effective_max(model: &Model, max_len: usize) -> usize {
    max_len.min(model.config.max_len - 1)
}

/// Whether `token` may follow `hyp` under the length rules.
fn length_allows(hyp: &Hypothesis, token: TokenId, min_len: usize, max_len: usize) -> bool {
    let len = hyp.tokens.len();
    if len >= max_len {
        token == EOS
    } else if token == EOS {
        len >= min_len
    } else {
        true
    }
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy(model: &Model, source: &[TokenId], max_len: usize, min_len: usize) -> Result<Vec<TokenId>> {
    let memory = model.encode_memory(source)?;
    let mut cache = model.new_cache();
    let max_len = effective_max(model, max_len);
    let mut out: Vec<TokenId> = Vec::new();
    loop {
        let logits = model.decode_infer_step(&out, &memory, &mut cache)?;
        let len = out.len();
        let mut best: Option<(TokenId, f64)> = None;
        for (tok, &x) in logits.iter().enumerate() {
            let allowed = if len >= max_len {
                tok == EOS
            } else {
                tok != EOS || len >= min_len
            };
            if allowed && best.is_none_or(|(_, b)| x > b) {
                best = Some((tok, x));
            }
        }
        let (tok, _) = best.ok_or_else(|| Error::Contract("empty vocabulary".into()))?;
        if tok == EOS {
            return Ok(out);
        }
        out.push(tok);
    }
}

struct Live {
    hyp: Hypothesis,
    cache: DecoderCache,
}

struct Candidate {
    parent: usize,
    token: TokenId,
    logp: f64,
    step_logp: f64,
}

/// Ranks by cumulative log-probability, then lower token id, then earlier parent.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.logp
        .total_cmp(&a.logp)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

fn step_candidates(
    model: &Model,
    memory: &EncoderMemory,
    live: &mut [Live],
    cfg: &BeamConfig,
    max_len: usize,
) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (parent, l) in live.iter_mut().enumerate() {
        let logits = model.decode_infer_step(&l.hyp.tokens, memory, &mut l.cache)?;
        let lp = log_softmax(&logits);
        let before = out.len();
        for (token, &step_logp) in lp.iter().enumerate() {
            if !length_allows(&l.hyp, token, cfg.min_len, max_len) {
                continue;
            }
            if cfg.block_trigrams && l.hyp.blocks(token) {
                continue;
            }
            out.push(Candidate {
                parent,
                token,
                logp: l.hyp.logp + step_logp,
                step_logp,
            });
        }
        if out.len() == before {
            // Every continuation is blocked: end the hypothesis.
            out.push(Candidate {
                parent,
                token: EOS,
                logp: l.hyp.logp + lp[EOS],
                step_logp: lp[EOS],
            });
        }
    }
    Ok(out)
}

/// Beam search over the main stream. Live hypotheses are ranked by raw
/// log-probability; finished ones by [`score`]. Search stops once `beam`
/// hypotheses have finished or none remain live.
pub fn beam_search(model: &Model, source: &[TokenId], cfg: &BeamConfig) -> Result<BeamOutput> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let memory = model.encode_memory(source)?;
    let max_len = effective_max(model, cfg.max_len);
    let mut live = vec![Live {
        hyp: Hypothesis::empty(),
        cache: model.new_cache(),
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && completed.len() < cfg.beam {
        let mut cands = step_candidates(model, &memory, &mut live, cfg, max_len)?;
        cands.sort_by(candidate_order);
        cands.truncate(cfg.beam - completed.len());
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &live[c.parent];
            let hyp = parent.hyp.extended(c.token, c.step_logp);
            if hyp.finished {
                completed.push(hyp);
            } else {
                next.push(Live {
                    hyp,
                    cache: parent.cache.clone(),
                });
            }
        }
        live = next;
    }
    completed.sort_by(|a, b| {
        score(b, cfg.alpha)
            .total_cmp(&score(a, cfg.alpha))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let best = completed
        .first()
        .ok_or_else(|| Error::Contract("beam search finished no hypothesis".into()))?;
    Ok(BeamOutput {
        tokens: best.output().to_vec(),
        score: score(best, cfg.alpha),
        completed,
    })
}
