//! Whitespace vocabulary, span-mask denoising examples and padded batching.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{TokenId, MASK, PAD, RESERVED, UNK};

/// Surface forms of the reserved ids, in id order.
pub const RESERVED_TOKENS: [&str; RESERVED] = ["<s>", "<pad>", "[MASK]", "<unk>"];

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_RATIO: f64 = 0.15;

/// Token to id bijection. Ids below [`RESERVED`] are the special symbols;
/// corpus tokens follow in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from corpus tokens given in id order (reserved
    /// symbols excluded).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocab token {tok:?} at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate vocab token {tok:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Keeps the most frequent whitespace tokens, ties broken lexicographically.
    /// `max_size` counts the reserved ids, so it is also the model vocab size.
    pub fn build<'a, I>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab size {max_size} leaves no room beyond the {RESERVED} reserved ids"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One corpus token per line; line `k` holds id `k + RESERVED`.
    pub fn to_text(&self) -> String {
        self.tokens[RESERVED..].iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// FNV-1a over the vocab file contents; recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Which corruption rule was applied to a masked token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// 80% mask symbol, 10% uniform random non-reserved id, 10% unchanged.
pub fn corrupt<R: Rng + ?Sized>(token: TokenId, vocab_size: usize, rng: &mut R) -> (TokenId, Corruption) {
    let u: f64 = rng.random();
    if u < 0.8 {
        (MASK, Corruption::Mask)
    } else if u < 0.9 {
        (rng.random_range(RESERVED..vocab_size), Corruption::Random)
    } else {
        (token, Corruption::Keep)
    }
}

pub fn corrupt_token<R: Rng + ?Sized>(token: TokenId, vocab_size: usize, rng: &mut R) -> TokenId {
    corrupt(token, vocab_size, rng).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisedExample {
    /// The document with every span position corrupted.
    pub encoder_input: Vec<TokenId>,
    /// Original tokens under the spans, concatenated in order.
    pub target: Vec<TokenId>,
    pub target_span_starts: Vec<usize>,
    pub span_lengths: Vec<usize>,
    /// The rule applied at each target position.
    pub corruption: Vec<Corruption>,
}

impl DenoisedExample {
    /// Writes the target fragments back over the encoder input.
    pub fn reconstruct(&self) -> Vec<TokenId> {
        let mut out = self.encoder_input.clone();
        let mut offset = 0;
        for (&start, &len) in self.target_span_starts.iter().zip(&self.span_lengths) {
            out[start..start + len].copy_from_slice(&self.target[offset..offset + len]);
            offset += len;
        }
        out
    }

    pub fn masked_count(&self) -> usize {
        self.target.len()
    }

    /// Debug dump line: `SRC<TAB>TGT<TAB>starts`.
    pub fn dump_line(&self, vocab: &Vocab) -> String {
        let starts: Vec<String> = self.target_span_starts.iter().map(usize::to_string).collect();
        format!(
            "{}\t{}\t{}",
            vocab.decode(&self.encoder_input),
            vocab.decode(&self.target),
            starts.join(",")
        )
    }
}

/// Span length for a window of `len` tokens.
pub fn span_length(len: usize, ratio: f64) -> usize {
    (ratio * len as f64).round() as usize
}

/// One contiguous span per `window` tokens, `round(ratio * window_len)` long,
/// with a uniform start that keeps it inside the window. A trailing partial
/// window gets a span too when its rounded length is at least one.
pub fn mask_spans<R: Rng + ?Sized>(
    tokens: &[TokenId],
    window: usize,
    ratio: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<DenoisedExample> {
    if tokens.is_empty() {
        return Err(Error::Contract("cannot mask an empty document".into()));
    }
    if window == 0 || !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("bad span settings: window {window}, ratio {ratio}")));
    }
    if vocab_size <= RESERVED {
        return Err(Error::Config(format!("vocab size {vocab_size} has no corpus tokens")));
    }
    let mut ex = DenoisedExample {
        encoder_input: tokens.to_vec(),
        target: Vec::new(),
        target_span_starts: Vec::new(),
        span_lengths: Vec::new(),
        corruption: Vec::new(),
    };
    for begin in (0..tokens.len()).step_by(window) {
        let len = window.min(tokens.len() - begin);
        let span = span_length(len, ratio);
        if span == 0 {
            continue;
        }
        let start = begin + rng.random_range(0..=len - span);
        for pos in start..start + span {
            let (tok, how) = corrupt(tokens[pos], vocab_size, rng);
            ex.encoder_input[pos] = tok;
            ex.target.push(tokens[pos]);
            ex.corruption.push(how);
        }
        ex.target_span_starts.push(start);
        ex.span_lengths.push(span);
    }
    Ok(ex)
}

/// A supervised `(source, target)` pair of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl From<DenoisedExample> for Pair {
    fn from(ex: DenoisedExample) -> Self {
        Pair {
            source: ex.encoder_input,
            target: ex.target,
        }
    }
}

/// Pairs padded to a common length. Lengths record the unpadded extent, and
/// only that extent is ever fed to attention or scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<TokenId>>,
    pub target: Vec<Vec<TokenId>>,
    pub source_len: Vec<usize>,
    pub target_len: Vec<usize>,
    pub pad: TokenId,
}

impl Batch {
    pub fn from_pairs(pairs: &[Pair], pad: TokenId) -> Self {
        let max_src = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let max_tgt = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let padded = |v: &[TokenId], n: usize| {
            let mut out = v.to_vec();
            out.resize(n, pad);
            out
        };
        Batch {
            source: pairs.iter().map(|p| padded(&p.source, max_src)).collect(),
            target: pairs.iter().map(|p| padded(&p.target, max_tgt)).collect(),
            source_len: pairs.iter().map(|p| p.source.len()).collect(),
            target_len: pairs.iter().map(|p| p.target.len()).collect(),
            pad,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_mask(&self, i: usize) -> Vec<bool> {
        (0..self.source[i].len()).map(|k| k < self.source_len[i]).collect()
    }

    pub fn target_mask(&self, i: usize) -> Vec<bool> {
        (0..self.target[i].len()).map(|k| k < self.target_len[i]).collect()
    }

    /// Loss targets with pad positions ignored.
    pub fn loss_targets(&self, i: usize) -> Vec<Option<TokenId>> {
        self.target[i]
            .iter()
            .zip(self.target_mask(i))
            .map(|(&t, keep)| keep.then_some(t))
            .collect()
    }

    /// The unpadded pair at row `i`.
    pub fn pair(&self, i: usize) -> Pair {
        Pair {
            source: self.source[i][..self.source_len[i]].to_vec(),
            target: self.target[i][..self.target_len[i]].to_vec(),
        }
    }

    pub fn pairs(&self) -> Vec<Pair> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }
}

/// Mixes a seed with a sequence of counters (splitmix64 finalizer per word).
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    words.iter().fold(mix(seed), |h, &w| mix(h ^ mix(w)))
}

/// Deterministic shuffled batching of pairs, truncated to `max_len`.
#[derive(Clone, Debug)]
pub struct Batcher {
    pub batch_size: usize,
    pub max_len: usize,
    pub pad: TokenId,
    pub seed: u64,
}

impl Batcher {
    pub fn new(batch_size: usize, max_len: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || max_len == 0 {
            return Err(Error::Config("batch size and max_len must be positive".into()));
        }
        Ok(Self {
            batch_size,
            max_len,
            pad: PAD,
            seed,
        })
    }

    /// Example order for one epoch.
    pub fn order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[epoch]));
        idx.shuffle(&mut rng);
        idx
    }

    pub fn truncate(&self, pair: &Pair) -> Pair {
        Pair {
            source: pair.source[..pair.source.len().min(self.max_len)].to_vec(),
            target: pair.target[..pair.target.len().min(self.max_len)].to_vec(),
        }
    }

    /// All batches of one epoch; the last may be short.
    pub fn epoch(&self, pairs: &[Pair], epoch: u64) -> Vec<Batch> {
        self.order(pairs.len(), epoch)
            .chunks(self.batch_size)
            .map(|chunk| {
                let rows: Vec<Pair> = chunk.iter().map(|&i| self.truncate(&pairs[i])).collect();
                Batch::from_pairs(&rows, self.pad)
            })
            .collect()
    }

    /// Indices of the examples in global batch number `index` (0-based) when
    /// epochs are laid end to end. Every batch is full: an epoch's tail wraps
    /// into the next epoch's order.
    pub fn indices(&self, n: usize, index: u64) -> Vec<usize> {
        if n == 0 {
            return Vec::new();
        }
        let start = index * self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for k in start..start + self.batch_size as u64 {
            let epoch = k / n as u64;
            let within = (k % n as u64) as usize;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.order(n, epoch)));
            }
            out.push(cached.as_ref().expect("filled above").1[within]);
        }
        out
    }
}

/// Source of training pairs, addressed by step so that a run can resume at any
/// step and see the same data.
pub trait DataSource {
    fn batch(&self, step: u64) -> Result<Vec<Pair>>;
}

/// Fixed supervised pairs served in shuffled epochs.
#[derive(Clone, Debug)]
pub struct PairData {
    pub pairs: Vec<Pair>,
    pub batcher: Batcher,
}

impl DataSource for PairData {
    fn batch(&self, step: u64) -> Result<Vec<Pair>> {
        if self.pairs.is_empty() {
            return Err(Error::Contract("no training pairs".into()));
        }
        let idx = self.batcher.indices(self.pairs.len(), step.saturating_sub(1));
        Ok(idx.iter().map(|&i| self.batcher.truncate(&self.pairs[i])).collect())
    }
}

/// Documents turned into fresh denoising examples at every step.
#[derive(Clone, Debug)]
pub struct DenoiseData {
    pub documents: Vec<Vec<TokenId>>,
    pub batcher: Batcher,
    pub window: usize,
    pub ratio: f64,
    pub vocab_size: usize,
}

impl DenoiseData {
    pub fn example(&self, step: u64, row: usize, doc: usize) -> Result<DenoisedExample> {
        let tokens = &self.documents[doc];
        let tokens = &tokens[..tokens.len().min(self.batcher.max_len)];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.batcher.seed, &[0xd0c, step, row as u64]));
        mask_spans(tokens, self.window, self.ratio, self.vocab_size, &mut rng)
    }
}

impl DataSource for DenoiseData {
    fn batch(&self, step: u64) -> Result<Vec<Pair>> {
        if self.documents.is_empty() {
            return Err(Error::Contract("no documents".into()));
        }
        let idx = self.batcher.indices(self.documents.len(), step.saturating_sub(1));
        idx.iter()
            .enumerate()
            .map(|(row, &doc)| Ok(self.example(step, row, doc)?.into()))
            .collect()
    }
}
