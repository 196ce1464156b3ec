//! Encoder-decoder with n-stream self-attention and the future n-gram objective.
//!
//! The decoder runs a main stream (ordinary causal self-attention, predicting
//! the next token) plus `n - 1` predicting streams. Stream `i` at slot `j`
//! attends to main states `0..=j` and itself and predicts the token `i` steps
//! beyond the main stream's target. All streams share the decoder weights, so
//! dropping the predicting streams leaves a plain Transformer decoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, multi_head, self_buckets, stream_attention, AttentionMask, AttentionParams, BiasGrid,
    BucketConfig, Linear, RelativeBias,
};
use crate::autodiff::{Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const PAD: TokenId = 1;
pub const MASK: TokenId = 2;
pub const UNK: TokenId = 3;
/// Generation terminates on the begin-of-sequence symbol, which doubles as end-of-sequence.
pub const EOS: TokenId = BOS;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 4;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// How each stream's negative log-likelihood is aggregated over positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNormalization {
    /// Mean over the stream's valid positions.
    #[default]
    Mean,
    /// Plain sum, as the objective is usually written.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    /// Future gram length `n`: one main stream plus `n - 1` predicting streams.
    pub ngram: usize,
    /// Attenuation coefficient for the per-stream loss weights.
    pub gamma: f64,
    pub max_len: usize,
    pub dropout: f64,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub loss_normalization: LossNormalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            layers_enc: 3,
            layers_dec: 3,
            hidden: 128,
            ffn: 512,
            heads: 4,
            ngram: 2,
            gamma: 1.0,
            max_len: 128,
            dropout: 0.1,
            num_buckets: 32,
            max_distance: 128,
            loss_normalization: LossNormalization::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size <= RESERVED {
            return fail(format!(
                "vocab_size {} must exceed the {RESERVED} reserved ids",
                self.vocab_size
            ));
        }
        if self.ngram < 1 {
            return fail("ngram must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ffn == 0 || self.max_len == 0 {
            return fail("ffn and max_len must be positive".into());
        }
        if self.layers_enc == 0 || self.layers_dec == 0 {
            return fail("encoder and decoder need at least one layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_buckets < 2 || self.max_distance < 1 {
            return fail("relative bias needs num_buckets >= 2 and max_distance >= 1".into());
        }
        if self.max_distance <= self.num_buckets / 2 {
            return fail(format!(
                "max_distance {} must exceed num_buckets / 2 = {}",
                self.max_distance,
                self.num_buckets / 2
            ));
        }
        Ok(())
    }

    pub fn encoder_buckets(&self) -> BucketConfig {
        BucketConfig::encoder(self.num_buckets, self.max_distance)
    }

    pub fn decoder_buckets(&self) -> BucketConfig {
        BucketConfig::decoder(self.num_buckets, self.max_distance)
    }

    pub fn alpha(&self) -> AlphaWeights {
        alpha_weights(self.gamma, self.ngram)
    }
}

/// Per-stream loss weights `α_j = γ^j / Σ_i γ^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaWeights(Vec<f64>);

impl AlphaWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn alpha_weights(gamma: f64, n: usize) -> AlphaWeights {
    let powers: Vec<f64> = (0..n).map(|j| gamma.powi(j as i32)).collect();
    let total: f64 = powers.iter().sum();
    AlphaWeights(powers.into_iter().map(|p| p / total).collect())
}

/// Named learnable tensors, iterated in a stable (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let mut tensors = BTreeMap::new();
        let normal = |tensors: &mut BTreeMap<String, Tensor>, name: String, shape: &[usize], rng: &mut ChaCha8Rng| {
            tensors.insert(name, Tensor::randn(shape, INIT_STD, rng).with_requires_grad(true));
        };
        normal(&mut tensors, "embed.tokens".into(), &[config.vocab_size, d], &mut rng);
        normal(&mut tensors, "embed.positions".into(), &[config.max_len, d], &mut rng);
        if config.ngram > 1 {
            normal(&mut tensors, "embed.streams".into(), &[config.ngram - 1, d], &mut rng);
        }
        normal(&mut tensors, "encoder.rel_bias".into(), &[config.num_buckets, config.heads], &mut rng);
        normal(&mut tensors, "decoder.rel_bias".into(), &[config.num_buckets, config.heads], &mut rng);
        let attn = |prefix: &str| {
            ["query", "key", "value", "output"].map(|p| format!("{prefix}.{p}"))
        };
        let mut linears: Vec<(String, usize, usize)> = Vec::new();
        let mut norms: Vec<String> = vec!["encoder.final_ln".into(), "decoder.final_ln".into()];
        for l in 0..config.layers_enc {
            let p = format!("encoder.layers.{l}");
            linears.extend(attn(&format!("{p}.self_attn")).map(|n| (n, d, d)));
            linears.push((format!("{p}.ffn.inner"), d, config.ffn));
            linears.push((format!("{p}.ffn.outer"), config.ffn, d));
            norms.extend([format!("{p}.ln_attn"), format!("{p}.ln_ffn")]);
        }
        for l in 0..config.layers_dec {
            let p = format!("decoder.layers.{l}");
            linears.extend(attn(&format!("{p}.self_attn")).map(|n| (n, d, d)));
            linears.extend(attn(&format!("{p}.cross_attn")).map(|n| (n, d, d)));
            linears.push((format!("{p}.ffn.inner"), d, config.ffn));
            linears.push((format!("{p}.ffn.outer"), config.ffn, d));
            norms.extend([
                format!("{p}.ln_self"),
                format!("{p}.ln_cross"),
                format!("{p}.ln_ffn"),
            ]);
        }
        for (name, fan_in, fan_out) in linears {
            normal(&mut tensors, format!("{name}.weight"), &[fan_in, fan_out], &mut rng);
            tensors.insert(
                format!("{name}.bias"),
                Tensor::zeros(&[fan_out]).with_requires_grad(true),
            );
        }
        for name in norms {
            tensors.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0).with_requires_grad(true));
            tensors.insert(format!("{name}.bias"), Tensor::zeros(&[d]).with_requires_grad(true));
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that every tensor the config implies exists with the right shape.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::init(config, 0)?;
        for (name, t) in expected.iter() {
            let have = self.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        if self.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm<'t> {
    gain: Var<'t>,
    bias: Var<'t>,
}

impl<'t> Norm<'t> {
    fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(self.gain, self.bias, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward<'t> {
    inner: Linear<'t>,
    outer: Linear<'t>,
}

impl<'t> FeedForward<'t> {
    fn forward(&self, x: Var<'t>, dropout: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var<'t>> {
        let h = self.inner.forward(x)?.gelu().dropout(dropout, rng)?;
        self.outer.forward(h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer<'t> {
    self_attn: AttentionParams<'t>,
    ln_attn: Norm<'t>,
    ffn: FeedForward<'t>,
    ln_ffn: Norm<'t>,
}

#[derive(Clone, Debug)]
struct DecoderLayer<'t> {
    self_attn: AttentionParams<'t>,
    ln_self: Norm<'t>,
    cross_attn: AttentionParams<'t>,
    ln_cross: Norm<'t>,
    ffn: FeedForward<'t>,
    ln_ffn: Norm<'t>,
}

/// Model parameters bound as leaves on one tape.
pub struct BoundParams<'t> {
    tokens: Var<'t>,
    tokens_t: Var<'t>,
    positions: Var<'t>,
    streams: Option<Var<'t>>,
    encoder_bias: RelativeBias<'t>,
    decoder_bias: RelativeBias<'t>,
    encoder: Vec<EncoderLayer<'t>>,
    decoder: Vec<DecoderLayer<'t>>,
    encoder_final: Norm<'t>,
    decoder_final: Norm<'t>,
    named: Vec<(String, Var<'t>)>,
}

impl<'t> BoundParams<'t> {
    /// `(name, var)` for every bound parameter, in parameter order.
    pub fn named(&self) -> &[(String, Var<'t>)] {
        &self.named
    }
}

/// Per-layer values of every decoder stream from one teacher-forced pass.
#[derive(Clone, Debug, Default)]
pub struct StreamStates {
    /// `main[k]` is the main-stream input to decoder layer `k`; the last entry
    /// is the final (pre-norm) output.
    pub main: Vec<Tensor>,
    /// `streams[i - 1][k]` is the same for predicting stream `i`.
    pub streams: Vec<Vec<Tensor>>,
}

pub struct DecoderOutput<'t> {
    /// `logits[0]` is the main stream; `logits[i]` is predicting stream `i`.
    /// Each is `[T, V]`.
    pub logits: Vec<Var<'t>>,
    pub states: StreamStates,
}

/// Per-stream training targets: stream `i` at slot `j` predicts `targets[j + i]`;
/// slots past the end are ignored.
pub fn stream_targets(targets: &[TokenId], n: usize) -> Vec<Vec<Option<TokenId>>> {
    (0..n)
        .map(|i| (0..targets.len()).map(|j| targets.get(j + i).copied()).collect())
        .collect()
}

/// Teacher-forcing decoder input: `bos` followed by all but the last target.
pub fn decoder_input(targets: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS)
        .chain(targets.iter().copied().take(targets.len().saturating_sub(1)))
        .collect()
}

pub struct NgramLoss<'t> {
    pub total: Var<'t>,
    /// The aggregated NLL of each stream (`None` for a stream with no valid
    /// positions).
    pub per_stream: Vec<Option<f64>>,
    /// Number of scored positions per stream.
    pub counts: Vec<usize>,
}

/// `Σ_j α_j · NLL_j` over the stream logits.
///
/// With [`LossNormalization::Mean`] each `NLL_j` is averaged over its `T - j`
/// valid positions; streams without valid positions contribute zero and the
/// remaining weights are not renormalized.
pub fn future_ngram_loss<'t>(
    logits: &[Var<'t>],
    targets: &[TokenId],
    alpha: &AlphaWeights,
    normalization: LossNormalization,
) -> Result<NgramLoss<'t>> {
    let coefficients: Vec<f64> = alpha.as_slice().to_vec();
    let reduction = match normalization {
        LossNormalization::Mean => Reduction::Mean,
        LossNormalization::Sum => Reduction::Sum,
    };
    weighted_stream_loss(logits, targets, &coefficients, reduction)
}

/// `Σ_j coefficient_j · CE_j` with an explicit per-stream coefficient and reduction.
pub(crate) fn weighted_stream_loss<'t>(
    logits: &[Var<'t>],
    targets: &[TokenId],
    coefficients: &[f64],
    reduction: Reduction,
) -> Result<NgramLoss<'t>> {
    if logits.len() != coefficients.len() {
        return Err(Error::Contract(format!(
            "{} stream logits but {} loss weights",
            logits.len(),
            coefficients.len()
        )));
    }
    let first = logits
        .first()
        .ok_or_else(|| Error::Contract("no stream logits".into()))?;
    let tape = first.tape();
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut per_stream = Vec::with_capacity(logits.len());
    let mut counts = Vec::with_capacity(logits.len());
    for (j, (stream_targets, (&l, &c))) in stream_targets(targets, logits.len())
        .iter()
        .zip(logits.iter().zip(coefficients))
        .enumerate()
    {
        let count = stream_targets.iter().flatten().count();
        counts.push(count);
        if count == 0 {
            per_stream.push(None);
            continue;
        }
        let nll = l.cross_entropy(stream_targets, reduction).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("stream {j}: {msg}")),
            other => other,
        })?;
        per_stream.push(Some(nll.value().item()?));
        total = total.add(nll.scale(c))?;
    }
    Ok(NgramLoss {
        total,
        per_stream,
        counts,
    })
}

/// Cached encoder output plus the cross-attention keys/values of every decoder layer.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    pub states: Tensor,
    cross: Vec<(Tensor, Tensor)>,
}

/// Incremental self-attention state for main-stream decoding.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    len: usize,
    hidden: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DecoderCache {
    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    /// Changes the number of predicted future tokens. Existing stream
    /// embeddings are kept; new ones are drawn like a fresh init from `seed`.
    pub fn with_ngram(mut self, ngram: usize, seed: u64) -> Result<Self> {
        let old = self.config.ngram;
        self.config.ngram = ngram;
        self.config.validate()?;
        if ngram == old {
            return Ok(self);
        }
        let d = self.config.hidden;
        let mut map: BTreeMap<String, Tensor> = self.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        let kept: Vec<f64> = map
            .remove("embed.streams")
            .map(|t| t.into_data())
            .unwrap_or_default();
        if ngram > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut data = Tensor::randn(&[ngram - 1, d], INIT_STD, &mut rng).into_data();
            let n = kept.len().min(data.len());
            data[..n].copy_from_slice(&kept[..n]);
            map.insert(
                "embed.streams".into(),
                Tensor::new(vec![ngram - 1, d], data)?.with_requires_grad(true),
            );
        }
        Self::from_parts(self.config, ModelParams::from_map(map))
    }

    /// Binds every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundParams<'t>> {
        let leaves: Vec<Var<'t>> = self.params.iter().map(|(_, t)| tape.leaf(t)).collect();
        self.bind_with(&leaves)
    }

    /// Uses caller-provided vars (one per parameter, in parameter order)
    /// in place of the stored values.
    pub fn bind_with<'t>(&self, leaves: &[Var<'t>]) -> Result<BoundParams<'t>> {
        if leaves.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} vars supplied for {} parameters",
                leaves.len(),
                self.params.len()
            )));
        }
        let mut named = Vec::with_capacity(self.params.len());
        let mut vars = BTreeMap::new();
        for ((name, t), &v) in self.params.iter().zip(leaves) {
            if v.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "bind",
                    left: t.shape().to_vec(),
                    right: v.shape(),
                });
            }
            named.push((name.clone(), v));
            vars.insert(name.as_str(), v);
        }
        let get = |name: &str| {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
        };
        let linear = |p: &str| -> Result<Linear<'t>> {
            Ok(Linear {
                weight: get(&format!("{p}.weight"))?,
                bias: get(&format!("{p}.bias"))?,
            })
        };
        let attn = |p: &str| -> Result<AttentionParams<'t>> {
            Ok(AttentionParams {
                query: linear(&format!("{p}.query"))?,
                key: linear(&format!("{p}.key"))?,
                value: linear(&format!("{p}.value"))?,
                output: linear(&format!("{p}.output"))?,
            })
        };
        let norm = |p: &str| -> Result<Norm<'t>> {
            Ok(Norm {
                gain: get(&format!("{p}.gain"))?,
                bias: get(&format!("{p}.bias"))?,
            })
        };
        let ffn = |p: &str| -> Result<FeedForward<'t>> {
            Ok(FeedForward {
                inner: linear(&format!("{p}.inner"))?,
                outer: linear(&format!("{p}.outer"))?,
            })
        };
        let encoder = (0..self.config.layers_enc)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                Ok(EncoderLayer {
                    self_attn: attn(&format!("{p}.self_attn"))?,
                    ln_attn: norm(&format!("{p}.ln_attn"))?,
                    ffn: ffn(&format!("{p}.ffn"))?,
                    ln_ffn: norm(&format!("{p}.ln_ffn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..self.config.layers_dec)
            .map(|l| {
                let p = format!("decoder.layers.{l}");
                Ok(DecoderLayer {
                    self_attn: attn(&format!("{p}.self_attn"))?,
                    ln_self: norm(&format!("{p}.ln_self"))?,
                    cross_attn: attn(&format!("{p}.cross_attn"))?,
                    ln_cross: norm(&format!("{p}.ln_cross"))?,
                    ffn: ffn(&format!("{p}.ffn"))?,
                    ln_ffn: norm(&format!("{p}.ln_ffn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = get("embed.tokens")?;
        Ok(BoundParams {
            tokens,
            tokens_t: tokens.transpose()?,
            positions: get("embed.positions")?,
            streams: if self.config.ngram > 1 {
                Some(get("embed.streams")?)
            } else {
                None
            },
            encoder_bias: RelativeBias {
                table: get("encoder.rel_bias")?,
                config: self.config.encoder_buckets(),
            },
            decoder_bias: RelativeBias {
                table: get("decoder.rel_bias")?,
                config: self.config.decoder_buckets(),
            },
            encoder,
            decoder,
            encoder_final: norm("encoder.final_ln")?,
            decoder_final: norm("decoder.final_ln")?,
            named,
        })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Encoder stack over `source`, returning `[M, D]` states.
    pub fn encode<'t>(
        &self,
        bound: &BoundParams<'t>,
        source: &[TokenId],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let m = source.len();
        if m == 0 {
            return Err(Error::Contract("empty source sequence".into()));
        }
        if m > self.config.max_len {
            return Err(Error::Config(format!(
                "source length {m} exceeds max_len {}; truncate first",
                self.config.max_len
            )));
        }
        self.check_tokens(source)?;
        let p = self.config.dropout;
        let positions: Vec<usize> = (0..m).collect();
        let mut x = bound
            .tokens
            .embedding(source)?
            .add(bound.positions.embedding(&positions)?)?
            .dropout(p, rng.as_deref_mut())?;
        let buckets = self_buckets(m, bound.encoder_bias.config);
        for layer in &bound.encoder {
            let a = layer.ln_attn.forward(x)?;
            let grid = BiasGrid {
                bias: &bound.encoder_bias,
                buckets: &buckets,
            };
            let attn = multi_head(a, a, &layer.self_attn, None, Some(grid), self.config.heads)?;
            x = x.add(attn.dropout(p, rng.as_deref_mut())?)?;
            let f = layer.ffn.forward(layer.ln_ffn.forward(x)?, p, rng.as_deref_mut())?;
            x = x.add(f.dropout(p, rng.as_deref_mut())?)?;
        }
        bound.encoder_final.forward(x)
    }

    /// Teacher-forced decoder pass over `input` (`bos` + shifted targets).
    ///
    /// Returns one `[T, V]` logit tensor per stream. Main-stream slot `j`
    /// predicts `targets[j]`; predicting stream `i` at slot `j` predicts
    /// `targets[j + i]`. With `streams = false` only the main stream runs.
    pub fn decode_train<'t>(
        &self,
        bound: &BoundParams<'t>,
        input: &[TokenId],
        encoded: Var<'t>,
        streams: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecoderOutput<'t>> {
        let t = input.len();
        if t == 0 {
            return Err(Error::Contract("empty decoder input".into()));
        }
        if t > self.config.max_len {
            return Err(Error::Config(format!(
                "target length {t} exceeds max_len {}",
                self.config.max_len
            )));
        }
        self.check_tokens(input)?;
        let cfg = &self.config;
        let p = cfg.dropout;
        let num_streams = if streams { cfg.ngram } else { 1 };

        let main_pos: Vec<usize> = (0..t).collect();
        let mut main = bound
            .tokens
            .embedding(input)?
            .add(bound.positions.embedding(&main_pos)?)?
            .dropout(p, rng.as_deref_mut())?;
        let mut predicting = Vec::with_capacity(num_streams - 1);
        for i in 1..num_streams {
            let table = bound
                .streams
                .ok_or_else(|| Error::Contract("stream embeddings missing".into()))?;
            // Slots whose predicted position falls off the table are never scored.
            let pos: Vec<usize> = (0..t).map(|j| (j + i).min(cfg.max_len - 1)).collect();
            let init = table.embedding(&[i - 1])?.reshape(&[cfg.hidden])?;
            let s = bound
                .positions
                .embedding(&pos)?
                .add(init)?
                .dropout(p, rng.as_deref_mut())?;
            predicting.push(s);
        }

        let mut states = StreamStates {
            main: Vec::with_capacity(cfg.layers_dec + 1),
            streams: vec![Vec::with_capacity(cfg.layers_dec + 1); num_streams - 1],
        };
        let causal = AttentionMask::causal(t);
        let buckets = self_buckets(t, bound.decoder_bias.config);
        for layer in &bound.decoder {
            states.main.push(main.value());
            for (s, log) in predicting.iter().zip(states.streams.iter_mut()) {
                log.push(s.value());
            }
            let a = layer.ln_self.forward(main)?;
            let grid = BiasGrid {
                bias: &bound.decoder_bias,
                buckets: &buckets,
            };
            let attn = multi_head(a, a, &layer.self_attn, Some(&causal), Some(grid), cfg.heads)?;
            for (idx, s) in predicting.iter_mut().enumerate() {
                let b = layer.ln_self.forward(*s)?;
                let out = stream_attention(
                    b,
                    a,
                    &layer.self_attn,
                    idx + 1,
                    num_streams,
                    Some(&bound.decoder_bias),
                    cfg.heads,
                )?;
                *s = s.add(out.dropout(p, rng.as_deref_mut())?)?;
            }
            main = main.add(attn.dropout(p, rng.as_deref_mut())?)?;

            for x in std::iter::once(&mut main).chain(predicting.iter_mut()) {
                let c = layer.ln_cross.forward(*x)?;
                let cross = multi_head(c, encoded, &layer.cross_attn, None, None, cfg.heads)?;
                *x = x.add(cross.dropout(p, rng.as_deref_mut())?)?;
                let f = layer.ffn.forward(layer.ln_ffn.forward(*x)?, p, rng.as_deref_mut())?;
                *x = x.add(f.dropout(p, rng.as_deref_mut())?)?;
            }
        }
        states.main.push(main.value());
        for (s, log) in predicting.iter().zip(states.streams.iter_mut()) {
            log.push(s.value());
        }

        let logits = std::iter::once(main)
            .chain(predicting)
            .map(|x| bound.decoder_final.forward(x)?.matmul(bound.tokens_t))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderOutput { logits, states })
    }

    /// Runs the encoder without recording gradients and caches the
    /// cross-attention keys and values for every decoder layer.
    pub fn encode_memory(&self, source: &[TokenId]) -> Result<EncoderMemory> {
        let tape = Tape::inference();
        let bound = self.bind(&tape)?;
        let encoded = self.encode(&bound, source, None)?;
        let cross = bound
            .decoder
            .iter()
            .map(|layer| {
                let k = layer.cross_attn.key.forward(encoded)?.value();
                let v = layer.cross_attn.value.forward(encoded)?.value();
                Ok((k, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderMemory {
            states: encoded.value(),
            cross,
        })
    }

    pub fn new_cache(&self) -> DecoderCache {
        DecoderCache {
            len: 0,
            hidden: self.config.hidden,
            keys: vec![Vec::new(); self.config.layers_dec],
            values: vec![Vec::new(); self.config.layers_dec],
        }
    }

    /// Main-stream logits for the token following `prefix` (generated tokens,
    /// without the leading `bos`). `cache` must hold exactly `prefix.len()`
    /// positions and is advanced by one.
    pub fn decode_infer_step(
        &self,
        prefix: &[TokenId],
        memory: &EncoderMemory,
        cache: &mut DecoderCache,
    ) -> Result<Vec<f64>> {
        let pos = prefix.len();
        if cache.len != pos {
            return Err(Error::Contract(format!(
                "decoder cache holds {} positions but prefix has {pos}",
                cache.len
            )));
        }
        if cache.keys.len() != self.config.layers_dec || cache.hidden != self.config.hidden {
            return Err(Error::Contract("decoder cache built for a different model".into()));
        }
        if pos >= self.config.max_len {
            return Err(Error::Config(format!(
                "prefix length {pos} reaches max_len {}",
                self.config.max_len
            )));
        }
        let token = prefix.last().copied().unwrap_or(BOS);
        self.check_tokens(&[token])?;
        let tape = Tape::inference();
        let bound = self.bind(&tape)?;
        let d = self.config.hidden;
        let mut x = bound
            .tokens
            .embedding(&[token])?
            .add(bound.positions.embedding(&[pos])?)?;
        let key_positions: Vec<i64> = (0..=pos as i64).collect();
        let buckets = crate::attention::bucket_grid(&[pos as i64], &key_positions, bound.decoder_bias.config);
        for (l, layer) in bound.decoder.iter().enumerate() {
            let a = layer.ln_self.forward(x)?;
            let q = layer.self_attn.query.forward(a)?;
            let k_new = layer.self_attn.key.forward(a)?.value();
            let v_new = layer.self_attn.value.forward(a)?.value();
            cache.keys[l].extend_from_slice(k_new.data());
            cache.values[l].extend_from_slice(v_new.data());
            let keys = tape.constant(Tensor::new(vec![pos + 1, d], cache.keys[l].clone())?);
            let values = tape.constant(Tensor::new(vec![pos + 1, d], cache.values[l].clone())?);
            let grid = BiasGrid {
                bias: &bound.decoder_bias,
                buckets: &buckets,
            };
            let ctx = attend(q, keys, values, None, Some(grid), self.config.heads)?;
            x = x.add(layer.self_attn.output.forward(ctx)?)?;

            let c = layer.ln_cross.forward(x)?;
            let q = layer.cross_attn.query.forward(c)?;
            let (ck, cv) = &memory.cross[l];
            let ctx = attend(
                q,
                tape.constant(ck.clone()),
                tape.constant(cv.clone()),
                None,
                None,
                self.config.heads,
            )?;
            x = x.add(layer.cross_attn.output.forward(ctx)?)?;
            x = x.add(layer.ffn.forward(layer.ln_ffn.forward(x)?, 0.0, None)?)?;
        }
        cache.len += 1;
        let logits = bound.decoder_final.forward(x)?.matmul(bound.tokens_t)?;
        Ok(logits.value().into_data())
    }

    /// Teacher-forced loss of a single `(source, targets)` pair with its own
    /// per-stream normalization. Returns the loss var on `tape`.
    pub fn example_loss<'t>(
        &self,
        bound: &BoundParams<'t>,
        source: &[TokenId],
        targets: &[TokenId],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NgramLoss<'t>> {
        let encoded = self.encode(bound, source, rng.as_deref_mut())?;
        let out = self.decode_train(bound, &decoder_input(targets), encoded, true, rng)?;
        future_ngram_loss(&out.logits, targets, &self.config.alpha(), self.config.loss_normalization)
    }

    /// Evaluation-mode teacher-forced logits for every stream, as plain tensors.
    pub fn teacher_forced_logits(&self, source: &[TokenId], targets: &[TokenId], streams: bool) -> Result<Vec<Tensor>> {
        let tape = Tape::inference();
        let bound = self.bind(&tape)?;
        let encoded = self.encode(&bound, source, None)?;
        let out = self.decode_train(&bound, &decoder_input(targets), encoded, streams, None)?;
        Ok(out.logits.iter().map(Var::value).collect())
    }
}

/// Log-softmax of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - log_z).collect()
}
