//! Multi-head attention, the main/predicting-stream masks, and bucketed
//! relative position bias.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boolean `[queries, keys]` matrix; `true` means the query may attend the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    /// Lower-triangular inclusive mask: query `q` sees keys `0..=q`.
    pub fn causal(t: usize) -> Self {
        let allowed = (0..t).flat_map(|q| (0..t).map(move |k| k <= q)).collect();
        Self {
            queries: t,
            keys: t,
            allowed,
        }
    }

    /// Mask for a predicting stream whose keys are `main ⊕ stream` (`2t` keys).
    /// Query `j` sees main keys `0..=j` and its own stream slot `t + j`.
    pub fn stream(t: usize) -> Self {
        let allowed = (0..t)
            .flat_map(|j| (0..2 * t).map(move |k| k <= j || k == t + j))
            .collect();
        Self {
            queries: t,
            keys: 2 * t,
            allowed,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.queries, self.keys]
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.keys..(query + 1) * self.keys]
    }

    /// Additive form: `0` where allowed, `-inf` where masked.
    pub fn additive(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.queries, self.keys], data).expect("mask shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketConfig {
    pub num_buckets: usize,
    pub max_distance: usize,
    pub bidirectional: bool,
}

impl BucketConfig {
    pub const fn encoder(num_buckets: usize, max_distance: usize) -> Self {
        Self {
            num_buckets,
            max_distance,
            bidirectional: true,
        }
    }

    pub const fn decoder(num_buckets: usize, max_distance: usize) -> Self {
        Self {
            num_buckets,
            max_distance,
            bidirectional: false,
        }
    }

    pub fn bucket(&self, relative_position: i64) -> usize {
        relative_bucket(
            relative_position,
            self.num_buckets,
            self.max_distance,
            self.bidirectional,
        )
    }
}

/// T5-style bucket for `relative_position = key_position - query_position`.
///
/// Half of the buckets (per direction) hold exact small distances; the rest
/// grow logarithmically up to `max_distance`, beyond which everything shares
/// the last bucket. In unidirectional mode keys after the query collapse onto
/// bucket 0.
pub fn relative_bucket(
    relative_position: i64,
    num_buckets: usize,
    max_distance: usize,
    bidirectional: bool,
) -> usize {
    let mut buckets = num_buckets as i64;
    let mut offset = 0i64;
    let mut distance = -relative_position;
    if bidirectional {
        buckets /= 2;
        if distance < 0 {
            offset = buckets;
        }
        distance = distance.abs();
    } else {
        distance = distance.max(0);
    }
    let max_exact = (buckets / 2).max(1);
    let bucket = if distance < max_exact {
        distance
    } else if max_distance as i64 <= max_exact {
        // No room for log buckets: everything past the exact range is "far".
        buckets - 1
    } else {
        let ratio = (distance as f64 / max_exact as f64).ln()
            / (max_distance as f64 / max_exact as f64).ln();
        let large = max_exact + (ratio * (buckets - max_exact) as f64) as i64;
        large.min(buckets - 1)
    };
    (offset + bucket) as usize
}

/// Bucket ids for a `[q_len, k_len]` grid given query and key positions.
pub fn bucket_grid(query_positions: &[i64], key_positions: &[i64], config: BucketConfig) -> Vec<usize> {
    query_positions
        .iter()
        .flat_map(|&q| key_positions.iter().map(move |&k| config.bucket(k - q)))
        .collect()
}

/// Self-attention buckets over positions `0..t`.
pub fn self_buckets(t: usize, config: BucketConfig) -> Vec<usize> {
    let pos: Vec<i64> = (0..t as i64).collect();
    bucket_grid(&pos, &pos, config)
}

/// Position bookkeeping for predicting stream `i` over `t` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamPositions {
    /// Absolute position id carried by the query at slot `j` (the position of
    /// the token it predicts, `j + i`).
    pub absolute: Vec<usize>,
    /// For slot `j`: offsets to the visible main positions `0..=j`, followed by
    /// the offset to the slot itself.
    pub relative: Vec<Vec<i64>>,
}

pub fn positions_for_stream(stream: usize, t: usize) -> StreamPositions {
    let absolute: Vec<usize> = (0..t).map(|j| j + stream).collect();
    let relative = absolute
        .iter()
        .enumerate()
        .map(|(j, &pos)| {
            (0..=j)
                .map(|k| k as i64 - pos as i64)
                .chain(std::iter::once(0))
                .collect()
        })
        .collect();
    StreamPositions { absolute, relative }
}

/// Buckets for stream `i` against the concatenated `main ⊕ stream` keys.
pub fn stream_buckets(stream: usize, t: usize, config: BucketConfig) -> Vec<usize> {
    let queries: Vec<i64> = (0..t).map(|j| (j + stream) as i64).collect();
    let keys: Vec<i64> = (0..t as i64).chain(queries.iter().copied()).collect();
    bucket_grid(&queries, &keys, config)
}

/// A learned `[num_buckets, heads]` bias table bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct RelativeBias<'t> {
    pub table: Var<'t>,
    pub config: BucketConfig,
}

impl<'t> RelativeBias<'t> {
    /// Gathers the per-head bias for a grid of bucket ids, shaped `[H,Q,K]`.
    pub fn gather(&self, buckets: &[usize], queries: usize, keys: usize) -> Result<Var<'t>> {
        let heads = self.table.shape()[1];
        self.table
            .embedding(buckets)?
            .reshape(&[queries, keys, heads])?
            .permute(&[2, 0, 1])
    }
}

/// Pre-computed bias grid for one attention call.
#[derive(Clone, Copy, Debug)]
pub struct BiasGrid<'a, 't> {
    pub bias: &'a RelativeBias<'t>,
    pub buckets: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct Linear<'t> {
    /// `[in, out]`
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> Linear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.add(self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t> {
    pub query: Linear<'t>,
    pub key: Linear<'t>,
    pub value: Linear<'t>,
    pub output: Linear<'t>,
}

fn split_heads<'t>(x: Var<'t>, heads: usize, perm: &[usize]) -> Result<Var<'t>> {
    let shape = x.shape();
    let (rows, d) = (shape[0], shape[1]);
    x.reshape(&[rows, heads, d / heads])?.permute(perm)
}

/// Scaled dot-product attention over already-projected `q: [Q,D]`,
/// `k, v: [K,D]`, returning the merged `[Q,D]` context before the output
/// projection. Masked pairs receive exactly zero weight; a query with every
/// key masked gets a zero context row.
pub fn attend<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Option<&AttentionMask>,
    bias: Option<BiasGrid<'_, 't>>,
    heads: usize,
) -> Result<Var<'t>> {
    let (qs, ks) = (q.shape(), k.shape());
    let d = qs[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("hidden size {d} not divisible by {heads} heads")));
    }
    if ks[1] != d || v.shape() != ks {
        return Err(Error::Shape {
            op: "attend",
            left: qs,
            right: ks,
        });
    }
    let (q_len, k_len) = (qs[0], ks[0]);
    if let Some(m) = mask {
        if m.shape() != [q_len, k_len] {
            return Err(Error::Shape {
                op: "attention mask",
                left: vec![q_len, k_len],
                right: m.shape().to_vec(),
            });
        }
    }
    let tape = q.tape();
    let qh = split_heads(q, heads, &[1, 0, 2])?; // [H,Q,dh]
    let kh = split_heads(k, heads, &[1, 2, 0])?; // [H,dh,K]
    let vh = split_heads(v, heads, &[1, 0, 2])?; // [H,K,dh]
    let mut scores = qh.matmul(kh)?.scale(1.0 / ((d / heads) as f64).sqrt());
    if let Some(grid) = bias {
        scores = scores.add(grid.bias.gather(grid.buckets, q_len, k_len)?)?;
    }
    if let Some(m) = mask {
        scores = scores.add(tape.constant(m.additive()))?;
    }
    let weights = scores.softmax(2)?;
    weights
        .matmul(vh)?
        .permute(&[1, 0, 2])?
        .reshape(&[q_len, d])
}

/// Projects `query` and `key_value`, attends, and applies the output projection.
pub fn multi_head<'t>(
    query: Var<'t>,
    key_value: Var<'t>,
    params: &AttentionParams<'t>,
    mask: Option<&AttentionMask>,
    bias: Option<BiasGrid<'_, 't>>,
    heads: usize,
) -> Result<Var<'t>> {
    let q = params.query.forward(query)?;
    let k = params.key.forward(key_value)?;
    let v = params.value.forward(key_value)?;
    let context = attend(q, k, v, mask, bias, heads)?;
    params.output.forward(context)
}

/// One layer of predicting-stream attention for stream `i`.
///
/// Slot `j` queries with its own state and attends to the main-stream states
/// `0..=j` followed by itself; the whole stream is evaluated in one batched
/// call using [`AttentionMask::stream`]. `main` and `stream` are the
/// (normalized) layer inputs of the main and predicting streams.
pub fn stream_attention<'t>(
    stream: Var<'t>,
    main: Var<'t>,
    params: &AttentionParams<'t>,
    stream_index: usize,
    num_streams: usize,
    bias: Option<&RelativeBias<'t>>,
    heads: usize,
) -> Result<Var<'t>> {
    if stream_index == 0 || stream_index >= num_streams {
        return Err(Error::Config(format!(
            "predicting stream {stream_index} outside 1..{num_streams}"
        )));
    }
    let (ss, ms) = (stream.shape(), main.shape());
    if ss != ms {
        return Err(Error::Shape {
            op: "stream_attention",
            left: ss,
            right: ms,
        });
    }
    let t = ss[0];
    let keys = concat(&[main, stream], 0)?;
    let mask = AttentionMask::stream(t);
    let buckets = bias.map(|b| stream_buckets(stream_index, t, b.config));
    let grid = bias.zip(buckets.as_deref()).map(|(bias, buckets)| BiasGrid { bias, buckets });
    multi_head(stream, keys, params, Some(&mask), grid, heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_mask_definition() {
        assert_eq!(AttentionMask::causal(1).row(0), &[true]);
        let m = AttentionMask::causal(3);
        assert_eq!(m.row(0), &[true, false, false]);
        assert_eq!(m.row(1), &[true, true, false]);
        assert_eq!(m.row(2), &[true, true, true]);
        for q in 0..3 {
            assert_eq!(m.row(q).iter().filter(|&&a| a).count(), q + 1);
        }
    }

    #[test]
    fn stream_mask_rows_have_prefix_plus_self() {
        let t = 4;
        let m = AttentionMask::stream(t);
        for j in 0..t {
            let allowed: Vec<usize> = (0..2 * t).filter(|&k| m.allows(j, k)).collect();
            let mut expected: Vec<usize> = (0..=j).collect();
            expected.push(t + j);
            assert_eq!(allowed, expected);
            assert_eq!(allowed.len(), j + 2);
        }
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(relative_bucket(0, 32, 128, false), 0);
        assert_ne!(relative_bucket(-1, 32, 128, false), relative_bucket(-2, 32, 128, false));
        let far = relative_bucket(-128, 32, 128, false);
        assert_eq!(far, 31);
        for rel in [-129, -500, -10_000] {
            assert_eq!(relative_bucket(rel, 32, 128, false), far);
        }
        // future keys collapse onto bucket 0 when unidirectional
        assert_eq!(relative_bucket(5, 32, 128, false), 0);
        // bidirectional keeps the two directions apart
        assert_ne!(relative_bucket(3, 32, 128, true), relative_bucket(-3, 32, 128, true));
        assert_eq!(relative_bucket(0, 32, 128, true), 0);
    }

    #[test]
    fn stream_positions_follow_predicted_token() {
        let p1 = positions_for_stream(1, 3);
        assert_eq!(p1.absolute, vec![1, 2, 3]);
        assert_eq!(p1.relative[0], vec![-1, 0]);
        assert_eq!(p1.relative[1], vec![-2, -1, 0]);
        let p2 = positions_for_stream(2, 3);
        assert_eq!(p2.absolute[0], 2);
    }

    #[test]
    fn stream_buckets_match_positions() {
        let config = BucketConfig::decoder(32, 128);
        let t = 3;
        let buckets = stream_buckets(2, t, config);
        let pos = positions_for_stream(2, t);
        for j in 0..t {
            for (k, &rel) in pos.relative[j][..=j].iter().enumerate() {
                assert_eq!(buckets[j * 2 * t + k], config.bucket(rel));
            }
            assert_eq!(buckets[j * 2 * t + t + j], config.bucket(0));
        }
    }

    fn identity_params<'t>(tape: &'t Tape, d: usize) -> AttentionParams<'t> {
        let lin = || Linear {
            weight: tape.constant(Tensor::identity(d)),
            bias: tape.constant(Tensor::zeros(&[d])),
        };
        AttentionParams {
            query: lin(),
            key: lin(),
            value: lin(),
            output: lin(),
        }
    }

    #[test]
    fn single_key_passes_value_through() {
        let tape = Tape::new();
        let params = identity_params(&tape, 4);
        let q = tape.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]).reshaped(vec![1, 4]).unwrap());
        let kv = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).reshaped(vec![1, 4]).unwrap());
        let out = multi_head(q, kv, &params, None, None, 2).unwrap().value();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identical_keys_split_weight() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap());
        let k = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 4.0, 8.0]).unwrap());
        let out = attend(q, k, v, None, None, 1).unwrap().value();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn masked_value_rows_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut v2 = v.clone();
        v2.data_mut()[8..].iter_mut().for_each(|x| *x += 100.0); // row 2
        let mask = AttentionMask::causal(3);
        let run = |v: Tensor| {
            let tape = Tape::new();
            let out = attend(
                tape.constant(q.clone()),
                tape.constant(k.clone()),
                tape.constant(v),
                Some(&mask),
                None,
                2,
            )
            .unwrap()
            .value();
            out.data()[..8].to_vec()
        };
        assert_eq!(run(v), run(v2));
    }

    #[test]
    fn fully_masked_row_gives_zero_context() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::full(&[1, 2], 1.0));
        let k = tape.constant(Tensor::full(&[2, 2], 1.0));
        let mask = AttentionMask {
            queries: 1,
            keys: 2,
            allowed: vec![false, false],
        };
        let out = attend(q, k, k, Some(&mask), None, 1).unwrap().value();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(attend(x, x, x, None, None, 4), Err(Error::Config(_))));
    }

    #[test]
    fn stream_index_validated() {
        let tape = Tape::new();
        let params = identity_params(&tape, 2);
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(stream_attention(x, x, &params, 0, 2, None, 1).is_err());
        assert!(stream_attention(x, x, &params, 2, 2, None, 1).is_err());
        assert!(stream_attention(x, x, &params, 1, 2, None, 1).is_ok());
    }
}
