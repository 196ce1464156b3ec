//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers or text and returns JSON, so the page
//! needs no glue beyond the generated module. The `*_json` functions hold
//! the logic and are what the native tests call.

use prophetnet::attention::{positions_for_stream, self_buckets, stream_buckets, AttentionMask, BucketConfig};
use prophetnet::denoise::{mask_spans, Corruption, Vocab};
use prophetnet::model::MASK;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest grid the page will draw.
pub const MAX_SLOTS: usize = 32;
pub const MAX_STREAMS: usize = 8;

#[derive(Debug, Serialize)]
pub struct Weights {
    pub gamma: f64,
    pub weights: Vec<f64>,
}

pub fn alpha_json(gamma: f64, n: usize) -> Result<String, String> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(format!("gamma must be positive, got {gamma}"));
    }
    if n == 0 || n > MAX_STREAMS {
        return Err(format!("n must lie in 1..={MAX_STREAMS}"));
    }
    let w = prophetnet::alpha_weights(gamma, n);
    Ok(serde_json::to_string(&Weights {
        gamma,
        weights: w.as_slice().to_vec(),
    })
    .expect("plain data"))
}

/// One query row of the attention grid.
#[derive(Debug, Serialize)]
pub struct GridRow {
    /// Absolute position the query carries.
    pub position: usize,
    pub allowed: Vec<bool>,
    pub buckets: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct Grid {
    pub stream: usize,
    /// Key labels: `m0..` for main states, `s0..` for the stream's own slots.
    pub keys: Vec<String>,
    pub rows: Vec<GridRow>,
}

/// Mask and relative-position buckets for stream `stream` (0 is the main
/// stream) over `t` decoder slots.
pub fn grid_json(t: usize, stream: usize, num_buckets: usize, max_distance: usize) -> Result<String, String> {
    if t == 0 || t > MAX_SLOTS {
        return Err(format!("slots must lie in 1..={MAX_SLOTS}"));
    }
    if stream >= MAX_STREAMS {
        return Err(format!("stream must be below {MAX_STREAMS}"));
    }
    if num_buckets < 2 || max_distance <= num_buckets / 2 {
        return Err("need at least 2 buckets and a max distance above half the bucket count".into());
    }
    let cfg = BucketConfig::decoder(num_buckets, max_distance);
    let mut keys: Vec<String> = (0..t).map(|k| format!("m{k}")).collect();
    let (mask, buckets, positions) = if stream == 0 {
        (AttentionMask::causal(t), self_buckets(t, cfg), (0..t).collect::<Vec<_>>())
    } else {
        keys.extend((0..t).map(|k| format!("s{k}")));
        let pos = positions_for_stream(stream, t);
        (AttentionMask::stream(t), stream_buckets(stream, t, cfg), pos.absolute)
    };
    let width = keys.len();
    let rows = (0..t)
        .map(|q| GridRow {
            position: positions[q],
            allowed: mask.row(q).to_vec(),
            buckets: buckets[q * width..(q + 1) * width].to_vec(),
        })
        .collect();
    Ok(serde_json::to_string(&Grid { stream, keys, rows }).expect("plain data"))
}

#[derive(Debug, Serialize)]
pub struct MaskedToken {
    pub original: String,
    pub shown: String,
    /// `mask`, `random` or `keep` inside a span; absent outside.
    pub rule: Option<&'static str>,
}

#[derive(Debug, Serialize)]
pub struct Masked {
    pub tokens: Vec<MaskedToken>,
    pub target: Vec<String>,
    pub span_starts: Vec<usize>,
    pub span_lengths: Vec<usize>,
}

/// Span-masks whitespace tokens of `text`. Random replacements are drawn
/// from the words of the text itself.
pub fn mask_json(text: &str, window: usize, ratio: f64, seed: u64) -> Result<String, String> {
    let vocab = Vocab::build([text], 10_000).map_err(|e| e.to_string())?;
    let ids = vocab.encode(text);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = mask_spans(&ids, window, ratio, vocab.len(), &mut rng).map_err(|e| e.to_string())?;
    let word = |id| vocab.token(id).unwrap_or("?").to_string();
    let mut rules = vec![None; ids.len()];
    let mut k = 0;
    for (&start, &len) in ex.target_span_starts.iter().zip(&ex.span_lengths) {
        for pos in start..start + len {
            rules[pos] = Some(match ex.corruption[k] {
                Corruption::Mask => "mask",
                Corruption::Random => "random",
                Corruption::Keep => "keep",
            });
            k += 1;
        }
    }
    let tokens = ids
        .iter()
        .zip(&ex.encoder_input)
        .zip(rules)
        .map(|((&orig, &shown), rule)| MaskedToken {
            original: word(orig),
            shown: if shown == MASK { "[MASK]".into() } else { word(shown) },
            rule,
        })
        .collect();
    let out = Masked {
        tokens,
        target: ex.target.iter().map(|&t| word(t)).collect(),
        span_starts: ex.target_span_starts.clone(),
        span_lengths: ex.span_lengths.clone(),
    };
    Ok(serde_json::to_string(&out).expect("plain data"))
}

#[wasm_bindgen]
pub fn alpha_weights(gamma: f64, n: usize) -> Result<String, JsError> {
    alpha_json(gamma, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn stream_grid(slots: usize, stream: usize, num_buckets: usize, max_distance: usize) -> Result<String, JsError> {
    grid_json(slots, stream, num_buckets, max_distance).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn mask_text(text: &str, window: usize, ratio: f64, seed: u32) -> Result<String, JsError> {
    mask_json(text, window, ratio, seed as u64).map_err(|e| JsError::new(&e))
}
