//! Plain-loop reference forward pass used as an oracle.
//!
//! Every attention query builds its own key list explicitly (main prefix plus,
//! for a predicting stream, its own state), with no masks, batching or tape.

#![allow(dead_code)]

use prophetnet::model::decoder_input;
use prophetnet::{Model, ModelConfig, TokenId};

type Rows = Vec<Vec<f64>>;

pub struct Reference<'a> {
    model: &'a Model,
}

fn t5_bucket(rel: i64, num_buckets: usize, max_distance: usize, bidirectional: bool) -> usize {
    let (mut nb, mut base) = (num_buckets as i64, 0);
    let mut n = -rel;
    if bidirectional {
        nb /= 2;
        if n < 0 {
            base = nb;
            n = -n;
        }
    } else if n < 0 {
        n = 0;
    }
    let exact = nb / 2;
    if n < exact {
        return (base + n) as usize;
    }
    let scaled = ((n as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln() * (nb - exact) as f64) as i64;
    (base + (exact + scaled).min(nb - 1)) as usize
}

impl<'a> Reference<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model }
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    fn p(&self, name: &str) -> &[f64] {
        self.model.params.get(name).expect(name).data()
    }

    fn linear(&self, x: &[f64], name: &str) -> Vec<f64> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        let out = b.len();
        (0..out)
            .map(|o| b[o] + x.iter().enumerate().map(|(k, xv)| xv * w[k * out + o]).sum::<f64>())
            .collect()
    }

    fn norm(&self, x: &[f64], name: &str) -> Vec<f64> {
        let g = self.p(&format!("{name}.gain"));
        let b = self.p(&format!("{name}.bias"));
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = (var + 1e-5).sqrt();
        x.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
    }

    fn ffn(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        let h: Vec<f64> = self
            .linear(x, &format!("{prefix}.ffn.inner"))
            .into_iter()
            .map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        self.linear(&h, &format!("{prefix}.ffn.outer"))
    }

    /// One query against an explicit key list; `bias` gives each key's bucket.
    fn attend_one(&self, query: &[f64], keys: &[&[f64]], buckets: Option<(&[usize], &str)>, prefix: &str) -> Vec<f64> {
        let heads = self.cfg().heads;
        let d = query.len();
        let dh = d / heads;
        let q = self.linear(query, &format!("{prefix}.query"));
        let k: Rows = keys.iter().map(|x| self.linear(x, &format!("{prefix}.key"))).collect();
        let v: Rows = keys.iter().map(|x| self.linear(x, &format!("{prefix}.value"))).collect();
        let mut ctx = vec![0.0; d];
        for h in 0..heads {
            let lo = h * dh;
            let mut scores: Vec<f64> = k
                .iter()
                .map(|kr| (lo..lo + dh).map(|c| q[c] * kr[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            if let Some((b, table)) = buckets {
                let t = self.p(table);
                for (s, &bk) in scores.iter_mut().zip(b) {
                    *s += t[bk * heads + h];
                }
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, vr) in e.iter().zip(&v) {
                for c in lo..lo + dh {
                    ctx[c] += w / z * vr[c];
                }
            }
        }
        self.linear(&ctx, &format!("{prefix}.output"))
    }

    fn embed(&self, token: TokenId, pos: usize) -> Vec<f64> {
        let d = self.cfg().hidden;
        let tok = &self.p("embed.tokens")[token * d..(token + 1) * d];
        let p = &self.p("embed.positions")[pos * d..(pos + 1) * d];
        tok.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    pub fn encode(&self, source: &[TokenId]) -> Rows {
        let cfg = self.cfg();
        let mut x: Rows = source.iter().enumerate().map(|(i, &t)| self.embed(t, i)).collect();
        for l in 0..cfg.layers_enc {
            let p = format!("encoder.layers.{l}");
            let a: Rows = x.iter().map(|r| self.norm(r, &format!("{p}.ln_attn"))).collect();
            let keys: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
            for i in 0..x.len() {
                let b: Vec<usize> = (0..a.len())
                    .map(|j| t5_bucket(j as i64 - i as i64, cfg.num_buckets, cfg.max_distance, true))
                    .collect();
                let out = self.attend_one(&a[i], &keys, Some((&b, "encoder.rel_bias")), &format!("{p}.self_attn"));
                x[i].iter_mut().zip(out).for_each(|(v, o)| *v += o);
            }
            for r in x.iter_mut() {
                let f = self.ffn(&self.norm(r, &format!("{p}.ln_ffn")), &p);
                r.iter_mut().zip(f).for_each(|(v, o)| *v += o);
            }
        }
        x.iter().map(|r| self.norm(r, "encoder.final_ln")).collect()
    }

    /// Logits of every stream: `out[i][j]` is stream `i` at slot `j`.
    pub fn logits(&self, source: &[TokenId], targets: &[TokenId], streams: usize) -> Vec<Rows> {
        let cfg = self.cfg();
        let d = cfg.hidden;
        let enc = self.encode(source);
        let input = decoder_input(targets);
        let t = input.len();
        let mut main: Rows = input.iter().enumerate().map(|(j, &tok)| self.embed(tok, j)).collect();
        let mut pred: Vec<Rows> = (1..streams)
            .map(|i| {
                let init = &self.p("embed.streams")[(i - 1) * d..i * d];
                (0..t)
                    .map(|j| {
                        let pos = (j + i).min(cfg.max_len - 1);
                        let p = &self.p("embed.positions")[pos * d..(pos + 1) * d];
                        p.iter().zip(init).map(|(a, b)| a + b).collect()
                    })
                    .collect()
            })
            .collect();
        let bucket = |k: usize, q: usize| t5_bucket(k as i64 - q as i64, cfg.num_buckets, cfg.max_distance, false);
        for l in 0..cfg.layers_dec {
            let p = format!("decoder.layers.{l}");
            let sa = format!("{p}.self_attn");
            let a: Rows = main.iter().map(|r| self.norm(r, &format!("{p}.ln_self"))).collect();
            for (idx, s) in pred.iter_mut().enumerate() {
                let i = idx + 1;
                let b_rows: Rows = s.iter().map(|r| self.norm(r, &format!("{p}.ln_self"))).collect();
                for j in 0..t {
                    // Main prefix 0..=j, then the slot itself.
                    let mut keys: Vec<&[f64]> = a[..=j].iter().map(Vec::as_slice).collect();
                    keys.push(&b_rows[j]);
                    let mut buckets: Vec<usize> = (0..=j).map(|k| bucket(k, j + i)).collect();
                    buckets.push(bucket(j + i, j + i));
                    let out = self.attend_one(&b_rows[j], &keys, Some((&buckets, "decoder.rel_bias")), &sa);
                    s[j].iter_mut().zip(out).for_each(|(v, o)| *v += o);
                }
            }
            for j in 0..t {
                let keys: Vec<&[f64]> = a[..=j].iter().map(Vec::as_slice).collect();
                let buckets: Vec<usize> = (0..=j).map(|k| bucket(k, j)).collect();
                let out = self.attend_one(&a[j], &keys, Some((&buckets, "decoder.rel_bias")), &sa);
                main[j].iter_mut().zip(out).for_each(|(v, o)| *v += o);
            }
            let enc_keys: Vec<&[f64]> = enc.iter().map(Vec::as_slice).collect();
            for r in main.iter_mut().chain(pred.iter_mut().flatten()) {
                let c = self.norm(r, &format!("{p}.ln_cross"));
                let out = self.attend_one(&c, &enc_keys, None, &format!("{p}.cross_attn"));
                r.iter_mut().zip(out).for_each(|(v, o)| *v += o);
                let f = self.ffn(&self.norm(r, &format!("{p}.ln_ffn")), &p);
                r.iter_mut().zip(f).for_each(|(v, o)| *v += o);
            }
        }
        let emb = self.p("embed.tokens");
        std::iter::once(main)
            .chain(pred)
            .map(|rows| {
                rows.iter()
                    .map(|r| {
                        let h = self.norm(r, "decoder.final_ln");
                        (0..cfg.vocab_size)
                            .map(|v| h.iter().zip(&emb[v * d..(v + 1) * d]).map(|(a, b)| a * b).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Vanilla teacher-forcing NLL summed over targets, with the token count.
    pub fn nll_sum(&self, source: &[TokenId], targets: &[TokenId]) -> (f64, usize) {
        let logits = &self.logits(source, targets, 1)[0];
        let nll = logits
            .iter()
            .zip(targets)
            .map(|(row, &y)| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lz = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lz - row[y]
            })
            .sum();
        (nll, targets.len())
    }
}

pub fn tiny_config(ngram: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        layers_enc: 2,
        layers_dec: 2,
        hidden: 8,
        ffn: 16,
        heads: 2,
        ngram,
        gamma: 1.0,
        max_len: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// A model with non-trivial biases and norms so every parameter matters.
pub fn noisy_model(config: ModelConfig, seed: u64) -> Model {
    use rand::SeedableRng;
    let mut model = Model::new(config, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    for (_, t) in model.params.iter_mut() {
        let noise = prophetnet::Tensor::randn(t.shape(), 0.3, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
    }
    model
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
