use prophetnet::decode::{beam_search, greedy, score, BeamConfig};
use prophetnet::{Model, ModelConfig, Tensor, TokenId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SOURCE: [TokenId; 4] = [4, 5, 6, 7];

fn model(seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: 11,
        layers_enc: 1,
        layers_dec: 1,
        hidden: 8,
        ffn: 16,
        heads: 2,
        ngram: 2,
        max_len: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.5, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
    }
    model
}

fn beam(width: usize) -> BeamConfig {
    BeamConfig {
        beam: width,
        alpha: 0.0,
        min_len: 0,
        max_len: 8,
        block_trigrams: false,
    }
}

/// Beam search prunes on the partial log-probability, so a wider beam can
/// drop the prefix that greedy follows to a better finished hypothesis.
/// This model is a concrete case: widening from 1 to 5 lowers the best score.
#[test]
fn wider_beam_can_finish_below_greedy() {
    let m = model(19);
    let narrow = beam_search(&m, &SOURCE, &beam(1)).unwrap();
    let wide = beam_search(&m, &SOURCE, &beam(5)).unwrap();
    assert_eq!(narrow.tokens, greedy(&m, &SOURCE, 8, 0).unwrap());
    assert!((narrow.score + 11.3931).abs() < 1e-4, "{}", narrow.score);
    assert!((wide.score + 11.4201).abs() < 1e-4, "{}", wide.score);
    assert!(wide.score < narrow.score);
    // The greedy path is not among the wide beam's finished hypotheses.
    assert!(wide.completed.iter().all(|h| h.output() != narrow.tokens.as_slice()));
}

#[test]
fn wider_beam_usually_scores_at_least_as_well() {
    let mut worse = 0;
    for seed in 0..100 {
        let m = model(seed);
        let narrow = beam_search(&m, &SOURCE, &beam(1)).unwrap();
        let wide = beam_search(&m, &SOURCE, &beam(5)).unwrap();
        worse += (wide.score < narrow.score - 1e-12) as usize;
        assert!(wide.completed.iter().all(|h| score(h, 0.0) <= wide.score));
    }
    assert!(worse <= 2, "{worse} of 100 models scored worse with a wider beam");
}
