//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any gated criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod reference;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use prophetnet::checkpoint::Checkpoint;
use prophetnet::decode::{beam_search, greedy, has_repeated_trigram, BeamConfig};
use prophetnet::denoise::{mask_spans, Batcher, Corruption, Pair, PairData};
use prophetnet::gradcheck::{run_suite, MODEL_TOLERANCE, OP_TOLERANCE};
use prophetnet::metrics::{rouge_l, rouge_n, synth_task, TaskKind};
use prophetnet::model::EOS;
use prophetnet::train::{batch_gradients, evaluate, Control, StepRecord, TrainConfig, Trainer};
use prophetnet::{alpha_weights, Model, ModelConfig, Tape, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reference::{max_abs_diff, noisy_model, tiny_config, Reference};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_gradients() -> Outcome {
    let summary = run_suite(None).map_err(|e| e.to_string())?;
    for r in &summary.reports {
        let tol = if r.name == "model_end_to_end" { MODEL_TOLERANCE } else { OP_TOLERANCE };
        ensure(r.tolerance == tol && r.passed(), || format!("{} rel err {:.3e} (tolerance {tol:e})", r.name, r.max_rel_err))?;
    }
    ensure(summary.seconds < 60.0, || format!("suite took {:.1} s", summary.seconds))?;
    let w = summary.worst().ok_or("no reports")?;
    Ok(format!(
        "{} checks, worst {} at {:.2e}, {:.1} s",
        summary.reports.len(),
        w.name,
        w.max_rel_err,
        summary.seconds
    ))
}

fn c2_single_stream() -> Outcome {
    let source: [TokenId; 6] = [5, 9, 4, 12, 7, 6];
    let targets: [TokenId; 7] = [8, 4, 11, 6, 10, 5, 9];
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let model = noisy_model(tiny_config(1), seed);
        let vanilla = Reference::new(&model);
        let pairs: Vec<Pair> = (0..4)
            .map(|k| Pair {
                source: source[k..].to_vec(),
                target: targets[..3 + k].to_vec(),
            })
            .collect();
        let got = batch_gradients(&model, &pairs, 1, None).map_err(|e| e.to_string())?.loss;
        let (sum, count) = pairs
            .iter()
            .map(|p| vanilla.nll_sum(&p.source, &p.target))
            .fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
        worst = worst.max((got - sum / count as f64).abs());
    }
    ensure(worst < 1e-9, || format!("|loss difference| {worst:e}"))?;
    Ok(format!("max |loss difference| {worst:.1e} over 5 models"))
}

fn c3_no_leakage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = 0;
    for (k, n) in [1, 2, 3, 4].into_iter().cycle().take(12).enumerate() {
        let model = noisy_model(tiny_config(n), 100 + k as u64);
        let len = rng.random_range(4..=9);
        let source: Vec<TokenId> = (0..6).map(|_| rng.random_range(4..13)).collect();
        let targets: Vec<TokenId> = (0..len).map(|_| rng.random_range(4..13)).collect();
        let base = model.teacher_forced_logits(&source, &targets, true).map_err(|e| e.to_string())?;
        for m in 0..len {
            let mut changed = targets.clone();
            changed[m] = 4 + (changed[m] - 4 + 1 + rng.random_range(0..8)) % 9;
            let after = model.teacher_forced_logits(&source, &changed, true).map_err(|e| e.to_string())?;
            for (s, (a, b)) in base.iter().zip(&after).enumerate() {
                // Slot j reads decoder inputs 0..=j, which hold targets 0..j.
                for j in 0..=m {
                    ensure(a.row(j) == b.row(j), || format!("n={n} stream {s} slot {j} saw target {m}"))?;
                    checks += 1;
                }
            }
        }
    }
    Ok(format!("{checks} slot comparisons bit-identical"))
}

fn c4_incremental() -> Outcome {
    let source: [TokenId; 6] = [5, 9, 4, 12, 7, 6];
    let targets: [TokenId; 7] = [8, 4, 11, 6, 10, 5, 9];
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        let model = noisy_model(tiny_config(n), 40 + n as u64);
        let memory = model.encode_memory(&source).map_err(|e| e.to_string())?;
        for streams in [true, false] {
            let tf = model.teacher_forced_logits(&source, &targets, streams).map_err(|e| e.to_string())?;
            let mut cache = model.new_cache();
            for t in 0..targets.len() {
                let step = model
                    .decode_infer_step(&targets[..t], &memory, &mut cache)
                    .map_err(|e| e.to_string())?;
                worst = worst.max(max_abs_diff(&step, tf[0].row(t)));
            }
        }
    }
    ensure(worst < 1e-10, || format!("max |difference| {worst:e}"))?;
    Ok(format!("max |difference| {worst:.1e}, streams on and off, n = 1..4"))
}

fn c5_alpha() -> Outcome {
    let a = alpha_weights(1.0, 2);
    ensure(a.as_slice() == [0.5, 0.5], || format!("alpha(1.0, 2) = {:?}", a.as_slice()))?;
    let b = alpha_weights(0.5, 3);
    ensure(b.as_slice() == [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0], || format!("alpha(0.5, 3) = {:?}", b.as_slice()))?;
    let mut worst: f64 = 0.0;
    for (n, gamma) in [(2, 1.0), (3, 0.5), (4, 0.7)] {
        let config = ModelConfig {
            gamma,
            ..tiny_config(n)
        };
        let model = noisy_model(config, n as u64);
        let tape = Tape::new();
        let bound = model.bind(&tape).map_err(|e| e.to_string())?;
        let loss = model
            .example_loss(&bound, &[5, 6, 7, 8], &[9, 4, 11, 6, 10], None)
            .map_err(|e| e.to_string())?;
        let total = loss.total.value().item().map_err(|e| e.to_string())?;
        let dot: f64 = alpha_weights(gamma, n)
            .as_slice()
            .iter()
            .zip(&loss.per_stream)
            .map(|(w, l)| w * l.unwrap_or(0.0))
            .sum();
        worst = worst.max((total - dot).abs());
    }
    ensure(worst < 1e-12, || format!("loss vs alpha . NLL differs by {worst:e}"))?;
    Ok(format!("weights exact, decomposition within {worst:.1e}"))
}

fn c6_denoising() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vocab_size = 1000;
    let (mut tokens, mut masked) = (0usize, 0usize);
    let mut branches: HashMap<Corruption, usize> = HashMap::new();
    let examples = 12_000;
    for i in 0..examples {
        let len = rng.random_range(64..=256);
        let doc: Vec<TokenId> = (0..len).map(|_| rng.random_range(4..vocab_size)).collect();
        let ex = mask_spans(&doc, 64, 0.15, vocab_size, &mut rng).map_err(|e| e.to_string())?;
        ensure(ex.reconstruct() == doc, || format!("example {i} does not reconstruct"))?;
        tokens += len;
        masked += ex.masked_count();
        for c in &ex.corruption {
            *branches.entry(*c).or_default() += 1;
        }
    }
    let fraction = masked as f64 / tokens as f64;
    ensure((0.13..=0.17).contains(&fraction), || format!("masked fraction {fraction:.4}"))?;
    let share = |c| *branches.get(&c).unwrap_or(&0) as f64 / masked as f64;
    let (m, r, k) = (share(Corruption::Mask), share(Corruption::Random), share(Corruption::Keep));
    ensure((m - 0.8).abs() <= 0.01 && (r - 0.1).abs() <= 0.01 && (k - 0.1).abs() <= 0.01, || {
        format!("branches {m:.4}/{r:.4}/{k:.4}")
    })?;
    Ok(format!(
        "{examples} examples, masked {:.2}%, branches {:.2}/{:.2}/{:.2}%",
        100.0 * fraction,
        100.0 * m,
        100.0 * r,
        100.0 * k
    ))
}

fn copy_config(ngram: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        layers_enc: 2,
        layers_dec: 2,
        hidden: 64,
        ffn: 256,
        heads: 4,
        ngram,
        gamma: 1.0,
        max_len: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn with_eos(pairs: Vec<Pair>) -> Vec<Pair> {
    pairs
        .into_iter()
        .map(|mut p| {
            p.target.push(EOS);
            p
        })
        .collect()
}

struct Trained {
    model: Model,
    /// First evaluation step with main-stream accuracy above 0.99.
    reached: Option<u64>,
    steps: u64,
    accuracy: Vec<f64>,
    test_accuracy: f64,
    /// Main-stream test accuracy at every evaluation.
    test_curve: Vec<f64>,
    records: Vec<StepRecord>,
    seconds: f64,
}

/// Trains on `train` for at most `steps`, evaluating every 25 steps. With a
/// `stream_goal` it stops once main-stream accuracy exceeds 0.99 and every
/// other stream exceeds the goal.
fn train_until(config: ModelConfig, train: &[Pair], test: &[Pair], steps: u64, stream_goal: Option<f64>) -> Result<Trained, String> {
    let start = Instant::now();
    let tc = TrainConfig {
        steps,
        batch_size: 16,
        warmup: 100,
        lr: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let data = PairData {
        pairs: train.to_vec(),
        batcher: Batcher::new(16, config.max_len, 7).map_err(|e| e.to_string())?,
    };
    let mut trainer = Trainer::new(Model::new(config, 7).map_err(|e| e.to_string())?, tc).map_err(|e| e.to_string())?;
    let mut reached = None;
    let mut accuracy = Vec::new();
    let mut test_curve = Vec::new();
    let records = trainer
        .run(&data, None, None, |t, rec| {
            if rec.step % 25 != 0 {
                return Ok(Control::Continue);
            }
            let ev = evaluate(&t.model, train)?;
            accuracy = ev.accuracy.iter().map(|a| a.fraction()).collect();
            test_curve.push(evaluate(&t.model, test)?.main_accuracy());
            if accuracy[0] > 0.99 && reached.is_none() {
                reached = Some(rec.step);
            }
            let done = stream_goal.is_some_and(|goal| reached.is_some() && accuracy[1..].iter().all(|&a| a > goal));
            Ok(if done { Control::Stop } else { Control::Continue })
        })
        .map_err(|e| e.to_string())?;
    let test_accuracy = evaluate(&trainer.model, test).map_err(|e| e.to_string())?.main_accuracy();
    Ok(Trained {
        steps: trainer.step,
        model: trainer.model,
        reached,
        accuracy,
        test_accuracy,
        test_curve,
        records,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// 100-step moving averages of the main-stream NLL, one per full window.
fn moving_nll0(records: &[StepRecord]) -> Vec<f64> {
    let nll: Vec<f64> = records.iter().map(|r| r.nll_per_stream[0].unwrap_or(0.0)).collect();
    nll.windows(100).map(|w| w.iter().sum::<f64>() / 100.0).collect()
}

fn c7_copy(trained: &mut Option<Model>) -> Outcome {
    let start = Instant::now();
    let (train, test) = synth_task(TaskKind::Copy, 200, 30, 2024).map_err(|e| e.to_string())?;
    let (train, test) = (with_eos(train), with_eos(test));
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for n in [1, 2] {
        let goal = Some(if n == 2 { 0.95 } else { 0.0 });
        let t = train_until(copy_config(n), &train, &test, 2000, goal)?;
        let avg = moving_nll0(&t.records);
        let rises = avg.windows(2).filter(|w| w[1] > w[0]).count();
        let (first, last) = (avg[0], avg[avg.len() - 1]);
        lines.push(format!(
            "n={n}: >0.99 at step {:?}, stopped {} ({:.0} s), train acc {:?}, test acc {:.3}, NLL_0 100-step avg {first:.3} -> {last:.4} over {} windows, {rises} rises",
            t.reached,
            t.steps,
            t.seconds,
            t.accuracy.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            t.test_accuracy,
            avg.len(),
        ));
        if t.reached.is_none() {
            failures.push(format!("n={n} main stream stayed at {:.3}", t.accuracy[0]));
        }
        if n == 2 && !(t.accuracy[1] > 0.95) {
            failures.push(format!("n=2 stream-1 accuracy {:.3}", t.accuracy[1]));
        }
        if rises > 0 {
            failures.push(format!("n={n} NLL_0 moving average rose {rises} times"));
        }
        if n == 2 {
            *trained = Some(t.model);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 600.0 {
        failures.push(format!("took {secs:.0} s"));
    }
    let detail = format!("{}; total {secs:.0} s", lines.join("; "));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join(", ")))
    }
}

fn c8_decoding(copy: Option<&Model>) -> Outcome {
    let copy = copy.ok_or("needs the copy model from criterion 7")?;
    let (_, test) = synth_task(TaskKind::Copy, 200, 30, 2024).map_err(|e| e.to_string())?;
    let e = |e: prophetnet::Error| e.to_string();

    // Beam 1 against greedy: on the trained model and on random ones.
    let mut compared = 0;
    let mut exact_copies = 0;
    for p in &test {
        let g = greedy(copy, &p.source, 15, 0).map_err(e)?;
        let cfg = BeamConfig {
            beam: 1,
            alpha: 1.0,
            min_len: 0,
            max_len: 15,
            block_trigrams: false,
        };
        let b = beam_search(copy, &p.source, &cfg).map_err(e)?;
        ensure(b.tokens == g, || format!("beam 1 {:?} vs greedy {g:?}", b.tokens))?;
        exact_copies += (g == p.source) as usize;
        compared += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tiny = ModelConfig {
        max_len: 24,
        ..tiny_config(2)
    };
    for seed in 0..100 {
        let model = noisy_model(tiny.clone(), seed);
        let src: Vec<TokenId> = (0..rng.random_range(3..8)).map(|_| rng.random_range(4..13)).collect();
        let min_len = rng.random_range(0..6);
        let g = greedy(&model, &src, 20, min_len).map_err(e)?;
        let cfg = BeamConfig {
            beam: 1,
            alpha: rng.random_range(0.0..2.0),
            min_len,
            max_len: 20,
            block_trigrams: false,
        };
        ensure(beam_search(&model, &src, &cfg).map_err(e)?.tokens == g, || format!("random model {seed}: beam 1 differs from greedy"))?;
        compared += 1;
    }

    // Trigram blocking over 1000 generations that would otherwise repeat.
    let mut unblocked_repeats = 0;
    for k in 0..1000u64 {
        let model = noisy_model(tiny.clone(), 1000 + k / 10);
        let src: Vec<TokenId> = (0..5).map(|_| rng.random_range(4..13)).collect();
        let mut cfg = BeamConfig {
            beam: 2,
            alpha: 1.0,
            min_len: 12,
            max_len: 20,
            block_trigrams: true,
        };
        let out = beam_search(&model, &src, &cfg).map_err(e)?;
        ensure(!has_repeated_trigram(&out.tokens), || format!("generation {k} repeats a trigram: {:?}", out.tokens))?;
        if k % 10 == 0 {
            cfg.block_trigrams = false;
            unblocked_repeats += has_repeated_trigram(&beam_search(&model, &src, &cfg).map_err(e)?.tokens) as usize;
        }
    }

    // Checkpoint round trip.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("copy.ck");
    Checkpoint::from_model(copy).map_err(e)?.save(&path).map_err(e)?;
    let loaded = Checkpoint::load(&path).map_err(e)?.model().map_err(e)?;
    ensure(loaded.config == copy.config, || "config changed".into())?;
    for ((na, a), (nb, b)) in copy.params.iter().zip(loaded.params.iter()) {
        ensure(na == nb && a.shape() == b.shape(), || format!("tensor {na} vs {nb}"))?;
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("tensor {na} changed bits"))?;
    }
    for p in test.iter().take(10) {
        let a = copy.teacher_forced_logits(&p.source, &p.target, true).map_err(e)?;
        let b = loaded.teacher_forced_logits(&p.source, &p.target, true).map_err(e)?;
        for (x, y) in a.iter().zip(&b) {
            let same = x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits());
            ensure(same, || "post-load logits differ".into())?;
        }
    }

    // Not a gate: does widening the beam find a better score on the trained model?
    let (mut wider_better, mut wider_worse) = (0, 0);
    for p in &test {
        let mk = |beam| BeamConfig {
            beam,
            alpha: 1.0,
            min_len: 0,
            max_len: 15,
            block_trigrams: false,
        };
        let s1 = beam_search(copy, &p.source, &mk(1)).map_err(e)?.score;
        let s5 = beam_search(copy, &p.source, &mk(5)).map_err(e)?.score;
        wider_better += (s5 > s1) as usize;
        wider_worse += (s5 < s1) as usize;
    }

    Ok(format!(
        "beam 1 == greedy on {compared} inputs ({exact_copies}/{} exact copies); 1000 blocked generations clean \
         ({unblocked_repeats}/100 repeat without blocking); checkpoint bit-exact; beam 5 vs 1 score better {wider_better}, worse {wider_worse}",
        test.len()
    ))
}

fn c9_rouge() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
    let r1 = rouge_n(&["a", "b", "c"], &["a", "b", "d"], 1).map_err(|e| e.to_string())?;
    ensure(close(r1.precision, 2.0 / 3.0) && close(r1.recall, 2.0 / 3.0) && close(r1.f1, 2.0 / 3.0), || format!("rouge-1 {r1:?}"))?;
    let rl = rouge_l(&["a", "b", "c"], &["a", "b", "d"]);
    ensure(close(rl.f1, 2.0 / 3.0), || format!("rouge-L {rl:?}"))?;
    let clip = rouge_n(&["a", "a"], &["a"], 1).map_err(|e| e.to_string())?;
    ensure(clip.precision == 0.5 && clip.recall == 1.0, || format!("clipping {clip:?}"))?;
    Ok(format!("R1 {:.4}, RL {:.4}, clipped P {}", r1.f1, rl.f1, clip.precision))
}

fn pnet(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("PNET_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
}

fn c10_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let corpus: String = (0..200)
        .map(|_| {
            let len = rng.random_range(10..=60);
            (0..len).map(|_| format!("w{}", rng.random_range(0..60))).collect::<Vec<_>>().join(" ") + "\n"
        })
        .collect();
    let config = r#"{
      "model": {"hidden": 32, "ffn": 64, "heads": 2, "layers_enc": 2, "layers_dec": 2, "max_len": 64, "ngram": 3, "dropout": 0.1},
      "train": {"steps": 120, "batch_size": 8, "warmup": 20, "lr": 0.001, "seed": 5, "checkpoint_every": 40},
      "paths": {"corpus": "corpus.txt", "vocab": "vocab.txt", "checkpoint": "run.ck", "metrics": "run.jsonl"}
    }"#;
    let mut logs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        std::fs::write(dir.path().join("corpus.txt"), &corpus).map_err(|e| e.to_string())?;
        std::fs::write(dir.path().join("config.json"), config).map_err(|e| e.to_string())?;
        pnet(dir.path(), &["build-vocab", "--corpus", "corpus.txt", "--output", "vocab.txt", "--size", "64"])?;
        pnet(dir.path(), &["pretrain", "--config", "config.json"])?;
        let log = std::fs::read(dir.path().join("run.jsonl")).map_err(|e| e.to_string())?;
        let ck = std::fs::read(dir.path().join("run.ck")).map_err(|e| e.to_string())?;
        logs.push((log, ck));
    }
    ensure(logs[0].0 == logs[1].0, || "metrics logs differ".into())?;
    ensure(logs[0].1 == logs[1].1, || "checkpoints differ".into())?;
    Ok(format!("two 120-step runs, {} log bytes identical, checkpoints identical", logs[0].0.len()))
}

fn c11_lead_k() -> Outcome {
    let (train, test) = synth_task(TaskKind::LeadK(3), 200, 30, 11).map_err(|e| e.to_string())?;
    let (train, test) = (with_eos(train), with_eos(test));
    let mut parts = Vec::new();
    for n in [1, 2] {
        // A short fixed budget so that the two runs differ at all.
        let t = train_until(copy_config(n), &train, &test, 150, None)?;
        let curve: Vec<String> = t.test_curve.iter().map(|a| format!("{a:.3}")).collect();
        parts.push(format!("n={n} final {:.4}, every 25 steps [{}]", t.test_accuracy, curve.join(" ")));
    }
    Ok(format!("lead_3 main-stream test accuracy (informational): {}", parts.join(" | ")))
}

fn main() {
    let start = Instant::now();
    let mut copy_model = None;
    let mut failed = 0;
    let mut report = |id: u32, name: &str, gated: bool, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:2} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += gated as u32;
                let tag = if gated { "FAIL" } else { "FAIL (informational)" };
                println!("criterion {id:2} {name}: {tag} ({d}) [{secs:.1} s]");
            }
        }
    };
    report(1, "gradient suite", true, &mut c1_gradients);
    report(2, "n=1 reduction", true, &mut c2_single_stream);
    report(3, "stream no-leakage", true, &mut c3_no_leakage);
    report(4, "inference equivalence", true, &mut c4_incremental);
    report(5, "alpha weights", true, &mut c5_alpha);
    report(6, "denoising statistics", true, &mut c6_denoising);
    report(7, "desk-scale copy learning", true, &mut || c7_copy(&mut copy_model));
    report(8, "decoding", true, &mut || c8_decoding(copy_model.as_ref()));
    report(9, "ROUGE oracle", true, &mut c9_rouge);
    report(10, "determinism", true, &mut c10_determinism);
    report(11, "lead-k n=1 vs n=2", false, &mut c11_lead_k);
    println!("acceptance: {failed} gated criteria failed, {:.0} s", start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
