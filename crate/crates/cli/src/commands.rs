use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use prophetnet::autodiff::OpKind;
use prophetnet::checkpoint::Checkpoint;
use prophetnet::decode::{beam_search, BeamConfig};
use prophetnet::denoise::{Batcher, DataSource, DenoiseData, Pair, PairData, Vocab};
use prophetnet::gradcheck::run_suite;
use prophetnet::metrics::EvalReport;
use prophetnet::model::EOS;
use prophetnet::train::{evaluate, Control, Task, Trainer};
use prophetnet::{Model, ModelConfig, TokenId};
use serde_json::json;

use crate::config::{existing, read_lines, writable, write_text, RunConfig};
use crate::{TrainFlags, UserError};

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// Adds the end marker so that generation learns where to stop.
fn with_eos(mut target: Vec<TokenId>) -> Vec<TokenId> {
    target.push(EOS);
    target
}

struct WithEos<D>(D);

impl<D: DataSource> DataSource for WithEos<D> {
    fn batch(&self, step: u64) -> prophetnet::Result<Vec<Pair>> {
        Ok(self
            .0
            .batch(step)?
            .into_iter()
            .map(|p| Pair {
                source: p.source,
                target: with_eos(p.target),
            })
            .collect())
    }
}

fn load_config(flags: &TrainFlags) -> Result<RunConfig> {
    let mut rc = RunConfig::load(flags.config.as_deref())?;
    rc.apply_env_seed()?;
    let t = &mut rc.train;
    t.steps = flags.steps.unwrap_or(t.steps);
    t.batch_size = flags.batch_size.unwrap_or(t.batch_size);
    t.lr = flags.lr.unwrap_or(t.lr);
    t.warmup = flags.warmup.unwrap_or(t.warmup);
    t.seed = flags.seed.unwrap_or(t.seed);
    if flags.ngram.is_some() {
        rc.model.ngram = flags.ngram;
    }
    let d = &mut rc.data;
    d.eval_every = flags.eval_every.unwrap_or(d.eval_every);
    if flags.target_accuracy.is_some() {
        d.target_accuracy = flags.target_accuracy;
    }
    let p = &mut rc.paths;
    for (slot, flag) in [
        (&mut p.vocab, &flags.vocab),
        (&mut p.checkpoint, &flags.checkpoint),
        (&mut p.metrics, &flags.metrics),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    Ok(rc)
}

fn metrics_path(rc: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    match &rc.paths.metrics {
        Some(_) => writable(&rc.paths.metrics, "metrics log"),
        None => Ok(checkpoint.with_extension("metrics.jsonl")),
    }
}

/// The configuration actually used, with the model section fully resolved.
fn effective(rc: &RunConfig, model: &ModelConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(rc)?;
    v["model"] = serde_json::to_value(model)?;
    Ok(v)
}

fn check_fingerprint(ck: &Checkpoint, vocab: &Vocab, what: &Path) -> Result<()> {
    if let Some(fp) = ck.get("vocab.fingerprint") {
        let want = format!("{:016x}", vocab.fingerprint());
        if fp != want {
            return Err(user(format!(
                "vocabulary does not match checkpoint {} (fingerprint {want}, checkpoint has {fp})",
                what.display()
            )));
        }
    }
    Ok(())
}

fn fresh_model_config(rc: &RunConfig, vocab: &Vocab) -> Result<ModelConfig> {
    if let Some(v) = rc.model.vocab_size.filter(|&v| v != vocab.len()) {
        return Err(user(format!("model.vocab_size {v} disagrees with the vocabulary's {}", vocab.len())));
    }
    let base = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let cfg = rc.model.apply(&base);
    cfg.validate()?;
    Ok(cfg)
}

struct Run<'a> {
    rc: &'a RunConfig,
    checkpoint: PathBuf,
    metrics: PathBuf,
    /// Append to an existing log instead of starting a new one.
    append: bool,
    eval_pairs: Vec<Pair>,
}

fn train(mut trainer: Trainer, data: &dyn DataSource, run: Run) -> Result<ExitCode> {
    let file = if run.append {
        OpenOptions::new().append(true).create(true).open(&run.metrics)
    } else {
        File::create(&run.metrics)
    }
    .with_context(|| format!("opening metrics log {}", run.metrics.display()))?;
    let mut log = BufWriter::new(file);
    if !run.append {
        writeln!(log, "{}", prophetnet::train::log_header(&effective(run.rc, &trainer.model.config)?))?;
    }
    let (every, target) = (run.rc.data.eval_every, run.rc.data.target_accuracy);
    let mut reached = None;
    let records = trainer.run(data, Some(&mut log), Some(&run.checkpoint), |t, rec| {
        if every == 0 || rec.step % every != 0 || run.eval_pairs.is_empty() {
            return Ok(Control::Continue);
        }
        let ev = evaluate(&t.model, &run.eval_pairs)?;
        let acc: Vec<f64> = ev.accuracy.iter().map(|a| a.fraction()).collect();
        println!("{}", json!({ "eval_step": rec.step, "accuracy": acc, "ppl": ev.perplexity() }));
        if target.is_some_and(|x| ev.main_accuracy() > x) {
            reached = Some(rec.step);
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    })?;
    log.flush()?;
    if let Some(step) = reached {
        println!("target accuracy reached at step {step}");
    }
    match records.last() {
        Some(r) => println!("finished step {} loss {:.6}", r.step, r.loss),
        None => println!("nothing to do: checkpoint is already at step {}", trainer.step),
    }
    println!("checkpoint {}", run.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

pub fn build_vocab(corpus: &Path, output: &Path, size: usize) -> Result<ExitCode> {
    let corpus = existing(&Some(corpus.to_path_buf()), "corpus")?;
    let output = writable(&Some(output.to_path_buf()), "vocab output")?;
    let lines = read_lines(&corpus, "corpus")?;
    let vocab = Vocab::build(lines.iter().map(String::as_str), size)?;
    vocab.save(&output)?;
    println!("wrote {} tokens ({} with reserved ids) to {}", vocab.len() - prophetnet::model::RESERVED, vocab.len(), output.display());
    Ok(ExitCode::SUCCESS)
}

pub fn pretrain(flags: TrainFlags, corpus: Option<PathBuf>, resume: bool) -> Result<ExitCode> {
    let mut rc = load_config(&flags)?;
    if corpus.is_some() {
        rc.paths.corpus = corpus;
    }
    rc.train.task = Task::Pretrain;
    let corpus = existing(&rc.paths.corpus, "corpus")?;
    let vocab_path = existing(&rc.paths.vocab, "vocab")?;
    let ck_path = writable(&rc.paths.checkpoint, "checkpoint")?;
    let metrics = metrics_path(&rc, &ck_path)?;
    rc.train.validate()?;

    let vocab = Vocab::load(&vocab_path)?;
    let documents: Vec<Vec<TokenId>> = read_lines(&corpus, "corpus")?
        .iter()
        .map(|l| vocab.encode(l))
        .filter(|d| !d.is_empty())
        .collect();
    if documents.is_empty() {
        return Err(user(format!("corpus {} has no tokens", corpus.display())));
    }

    let model_cfg = fresh_model_config(&rc, &vocab)?;
    let mut trainer = if resume {
        let ck_file = existing(&Some(ck_path.clone()), "checkpoint to resume")?;
        let ck = Checkpoint::load(&ck_file)?;
        check_fingerprint(&ck, &vocab, &ck_file)?;
        let t = Trainer::from_checkpoint(&ck, Some(rc.train.clone()))?;
        if t.model.config != model_cfg {
            return Err(user("model configuration differs from the checkpoint being resumed"));
        }
        t
    } else {
        Trainer::new(Model::new(model_cfg, rc.train.seed)?, rc.train.clone())?
    };
    trainer.vocab_fingerprint = Some(vocab.fingerprint());

    let max_len = trainer.model.config.max_len - 1;
    let data = DenoiseData {
        documents,
        batcher: Batcher::new(rc.train.batch_size, max_len, rc.train.seed)?,
        window: rc.data.window,
        ratio: rc.data.mask_ratio,
        vocab_size: vocab.len(),
    };
    // A fixed held-out draw of examples, never used for training steps.
    let mut eval_pairs = Vec::new();
    for d in 0..data.documents.len().min(64) {
        let ex = data.example(u64::MAX, d, d)?;
        eval_pairs.push(Pair {
            source: ex.encoder_input,
            target: with_eos(ex.target),
        });
    }
    let run = Run {
        rc: &rc,
        checkpoint: ck_path,
        metrics,
        append: resume,
        eval_pairs,
    };
    train(trainer, &WithEos(data), run)
}

fn read_pairs(path: &Path, vocab: &Vocab, max_len: usize) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (k, line) in read_lines(path, "pair file")?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| user(format!("{}:{}: expected `source<TAB>target`", path.display(), k + 1)))?;
        let source = vocab.encode(src);
        if source.is_empty() {
            return Err(user(format!("{}:{}: empty source", path.display(), k + 1)));
        }
        let mut target = vocab.encode(tgt);
        target.truncate(max_len - 1);
        pairs.push(Pair {
            source: source[..source.len().min(max_len)].to_vec(),
            target: with_eos(target),
        });
    }
    if pairs.is_empty() {
        return Err(user(format!("pair file {} is empty", path.display())));
    }
    Ok(pairs)
}

pub fn finetune(flags: TrainFlags, pairs: Option<PathBuf>, init: Option<PathBuf>) -> Result<ExitCode> {
    let mut rc = load_config(&flags)?;
    if pairs.is_some() {
        rc.paths.pairs = pairs;
    }
    if init.is_some() {
        rc.paths.init = init;
    }
    rc.train.task = Task::Finetune;
    let pairs_path = existing(&rc.paths.pairs, "pair file")?;
    let vocab_path = existing(&rc.paths.vocab, "vocab")?;
    let init_path = match &rc.paths.init {
        Some(_) => Some(existing(&rc.paths.init, "base checkpoint")?),
        None => None,
    };
    let ck_path = writable(&rc.paths.checkpoint, "checkpoint")?;
    let metrics = metrics_path(&rc, &ck_path)?;
    rc.train.validate()?;
    let vocab = Vocab::load(&vocab_path)?;

    let model = match &init_path {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_fingerprint(&ck, &vocab, path)?;
            let base = ck.model()?;
            if base.config.vocab_size != vocab.len() {
                return Err(user(format!(
                    "base checkpoint has {} vocabulary entries, vocabulary file has {}",
                    base.config.vocab_size,
                    vocab.len()
                )));
            }
            let changed = rc.model.architecture_changes(&base.config);
            if !changed.is_empty() {
                return Err(user(format!("cannot change {} of a pre-trained model", changed.join(", "))));
            }
            let ngram = rc.model.ngram.unwrap_or(base.config.ngram);
            let mut model = base.with_ngram(ngram, rc.train.seed)?;
            model.config = rc.model.apply(&model.config);
            model.config.validate()?;
            model
        }
        None => Model::new(fresh_model_config(&rc, &vocab)?, rc.train.seed)?,
    };
    let max_len = model.config.max_len;
    let pairs = read_pairs(&pairs_path, &vocab, max_len)?;
    let mut trainer = Trainer::new(model, rc.train.clone())?;
    trainer.vocab_fingerprint = Some(vocab.fingerprint());
    let data = PairData {
        pairs: pairs.clone(),
        batcher: Batcher::new(rc.train.batch_size, max_len, rc.train.seed)?,
    };
    let run = Run {
        rc: &rc,
        checkpoint: ck_path,
        metrics,
        append: false,
        eval_pairs: pairs,
    };
    train(trainer, &data, run)
}

pub fn generate(checkpoint: &Path, vocab: &Path, input: &Path, output: Option<&Path>, cfg: &BeamConfig) -> Result<ExitCode> {
    let checkpoint = existing(&Some(checkpoint.to_path_buf()), "checkpoint")?;
    let vocab_path = existing(&Some(vocab.to_path_buf()), "vocab")?;
    let input = existing(&Some(input.to_path_buf()), "input")?;
    if let Some(out) = output {
        writable(&Some(out.to_path_buf()), "output")?;
    }
    let ck = Checkpoint::load(&checkpoint)?;
    let vocab = Vocab::load(&vocab_path)?;
    check_fingerprint(&ck, &vocab, &checkpoint)?;
    let model = ck.model()?;
    let mut text = String::new();
    for line in read_lines(&input, "input")? {
        let mut source = vocab.encode(&line);
        source.truncate(model.config.max_len);
        if !source.is_empty() {
            let out = beam_search(&model, &source, cfg)?;
            text.push_str(&vocab.decode(&out.tokens));
        }
        text.push('\n');
    }
    match output {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(candidates: &Path, references: &Path) -> Result<ExitCode> {
    let c = read_lines(&existing(&Some(candidates.to_path_buf()), "candidate file")?, "candidate file")?;
    let r = read_lines(&existing(&Some(references.to_path_buf()), "reference file")?, "reference file")?;
    if c.len() != r.len() {
        return Err(user(format!("{} candidate lines but {} reference lines", c.len(), r.len())));
    }
    let report = EvalReport::from_lines(&c, &r)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(flip: Option<&str>) -> Result<ExitCode> {
    let flip = match flip {
        None => None,
        Some(name) => Some(OpKind::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
            let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            user(format!("unknown op `{name}`; one of {}", names.join(", ")))
        })?),
    };
    let summary = run_suite(flip)?;
    for r in &summary.reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:24} max rel err {:.3e} (tolerance {:.0e})", r.name, r.max_rel_err, r.tolerance);
    }
    if let Some(w) = summary.worst() {
        println!(
            "worst: {} input {} element {}: analytic {:.6e} numeric {:.6e} rel err {:.3e}",
            w.name, w.worst.0, w.worst.1, w.analytic, w.numeric, w.max_rel_err
        );
    }
    println!("time: {:.2} s", summary.seconds);
    if summary.passed() {
        println!("all gradients within tolerance");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradient check FAILED");
        Ok(ExitCode::from(1))
    }
}
