//! End-to-end runs: prepare batch files, train, evaluate, compare.

mod config;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

pub use config::{flag_value, Profile, RunConfig, SEED_ENV};

use crate::batchfile::{read_batch, write_batch, BatchLine};
use crate::constrained::{assemble, InjectedSequence};
use crate::encoder::{
    forward, load_checkpoint, save_checkpoint, train_step, Adam, Batch, Checkpoint, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::knowledge::{infer_column_types, link_entities, AnnotationStore, Gazetteer};
use crate::metrics::{decide, Metrics};
use crate::serializer::{PromptMode, Serializer};
use crate::stats::paired_ttest;
use crate::tabular::{load_pairs, load_table, write_text, LabeledPairSet, Split, Table};
use crate::tokenizer::{build_vocab, Tokenizer};

/// Runs `f` on a pool of `threads` workers, or on the global pool for 0.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Domain(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Tables and whichever pair splits are configured.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub table_a: Table,
    pub table_b: Table,
    pub splits: Vec<LabeledPairSet>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let table_a = load_table(cfg.table_a_path()?)?;
        let table_b = load_table(cfg.table_b_path()?)?;
        let mut splits = Vec::new();
        for split in Split::ALL {
            if let Some(path) = cfg.split_path(split) {
                splits.push(load_pairs(path, split, &table_a, &table_b)?);
            }
        }
        if splits.is_empty() {
            return Err(Error::Domain("no train, valid or test pair file configured".into()));
        }
        Ok(Inputs {
            table_a,
            table_b,
            splits,
        })
    }
}

/// Gathers knowledge from the configured providers. External annotations
/// override the rule typer and the gazetteer; the Ditto filter runs last.
pub fn build_store(cfg: &RunConfig, a: &Table, b: &Table) -> Result<AnnotationStore> {
    let mut store = AnnotationStore::new();
    if cfg.rule_typer {
        for t in [a, b] {
            for ann in infer_column_types(t) {
                store.set_column_type(ann);
            }
        }
    }
    if let Some(path) = &cfg.gazetteer {
        let gaz = Gazetteer::load(path)?;
        for t in [a, b] {
            for m in link_entities(t, &gaz) {
                store.add_mention(m)?;
            }
        }
    }
    if let Some(path) = &cfg.annotations {
        store.merge(AnnotationStore::load(path)?);
    }
    if let Some(mode) = cfg.ditto_mode {
        store.apply_ditto(mode);
    }
    Ok(store)
}

/// Serializes every pair of `pairs` into batch-file lines, in order.
pub fn encode_pairs(
    tokenizer: &Tokenizer,
    store: &AnnotationStore,
    mode: PromptMode,
    (a, b): (&Table, &Table),
    pairs: &LabeledPairSet,
    max_len: usize,
) -> Result<Vec<BatchLine>> {
    let ser = Serializer::new(tokenizer, store, mode);
    pairs
        .pairs
        .par_iter()
        .map(|p| {
            let left = a.get(&p.left_id).expect("pair ids were validated");
            let right = b.get(&p.right_id).expect("pair ids were validated");
            let input = ser.serialize_pair((a.name(), left), (b.name(), right), Some(p.label), max_len)?;
            if mode.is_template() {
                Ok(BatchLine::new(&input, None))
            } else {
                let inj = assemble(&input, max_len)?;
                Ok(BatchLine::new(&input, Some(&inj)))
            }
        })
        .collect()
}

/// Encoder inputs for every pair of `pairs`.
pub fn encode_sequences(
    tokenizer: &Tokenizer,
    store: &AnnotationStore,
    mode: PromptMode,
    tables: (&Table, &Table),
    pairs: &LabeledPairSet,
    max_len: usize,
) -> Result<Vec<InjectedSequence>> {
    encode_pairs(tokenizer, store, mode, tables, pairs, max_len)?
        .iter()
        .map(BatchLine::to_injected)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareReport {
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub lines: Vec<(Split, usize)>,
}

/// Writes `prepared/{split}.jsonl`, `prepared/vocab.tsv` and
/// `prepared/manifest.json` under the work directory.
pub fn run_prepare(cfg: &RunConfig) -> Result<PrepareReport> {
    with_threads(cfg.threads, || prepare_inner(cfg))?
}

fn prepare_inner(cfg: &RunConfig) -> Result<PrepareReport> {
    let inputs = Inputs::load(cfg)?;
    let store = build_store(cfg, &inputs.table_a, &inputs.table_b)?;
    let labels = store.labels();
    let tokenizer = build_vocab(
        &[&inputs.table_a, &inputs.table_b],
        cfg.min_count,
        labels.iter().map(String::as_str),
    );
    let vocab_hash = tokenizer.hash();
    tokenizer.save(cfg.vocab_path())?;

    let mut lines = Vec::new();
    let mut split_info = serde_json::Map::new();
    for set in &inputs.splits {
        let batch = encode_pairs(
            &tokenizer,
            &store,
            cfg.mode,
            (&inputs.table_a, &inputs.table_b),
            set,
            cfg.max_len,
        )
        .map_err(|e| Error::Domain(format!("{} split: {e}", set.split)))?;
        let path = cfg.batch_path(set.split);
        write_batch(&path, &batch)?;
        log::info!("{}: {} lines -> {}", set.split, batch.len(), path.display());
        split_info.insert(
            set.split.to_string(),
            json!({"pairs": batch.len(), "positives": set.positives(), "sha256": file_hash(&path)?}),
        );
        lines.push((set.split, batch.len()));
    }
    let hash_opt = |p: &Option<std::path::PathBuf>| p.as_deref().map(file_hash).transpose();
    let manifest = json!({
        "version": 1,
        "mode": cfg.mode,
        "max_len": cfg.max_len,
        "vocab_size": tokenizer.len(),
        "vocab_hash": vocab_hash,
        "inputs": {
            "table_a": file_hash(&cfg.table_a_path()?)?,
            "table_b": file_hash(&cfg.table_b_path()?)?,
        },
        "provenance": {
            "rule_typer": cfg.rule_typer,
            "gazetteer": hash_opt(&cfg.gazetteer)?,
            "annotations": hash_opt(&cfg.annotations)?,
            "ditto_mode": cfg.ditto_mode,
            "column_types": store.column_types().count(),
            "mentions": store.mention_count(),
        },
        "splits": split_info,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&cfg.manifest_path(), &text)?;
    Ok(PrepareReport {
        vocab_size: tokenizer.len(),
        vocab_hash,
        lines,
    })
}

/// Loads the prepared vocabulary and checks it against the manifest.
fn load_prepared_vocab(cfg: &RunConfig) -> Result<Tokenizer> {
    let path = cfg.manifest_path();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.line(), e.to_string()))?;
    let tokenizer = Tokenizer::load(cfg.vocab_path())?;
    if manifest["vocab_hash"].as_str() != Some(tokenizer.hash().as_str()) {
        return Err(Error::IncompatibleArtifacts(format!(
            "{} does not match the vocabulary hash in {}",
            cfg.vocab_path().display(),
            path.display()
        )));
    }
    Ok(tokenizer)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl From<&RunConfig> for TrainOptions {
    fn from(cfg: &RunConfig) -> Self {
        TrainOptions {
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            lr: cfg.lr,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Result of a training loop. On a numerical failure `params` holds the
/// last good parameters and `error` the failure.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: Vec<StepLog>,
    pub error: Option<Error>,
}

impl TrainOutcome {
    /// Mean loss over the steps of the last completed epoch.
    pub fn final_epoch_loss(&self) -> Option<f64> {
        let last = self.log.last()?.epoch;
        let losses: Vec<f64> = self.log.iter().filter(|s| s.epoch == last).map(|s| s.loss).collect();
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Minibatch Adam over `train`: each epoch visits a seeded shuffle in
/// batches of `batch_size` (the last batch may be short).
pub fn train_model(config: &EncoderConfig, train: &[InjectedSequence], opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut params = EncoderParams::init(config)?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_5EED_5EED_5EED);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let refs: Vec<&InjectedSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_sequences(&refs)?;
            let step_seed: u64 = rng.random();
            let dropout = (config.dropout_rate > 0.0).then_some(step_seed);
            match train_step(&batch, &mut params, &mut adam, opts.lr, dropout) {
                Ok(loss) => log.push(StepLog {
                    step: log.len(),
                    epoch,
                    loss: loss.value,
                }),
                Err(e @ Error::Numerical(_)) => {
                    return Ok(TrainOutcome {
                        params,
                        log,
                        error: Some(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        log::debug!("epoch {epoch} done, {} steps", log.len());
    }
    Ok(TrainOutcome {
        params,
        log,
        error: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_epoch_loss: Option<f64>,
}

/// Trains on the prepared train split and writes `checkpoint.bin` and
/// `loss_log.tsv`. A numerical failure still writes the last good
/// checkpoint before returning the error.
pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    with_threads(cfg.threads, || train_inner(cfg))?
}

fn train_inner(cfg: &RunConfig) -> Result<TrainReport> {
    let tokenizer = load_prepared_vocab(cfg)?;
    let train = read_batch(cfg.batch_path(Split::Train))?;
    let outcome = train_model(&cfg.encoder_config(tokenizer.len()), &train, &TrainOptions::from(cfg))?;
    save_checkpoint(
        cfg.checkpoint_path(),
        &Checkpoint {
            params: outcome.params.clone(),
            vocab_hash: tokenizer.hash(),
        },
    )?;
    let mut text = String::from("step\tepoch\tloss\n");
    for s in &outcome.log {
        text.push_str(&format!("{}\t{}\t{}\n", s.step, s.epoch, s.loss));
    }
    write_text(&cfg.loss_log_path(), &text)?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    Ok(TrainReport {
        steps: outcome.log.len(),
        final_epoch_loss: outcome.final_epoch_loss(),
    })
}

/// `p(match)` for every sequence, in order.
pub fn predict(params: &EncoderParams, seqs: &[InjectedSequence], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let labeled: Vec<InjectedSequence> = chunk
            .iter()
            .map(|s| InjectedSequence {
                label: Some(s.label.unwrap_or(0)),
                ..s.clone()
            })
            .collect();
        let refs: Vec<&InjectedSequence> = labeled.iter().collect();
        let probs = forward(&Batch::from_sequences(&refs)?, params)?;
        out.extend(probs.column(1).iter().copied());
    }
    Ok(out)
}

/// Thresholded predictions scored against the sequence labels.
pub fn evaluate(params: &EncoderParams, seqs: &[InjectedSequence], batch_size: usize) -> Result<Metrics> {
    let labels: Vec<u8> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or_else(|| Error::Domain(format!("sequence {i} has no label"))))
        .collect::<Result<_>>()?;
    let predicted: Vec<u8> = predict(params, seqs, batch_size)?.into_iter().map(decide).collect();
    Ok(Metrics::from_predictions(&predicted, &labels))
}

/// The JSON written for a metrics run.
pub fn metrics_json(m: &Metrics) -> String {
    json!({"precision": m.precision, "recall": m.recall, "f1": m.f1, "n": m.n}).to_string()
}

/// Evaluates the trained checkpoint on a prepared split and writes
/// `metrics_{split}.json`.
pub fn run_eval(cfg: &RunConfig, split: Split) -> Result<Metrics> {
    with_threads(cfg.threads, || eval_inner(cfg, split))?
}

fn eval_inner(cfg: &RunConfig, split: Split) -> Result<Metrics> {
    let tokenizer = load_prepared_vocab(cfg)?;
    let ck = load_checkpoint(cfg.checkpoint_path())?;
    if ck.vocab_hash != tokenizer.hash() {
        return Err(Error::IncompatibleArtifacts(format!(
            "checkpoint vocabulary {} differs from prepared vocabulary {}",
            ck.vocab_hash,
            tokenizer.hash()
        )));
    }
    let seqs = read_batch(cfg.batch_path(split))?;
    let m = evaluate(&ck.params, &seqs, cfg.batch_size)?;
    write_text(&cfg.metrics_path(split), &(metrics_json(&m) + "\n"))?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareReport {
    pub f1_a: f64,
    pub f1_b: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub sig_05: bool,
    pub sig_01: bool,
}

impl CompareReport {
    pub fn new(a: &Metrics, b: &Metrics) -> Result<Self> {
        let tt = paired_ttest(&a.per_example_correct, &b.per_example_correct)?;
        Ok(CompareReport {
            f1_a: a.f1,
            f1_b: b.f1,
            t: tt.t,
            df: tt.df,
            p: tt.p,
            sig_05: tt.p < 0.05,
            sig_01: tt.p < 0.01,
        })
    }
}

/// Runs prepare, train and eval for both configs and tests the difference
/// in per-example correctness on `split`. Identical work directories are
/// split into `a` and `b` subdirectories.
pub fn run_compare(a: &RunConfig, b: &RunConfig, split: Split) -> Result<CompareReport> {
    let (mut a, mut b) = (a.clone(), b.clone());
    if a.work_dir == b.work_dir {
        a.work_dir = a.work_dir.join("a");
        b.work_dir = b.work_dir.join("b");
    }
    let mut scores = Vec::with_capacity(2);
    for cfg in [&a, &b] {
        run_prepare(cfg)?;
        run_train(cfg)?;
        scores.push(run_eval(cfg, split)?);
    }
    CompareReport::new(&scores[0], &scores[1])
}

/// Knowledge the configured providers produce for the configured tables.
pub fn run_annotate(cfg: &RunConfig) -> Result<AnnotationStore> {
    let a = load_table(cfg.table_a_path()?)?;
    let b = load_table(cfg.table_b_path()?)?;
    build_store(cfg, &a, &b)
}
