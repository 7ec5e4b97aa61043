//! Pre-training loop.
//!
//! Batch order, masks and ITM negatives are all addressed by
//! `(seed, step, slot)` through counter-based streams, so a resumed run
//! needs no saved RNG state to continue the uninterrupted loss curve.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::RunConfig;
use super::data::{build_vocab, make_sample, prepare_studies, PreparedStudy};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::optim::AdamW;
use crate::model::params::{ModelDims, ModelParams};
use crate::objectives::{batch_loss, negative_pairing, LossReport};
use crate::rng::{CounterRng, Stream};
use crate::text::Vocabulary;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `out_dir/model.ckpt` if present.
    pub resume: bool,
    /// Stop (and checkpoint) after this many total steps.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub dims: ModelDims,
    pub vocab: Vocabulary,
    /// Reports of the steps run in this invocation.
    pub reports: Vec<LossReport>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Dataset index for every `(step, slot)`: each epoch is a fresh seeded
/// permutation and batches run across epoch boundaries.
pub struct BatchOrder {
    n: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, cached: None }
    }

    pub fn batch(&mut self, step: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|slot| {
                let pos = (step * batch_size + slot) as u64;
                let epoch = pos / self.n as u64;
                let perm = match &self.cached {
                    Some((e, p)) if *e == epoch => p,
                    _ => {
                        let mut p: Vec<usize> = (0..self.n).collect();
                        p.shuffle(&mut CounterRng::for_stream(self.seed, Stream::BatchOrder, &[epoch]));
                        &self.cached.insert((epoch, p)).1
                    }
                };
                perm[(pos % self.n as u64) as usize]
            })
            .collect()
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss log truncated to the first `steps` lines.
fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text.split_inclusive('\n').take(steps as usize).collect();
    write_file(path, &kept)
}

pub fn pretrain(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let studies = prepare_studies(&cfg.train_data, cfg)?;
    let vocab = build_vocab(&studies, cfg)?;
    pretrain_on(cfg, opts, &studies, vocab)
}

/// Same as [`pretrain`] with the data already in memory.
pub fn pretrain_on(
    cfg: &RunConfig,
    opts: &TrainOptions,
    studies: &[PreparedStudy],
    vocab: Vocabulary,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if studies.is_empty() {
        return Err(Error::Validation("no training studies".into()));
    }
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOSS_LOG_FILE);
    vocab.save(out.join(VOCAB_FILE))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml())?;

    let dims = cfg.dims(vocab.len());
    let hash = cfg.hash();
    let (mut params, mut opt, start) = if opts.resume && ckpt_path.exists() {
        let c = Checkpoint::load(&ckpt_path, &ModelParams::zeros(&dims), Some(&hash))?;
        (c.params, c.optimizer, c.step)
    } else {
        let p = ModelParams::init(&dims, cfg.seed);
        let o = AdamW::new(&p);
        (p, o, 0)
    };
    truncate_log(&log_path, start)?;
    let mut log = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let end = opts.stop_after.unwrap_or(cfg.steps).min(cfg.steps) as u64;
    let mut order = BatchOrder::new(studies.len(), cfg.seed);
    let mut reports = Vec::new();
    let save = |params: &ModelParams, opt: &AdamW, step: u64| {
        Checkpoint {
            config_hash: hash,
            step,
            params: params.clone(),
            optimizer: opt.clone(),
        }
        .save(&ckpt_path)
    };
    for step in start..end {
        let idx = order.batch(step as usize, cfg.batch_size);
        let batch = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| make_sample(&studies[i], &vocab, cfg, step, slot as u64))
            .collect::<Result<Vec<_>>>()?;
        let negatives = negative_pairing(batch.len(), cfg.seed, step);
        let tau = params.tau();
        let (report, grads) = batch_loss(&params, &dims, &batch, negatives.as_deref(), true)?;
        let grads = grads.expect("requested");
        let finite = report.total.is_finite() && grads.all_finite();
        let stepped = if finite {
            let mut next = params.clone();
            let mut next_opt = opt.clone();
            next_opt
                .step(&mut next, &grads, cfg.lr_at(step as usize), cfg.weight_decay)
                .map(|_| (next, next_opt))
        } else {
            Err(Error::NonFinite(format!("loss {} at step {step}", report.total)))
        };
        let (next, next_opt) = match stepped {
            Ok(pair) if pair.0.all_finite() && pair.0.tau().is_finite() => pair,
            Ok(_) => {
                save(&params, &opt, step)?;
                return Err(Error::NonFinite(format!(
                    "parameters diverged at step {step}; last good state saved to {}",
                    ckpt_path.display()
                )));
            }
            Err(e) => {
                save(&params, &opt, step)?;
                return Err(Error::NonFinite(format!(
                    "{e}; last good state saved to {}",
                    ckpt_path.display()
                )));
            }
        };
        params = next;
        opt = next_opt;
        writeln!(log, "{}", report.to_json_line(step, tau)).map_err(|e| Error::io(&log_path, e))?;
        reports.push(report);
    }
    save(&params, &opt, end.max(start))?;
    Ok(TrainOutcome {
        params,
        dims,
        vocab,
        reports,
        checkpoint: ckpt_path,
        loss_log: log_path,
    })
}

/// Loads a finished run: config-hash-checked parameters plus vocabulary.
pub fn load_run(cfg: &RunConfig, checkpoint: &Path) -> Result<(ModelParams, ModelDims, Vocabulary)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    let dims = cfg.dims(vocab.len());
    let c = Checkpoint::load(checkpoint, &ModelParams::zeros(&dims), Some(&cfg.hash()))?;
    Ok((c.params, dims, vocab))
}
