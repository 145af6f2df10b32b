//! Training loop, pooled evaluation and batched inference.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use apd_autograd::{AdamW, AdamWConfig, NormMode, Scalar, Tape};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainNorm};
use crate::data::{augment, make_batch, Sample};
use crate::decoders::binarize;
use crate::encoder::PerturbMode;
use crate::error::{ApdError, Result};
use crate::metrics::ConfusionCounts;
use crate::model::ApdModel;
use crate::nn::{apply_bn_updates, Ctx};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// One line of the training log. Loss parts are unweighted; `total` is the optimized objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub l_ce: f64,
    pub l_deep: f64,
    pub l_comp: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_f1: Option<f64>,
}

/// Random stream for one iteration: batch choice, augmentation and perturbation
/// draws depend only on `(seed, iteration)`, so a resumed run replays exactly.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Per-sample change probabilities (`H * W` each), in input order.
pub fn predict_probs<T: Scalar>(model: &ApdModel<T>, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch::<T>(&refs)?;
        let inference = model.infer(&batch.x0, &batch.x1)?;
        let hw = chunk[0].height * chunk[0].width;
        out.extend(inference.prob.data().chunks(hw).map(<[T]>::to_vec));
    }
    Ok(out)
}

/// Pooled confusion counts of thresholded predictions.
pub fn evaluate<T: Scalar>(model: &ApdModel<T>, samples: &[Sample], batch_size: usize) -> Result<ConfusionCounts> {
    let probs = predict_probs(model, samples, batch_size)?;
    probs
        .iter()
        .zip(samples)
        .try_fold(ConfusionCounts::default(), |acc, (p, s)| acc.accumulate(&binarize(p), &s.label))
}

pub struct Trainer<T> {
    config: RunConfig,
    model: ApdModel<T>,
    optimizer: AdamW<T>,
    iteration: u64,
    best_val_f1: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = ApdModel::new(&config.model, config.train.seed)?;
        let optimizer = AdamW::new(adamw_config(config), model.store());
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            iteration: 0,
            best_val_f1: None,
        })
    }

    /// Continue from a checkpoint. The model is rebuilt from `config`, which
    /// normally echoes the checkpoint's own; only `optim.iterations` and paths
    /// are expected to differ.
    pub fn resume(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(config)?;
        ckpt.restore_params(trainer.model.store_mut())?;
        ckpt.restore_optimizer(trainer.model.store(), &mut trainer.optimizer)?;
        trainer.iteration = ckpt.header.iteration;
        trainer.best_val_f1 = ckpt.header.best_val_f1;
        Ok(trainer)
    }

    pub fn model(&self) -> &ApdModel<T> {
        &self.model
    }

    pub fn into_model(self) -> ApdModel<T> {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn best_val_f1(&self) -> Option<f64> {
        self.best_val_f1
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            self.model.store(),
            Some(&self.optimizer),
            self.iteration,
            self.best_val_f1,
        )
    }

    /// One optimization step on a freshly drawn batch.
    pub fn step(&mut self, train: &[Sample]) -> Result<LogRecord> {
        if train.is_empty() {
            return Err(ApdError::invalid("training set is empty"));
        }
        let cfg = &self.config;
        let mut rng = iteration_rng(cfg.train.seed, self.iteration);
        let picks = sample_indices(&mut rng, train.len(), cfg.optim.batch_size.min(train.len()));
        let augmented: Vec<Sample> = picks
            .iter()
            .map(|i| augment(&train[i], &cfg.train.augment, &mut rng))
            .collect();
        let refs: Vec<&Sample> = augmented.iter().collect();
        let batch = make_batch::<T>(&refs)?;

        let norm = match cfg.train.norm {
            TrainNorm::Batch => NormMode::Batch,
            TrainNorm::Running => NormMode::Running,
        };
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, self.model.store(), norm);
        let (pyramid, pred) = self.model.forward(
            &ctx,
            &tape.constant(batch.x0),
            &tape.constant(batch.x1),
            PerturbMode::Random(&mut rng),
        )?;
        let terms = self.model.loss(&pyramid, &pred, &batch.labels, &cfg.loss)?;
        let record = LogRecord {
            iter: self.iteration,
            l_ce: terms.change.item().as_f64(),
            l_deep: terms.deep_sum(),
            l_comp: terms.comparative.map_or(0.0, |c| c.item().as_f64()),
            total: terms.total.item().as_f64(),
            val_f1: None,
        };
        if ![record.l_ce, record.l_deep, record.l_comp, record.total].iter().all(|v| v.is_finite()) {
            return Err(ApdError::NonFiniteLoss {
                iteration: self.iteration,
                batch: batch.ids,
            });
        }
        let mut grads = tape.backward(terms.total)?;
        let grads = ctx.binder().gradients(&mut grads);
        let bn = ctx.take_bn_updates();
        drop(ctx);
        let lr = cfg.optim.lr_at(self.iteration);
        self.optimizer.step(self.model.store_mut(), &grads, lr);
        apply_bn_updates(self.model.store_mut(), bn)?;
        self.iteration += 1;
        Ok(record)
    }

    /// Train until `optim.iterations`, writing the log and checkpoints into `run_dir`.
    /// The log is appended to, so a resumed run continues the same file.
    pub fn run(&mut self, train: &[Sample], val: &[Sample], run_dir: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(run_dir).map_err(|e| ApdError::io(run_dir, e))?;
        let log_path = run_dir.join(LOG_FILE);
        let mut log = BufWriter::new(open_log(&log_path, self.iteration == 0)?);
        let total = self.config.optim.iterations;
        let every = self.config.train.val_every;
        while self.iteration < total {
            let mut record = match self.step(train) {
                Ok(r) => r,
                Err(e) => {
                    let _ = log.flush();
                    return Err(e);
                }
            };
            let done = self.iteration;
            let validate = !val.is_empty() && every > 0 && (done.is_multiple_of(every) || done == total);
            if validate {
                let f1 = evaluate(&self.model, val, self.config.optim.batch_size)?.summarize().f1;
                record.val_f1 = Some(f1);
                log::info!("iter {done}/{total} loss {:.4} val_f1 {f1:.4}", record.total);
                if self.best_val_f1.is_none_or(|b| f1 > b) {
                    self.best_val_f1 = Some(f1);
                    self.checkpoint().save(&run_dir.join(BEST_CHECKPOINT))?;
                }
                self.checkpoint().save(&run_dir.join(LAST_CHECKPOINT))?;
            }
            serde_json::to_writer(&mut log, &record).map_err(|e| ApdError::Internal(e.to_string()))?;
            log.write_all(b"\n").map_err(|e| ApdError::io(&log_path, e))?;
        }
        log.flush().map_err(|e| ApdError::io(&log_path, e))?;
        let last = run_dir.join(LAST_CHECKPOINT);
        self.checkpoint().save(&last)?;
        if self.best_val_f1.is_none() {
            self.checkpoint().save(&run_dir.join(BEST_CHECKPOINT))?;
        }
        Ok(TrainSummary {
            iterations: self.iteration,
            best_val_f1: self.best_val_f1,
            log: log_path,
            last_checkpoint: last,
            best_checkpoint: run_dir.join(BEST_CHECKPOINT),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub best_val_f1: Option<f64>,
    pub log: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn adamw_config(config: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: config.optim.beta1,
        beta2: config.optim.beta2,
        eps: config.optim.eps,
        weight_decay: config.optim.weight_decay,
    }
}

fn open_log(path: &Path, truncate: bool) -> Result<File> {
    let mut opts = OpenOptions::new();
    opts.create(true);
    if truncate {
        opts.write(true).truncate(true);
    } else {
        opts.append(true);
    }
    opts.open(path).map_err(|e| ApdError::io(path, e))
}

/// Parse a training log written by [`Trainer::run`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| ApdError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| ApdError::Load {
                path: path.into(),
                reason: e.to_string(),
            })
        })
        .collect()
}
