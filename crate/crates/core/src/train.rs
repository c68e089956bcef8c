//! Minibatch training with AdamW, cosine decay and per-epoch logging.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::dataset::{Sample, Tokenizers};
use crate::error::{invalid, Error, Result};
use crate::layout::{assemble, Mode};
use crate::model::{feature_maps, Dropout, Model};
use crate::optim::{cosine_multiplier, global_norm, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Number of most recent epoch checkpoints kept on disk.
    pub keep_checkpoints: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            clip_norm: 1.0,
            keep_checkpoints: 5,
            seed: 0,
        }
    }
}

/// Mean losses over one pass of a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub gen_ce: f64,
    pub cls_bce: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub gen_ce: f64,
    pub cls_bce: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Loss of the untrained model over the training split.
    pub initial: EpochLoss,
    pub log: Vec<LogRow>,
    /// Paths of the retained checkpoints, oldest first (empty without an
    /// output directory).
    pub checkpoints: Vec<PathBuf>,
}

/// Seeded source of segment orders for evaluation losses.
const EVAL_ORDER_SEED: u64 = 0x5eed;

/// Loss of `model` over `samples` without dropout. Segment orders come from
/// a fixed stream so repeated calls agree exactly.
pub fn evaluate_loss(model: &Model, samples: &[Sample]) -> Result<EpochLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_ORDER_SEED);
    let mut acc = EpochLoss::default();
    if samples.is_empty() {
        return Ok(acc);
    }
    let w = model.leaves();
    for s in samples {
        let seq = assemble_train(model, s, &mut rng)?;
        let parts = model.loss(&w, &seq, &s.labels, None)?;
        acc.gen_ce += parts.gen_ce;
        acc.cls_bce += parts.cls_bce;
        acc.total += parts.total.item();
    }
    let n = samples.len() as f64;
    Ok(EpochLoss {
        gen_ce: acc.gen_ce / n,
        cls_bce: acc.cls_bce / n,
        total: acc.total / n,
    })
}

fn assemble_train(model: &Model, s: &Sample, rng: &mut ChaCha8Rng) -> Result<crate::layout::AssembledSequence> {
    assemble(
        &model.config.vocab,
        model.config.geometry,
        Some(&s.report),
        Some(&s.image),
        s.prior_image.as_deref(),
        s.delta,
        Mode::Train,
        rng,
    )
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_log_to(rows, std::fs::File::create(path)?)
}

/// Trains `model` in place on `train`, logging `train` and `val` losses each
/// epoch. With `out_dir`, writes `train_log.csv` and keeps the last
/// `keep_checkpoints` epoch checkpoints as `epoch_XXXX.ckpt`.
pub fn train(
    mut model: Model,
    tokenizers: &Tokenizers,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, p)| p.data.len()).collect();
    let mut opt = AdamW::new(cfg.optimizer, &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let initial = evaluate_loss(&model, train)?;
    let mut log = Vec::new();
    let mut kept: Vec<PathBuf> = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_acc = EpochLoss::default();
        for batch in indices.chunks(cfg.batch_size) {
            if model.config.redraw_features {
                model.feature_maps = feature_maps(&model.config, cfg.seed ^ (step as u64 + 1))?;
            }
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
            let scale = 1.0 / batch.len() as f64;
            let mut batch_total = 0.0;
            for &i in batch {
                let s = &train[i];
                let seq = assemble_train(&model, s, &mut order_rng)?;
                let w = model.leaves();
                let dropout = Dropout {
                    rate: model.config.dropout,
                    rng: &mut dropout_rng,
                };
                let parts = model.loss(&w, &seq, &s.labels, Some(dropout))?;
                let total = parts.total.item();
                batch_total += total;
                epoch_acc.gen_ce += parts.gen_ce;
                epoch_acc.cls_bce += parts.cls_bce;
                epoch_acc.total += total;
                parts.total.backward()?;
                for (g, (_, leaf)) in grads.iter_mut().zip(w.named()) {
                    if let Some(lg) = leaf.grad() {
                        g.iter_mut().zip(&lg).for_each(|(a, b)| *a += scale * b);
                    }
                }
            }
            let lr = cfg.optimizer.lr * cosine_multiplier(step, total_steps);
            let views: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let norm = global_norm(&views);
            if !batch_total.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    lr,
                    grad_norm: norm,
                });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                let c = cfg.clip_norm / norm;
                grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= c));
            }
            let views: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f64]> = model
                .params
                .values_mut()
                .into_iter()
                .map(|p| p.data.as_mut_slice())
                .collect();
            opt.step(&mut params, &views, lr);
            step += 1;
        }
        let n = train.len() as f64;
        let train_row = LogRow {
            epoch,
            split: "train".into(),
            gen_ce: epoch_acc.gen_ce / n,
            cls_bce: epoch_acc.cls_bce / n,
            total: epoch_acc.total / n,
        };
        progress(&train_row);
        let v = evaluate_loss(&model, val)?;
        let val_row = LogRow {
            epoch,
            split: "val".into(),
            gen_ce: v.gen_ce,
            cls_bce: v.cls_bce,
            total: v.total,
        };
        progress(&val_row);
        let train_loss = train_row.total;
        log.push(train_row);
        log.push(val_row);

        if let Some(dir) = out_dir {
            write_log(&dir.join("train_log.csv"), &log)?;
            if epoch + cfg.keep_checkpoints > cfg.epochs {
                let path = dir.join(format!("epoch_{epoch:04}.ckpt"));
                Checkpoint {
                    model: model.clone(),
                    tokenizers: tokenizers.clone(),
                    meta: TrainingMeta {
                        epoch,
                        step,
                        seed: cfg.seed,
                        train_loss,
                    },
                }
                .save(&path)?;
                kept.push(path);
                while kept.len() > cfg.keep_checkpoints {
                    std::fs::remove_file(kept.remove(0))?;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        initial,
        log,
        checkpoints: kept,
    })
}

/// Writes loss rows as CSV to any sink (header included).
pub fn write_log_to(rows: &[LogRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
