//! Training loop, evaluation and checkpoint round-trips.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, ParamState};
use crate::config::RunConfig;
use crate::data::{augment::augment, batch, sample_rng, Sample};
use crate::decoder::bce_loss;
use crate::error::{Error, Result};
use crate::metrics::{binarize, report, ConfusionCounts, MetricsReport};
use crate::model::FaNet;
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig, StepSchedule};
use crate::tensor::{save_ftns, Tensor};

const SHUFFLE_STREAM: u64 = 0x5348_5546_4c45;
const AUGMENT_STREAM: u64 = 0x4155_474d_454e;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub batch_losses: Vec<f32>,
}

impl EpochStats {
    pub fn mean_loss(&self) -> f64 {
        if self.batch_losses.is_empty() {
            return 0.0;
        }
        self.batch_losses.iter().map(|&l| l as f64).sum::<f64>() / self.batch_losses.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub stats: EpochStats,
    pub metrics: Option<MetricsReport>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub store: ParamStore,
    pub net: FaNet,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_iou: f64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.train.seed);
        let net = FaNet::new(&mut store, config.model.clone())?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.train.lr,
                ..AdamConfig::default()
            },
            &store,
        )?;
        Ok(Trainer {
            config,
            store,
            net,
            adam,
            epoch: 0,
            best_iou: f64::NEG_INFINITY,
        })
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.config.train.lr,
            factor: self.config.train.decay_factor,
            every: self.config.train.decay_every,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .store
            .iter()
            .map(|(id, p)| ParamState {
                name: p.name.clone(),
                value: p.value.clone(),
                first: self.adam.first[id.index()].clone(),
                second: self.adam.second[id.index()].clone(),
            })
            .collect();
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch as u64,
            adam_step: self.adam.step,
            best_iou: self.best_iou,
            params,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config)?;
        if ck.params.len() != t.store.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                ck.params.len(),
                t.store.len()
            )));
        }
        for p in ck.params {
            let id = t
                .store
                .find(&p.name)
                .ok_or_else(|| Error::Validation(format!("checkpoint parameter {} is not in the model", p.name)))?;
            if t.store.get(id).value.shape() != p.value.shape() {
                return Err(Error::Validation(format!(
                    "{}: checkpoint shape {} differs from model shape {}",
                    p.name,
                    p.value.shape(),
                    t.store.get(id).value.shape()
                )));
            }
            *t.store.value_mut(id) = p.value;
            t.adam.first[id.index()] = p.first;
            t.adam.second[id.index()] = p.second;
        }
        t.adam.step = ck.adam_step;
        t.epoch = ck.epoch as usize;
        t.best_iou = ck.best_iou;
        Ok(t)
    }

    /// One Adam step on a batch; returns the loss before the update.
    pub fn step(&mut self, images: &Tensor<f32>, masks: &Tensor<f32>, lr: f64) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let bind = self.store.bind(&mut tape);
        let x = tape.constant(images.clone());
        let map = self.net.forward(&mut tape, &bind, x)?;
        let loss = bce_loss(&mut tape, &map, masks)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        self.store.zero_grads();
        self.store.accumulate_grads(&grads, &bind);
        self.adam.step(&mut self.store, lr)?;
        Ok(value)
    }

    /// Order in which epoch `epoch` visits `n` samples.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sample_rng(self.config.train.seed ^ SHUFFLE_STREAM, epoch as u64));
        order
    }

    pub fn train_epoch(&mut self, data: &[Sample], dump_dir: Option<&Path>) -> Result<EpochStats> {
        let epoch = self.epoch + 1;
        let lr = self.schedule().lr_at(epoch);
        let order = self.epoch_order(epoch, data.len());
        let bs = self.config.train.batch_size;
        let aug_seed = self.config.train.seed ^ AUGMENT_STREAM;
        let mut losses = Vec::with_capacity(order.len().div_ceil(bs));
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let items: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if self.config.train.augment {
                        augment(&data[i], aug_seed, (epoch * data.len() + i) as u64)
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = items.iter().collect();
            let (images, masks) = batch(&refs)?;
            match self.step(&images, &masks, lr) {
                Ok(l) => losses.push(l),
                Err(Error::Numerical(why)) => {
                    let mut msg = format!("{why} at epoch {epoch}, batch {bi} (samples {chunk:?})");
                    if let Some(dir) = dump_dir {
                        let stem = dir.join(format!("nan_epoch{epoch}_batch{bi}"));
                        let img = stem.with_extension("images.ftns");
                        let msk = stem.with_extension("masks.ftns");
                        save_ftns(&img, &images)?;
                        save_ftns(&msk, &masks)?;
                        let _ = write!(msg, "; batch dumped to {} and {}", img.display(), msk.display());
                    }
                    return Err(Error::Numerical(msg));
                }
                Err(e) => return Err(e),
            }
        }
        self.epoch = epoch;
        Ok(EpochStats {
            epoch,
            lr,
            batch_losses: losses,
        })
    }

    /// Probabilities `(B,1,H,W)` for a batch of images.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        predict_probabilities(&self.net, &self.store, images)
    }

    pub fn evaluate(&self, data: &[Sample]) -> Result<MetricsReport> {
        evaluate(&self.net, &self.store, data, self.config.train.batch_size)
    }

    /// Train until `train.epochs`, evaluating on `val` (or `train` when `val`
    /// is empty) after every epoch. With `out`, writes `last.ckpt`,
    /// `best.ckpt` and appends to `train_log.tsv`.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<()> {
        let log_path = out.map(|d| d.join("train_log.tsv"));
        if let Some(p) = &log_path {
            if self.epoch == 0 {
                std::fs::write(p, "epoch\tlr\tloss\tiou\tf1\tprecision\trecall\n").map_err(|e| Error::io(p, e))?;
            }
        }
        if let Some(dir) = out {
            if self.epoch == 0 {
                self.checkpoint().save(&dir.join("last.ckpt"))?;
            }
        }
        let eval_set = if val.is_empty() { train } else { val };
        while self.epoch < self.config.train.epochs {
            let stats = self.train_epoch(train, out)?;
            let metrics = if eval_set.is_empty() {
                None
            } else {
                Some(self.evaluate(eval_set)?)
            };
            let entry = EpochLog { stats, metrics };
            if let Some(dir) = out {
                let mut line = format!("{}\t{:e}\t{:.6}", entry.stats.epoch, entry.stats.lr, entry.stats.mean_loss());
                if let Some(m) = &entry.metrics {
                    let _ = write!(line, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", m.iou, m.f1, m.precision, m.recall);
                }
                line.push('\n');
                let p = log_path.as_ref().expect("set with out");
                append(p, &line)?;
                if let Some(m) = &entry.metrics {
                    if m.iou > self.best_iou {
                        self.best_iou = m.iou;
                        self.checkpoint().save(&dir.join("best.ckpt"))?;
                    }
                }
                self.checkpoint().save(&dir.join("last.ckpt"))?;
            } else if let Some(m) = &entry.metrics {
                self.best_iou = self.best_iou.max(m.iou);
            }
            on_epoch(&entry);
        }
        Ok(())
    }
}

fn append(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn predict_probabilities(net: &FaNet, store: &ParamStore, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bind = store.bind_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let map = net.forward(&mut tape, &bind, x)?;
    Ok(tape.value(map.probabilities).clone())
}

/// Micro-averaged metrics of the thresholded predictions over `data`.
pub fn evaluate(net: &FaNet, store: &ParamStore, data: &[Sample], batch_size: usize) -> Result<MetricsReport> {
    let mut counts = ConfusionCounts::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = batch(&refs)?;
        let probs = predict_probabilities(net, store, &images)?;
        let pred = binarize(&probs, net.config.threshold)?;
        let truth: Vec<u8> = masks.data().iter().map(|&v| v as u8).collect();
        counts.accumulate(&pred.data, &truth)?;
    }
    Ok(report(counts))
}
