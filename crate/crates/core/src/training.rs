//! Source (patch) and target (bag) training loops.
//!
//! Plain mini-batch SGD on binary cross-entropy. Every random choice (init,
//! shuffle order, instance dropout) comes from the run seed, and per-sample
//! gradients are summed in sample order, so equal seeds give bit-identical
//! models and logs.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{instance_dropout_indices, DropoutMode};
use crate::error::{Error, Result};
use crate::heads::TUMOR_CLASS;
use crate::mil::{Aggregation, Bag, TargetModel, DEFAULT_ATTENTION_DIM, MAX_BAG_SIZE};
use crate::model::{Architecture, SourceModel};
use crate::nn::Binding;
use crate::seed::rng_for;
use crate::tensor::{Gradients, Parameter, Sgd, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Classical momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Balance classes each epoch by dropping non-tumor tiles.
    pub instance_dropout: bool,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 120,
            lr: 0.001,
            batch_size: 64,
            momentum: 0.0,
            seed: 0,
            instance_dropout: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub bag_cap: usize,
    pub aggregation: Aggregation,
    pub attention_dim: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    /// When set, the source checkpoint must match this architecture.
    pub architecture: Option<Architecture>,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        TargetTrainConfig {
            epochs: 100,
            lr: 0.001,
            momentum: 0.0,
            bag_cap: MAX_BAG_SIZE,
            aggregation: Aggregation::Bgas,
            attention_dim: DEFAULT_ATTENTION_DIM,
            seed: 0,
            freeze_backbone: false,
            architecture: None,
        }
    }
}

fn check_hyper(epochs: usize, lr: f64, momentum: f64) -> Result<()> {
    if epochs == 0 {
        return Err(Error::config("epochs must be positive"));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config(format!("learning rate {lr} must be finite and non-negative")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config(format!("momentum {momentum} must be in [0, 1)")));
    }
    Ok(())
}

impl SourceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_hyper(self.epochs, self.lr, self.momentum)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

impl TargetTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_hyper(self.epochs, self.lr, self.momentum)?;
        if self.bag_cap == 0 || self.bag_cap > MAX_BAG_SIZE {
            return Err(Error::config(format!("bag cap {} must be in 1..={MAX_BAG_SIZE}", self.bag_cap)));
        }
        if self.attention_dim == 0 {
            return Err(Error::config("attention dimension must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Validation,
}

impl fmt::Display for LogSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogSplit::Train => "train",
            LogSplit::Validation => "validation",
        })
    }
}

/// One CSV row of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: LogSplit,
    pub loss: f64,
    pub acc: f64,
}

pub fn write_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes a log to any writer; used for stdout summaries.
pub fn write_log_to(w: impl Write, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// A tile image with its region label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image: Tensor,
    pub is_tumor: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedSource {
    /// Weights from the retained epoch.
    pub model: SourceModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainedTarget {
    pub model: TargetModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Gradient of every parameter (zeros where unreached), in parameter order.
fn grads_of(b: &Binding<'_>, grads: &Gradients, params: &[&Parameter]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| {
            b.get(&p.name)
                .and_then(|v| grads.wrt(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.tensor.len()])
        })
        .collect()
}

/// Sums per-sample gradients in order, scales them and stores them on the parameters.
fn apply_mean_grads(params: Vec<&mut Parameter>, per_sample: Vec<Vec<Vec<f64>>>) -> Result<()> {
    let n = per_sample.len() as f64;
    let mut total: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    for sample in &per_sample {
        for (t, g) in total.iter_mut().zip(sample) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    for (p, mut g) in params.into_iter().zip(total) {
        g.iter_mut().for_each(|v| *v /= n);
        p.tensor.clear_grad();
        p.accumulate_grad(&g)?;
    }
    Ok(())
}

/// Keeps the first epoch reaching the best validation accuracy.
struct BestTracker<M> {
    best: Option<(usize, f64, M)>,
}

impl<M: Clone> BestTracker<M> {
    fn offer(&mut self, epoch: usize, acc: f64, model: &M) {
        if self.best.as_ref().is_none_or(|(_, best, _)| acc > *best) {
            self.best = Some((epoch, acc, model.clone()));
        }
    }
}

fn source_loss_and_grads(model: &SourceModel, params: &[&Parameter], s: &PatchSample) -> Result<(f64, bool, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let mut b = Binding::training(&tape);
    let x = tape.constant(&s.image);
    let probs = model.forward(&mut b, x)?;
    let p = tape.select(probs, TUMOR_CLASS)?;
    let correct = (p.item() >= 0.5) == s.is_tumor;
    let loss = tape.bce(p, if s.is_tumor { 1.0 } else { 0.0 })?;
    let value = loss.item();
    let grads = tape.backward(loss)?;
    Ok((value, correct, grads_of(&b, &grads, params)))
}

/// Mean BCE and accuracy of a source model on labelled tiles.
pub fn evaluate_source(model: &SourceModel, samples: &[PatchSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let rows = samples
        .par_iter()
        .map(|s| {
            let p = model.predict(&s.image)?;
            let y = if s.is_tumor { 1.0 } else { 0.0 };
            Ok((bce_value(p.p_tumor, y), p.is_tumor() == s.is_tumor))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok((
        rows.iter().map(|r| r.0).sum::<f64>() / n,
        rows.iter().filter(|r| r.1).count() as f64 / n,
    ))
}

fn bce_value(p: f64, y: f64) -> f64 {
    let p = p.clamp(crate::tensor::BCE_EPSILON, 1.0 - crate::tensor::BCE_EPSILON);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Trains the patch-level model from scratch.
///
/// With a non-empty validation set the weights of the best validation epoch
/// (earliest on ties) are kept; otherwise the last epoch's.
pub fn train_source(
    arch: &Architecture,
    train: &[PatchSample],
    validation: &[PatchSample],
    config: &SourceTrainConfig,
) -> Result<TrainedSource> {
    let model = SourceModel::init(arch, &mut rng_for(config.seed, "source_init", 0))?;
    train_source_from(model, train, validation, config)
}

/// Like [`train_source`] but starting from given weights.
pub fn train_source_from(
    mut model: SourceModel,
    train: &[PatchSample],
    validation: &[PatchSample],
    config: &SourceTrainConfig,
) -> Result<TrainedSource> {
    config.validate()?;
    let n_tumor = train.iter().filter(|s| s.is_tumor).count();
    if n_tumor == 0 || n_tumor == train.len() {
        return Err(Error::contract(format!(
            "source training needs both classes, got {n_tumor} tumor of {} tiles",
            train.len()
        )));
    }
    let labels: Vec<bool> = train.iter().map(|s| s.is_tumor).collect();
    let mut opt = Sgd::new(config.lr, config.momentum);
    let mut log = Vec::new();
    let mut best = BestTracker { best: None };

    for epoch in 1..=config.epochs {
        let mode = if config.instance_dropout { DropoutMode::Train } else { DropoutMode::Eval };
        let mut order = instance_dropout_indices(&labels, config.seed, epoch as u64, mode);
        order.shuffle(&mut rng_for(config.seed, "source_shuffle", epoch as u64));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let params: Vec<&Parameter> = model.params();
            let results = batch
                .par_iter()
                .map(|&i| source_loss_and_grads(&model, &params, &train[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut per_sample = Vec::with_capacity(results.len());
            for (l, c, g) in results {
                loss_sum += l;
                correct += c as usize;
                per_sample.push(g);
            }
            apply_mean_grads(model.params_mut(), per_sample)?;
            opt.step(model.params_mut())?;
        }
        let n = order.len() as f64;
        log.push(EpochLog {
            epoch,
            split: LogSplit::Train,
            loss: loss_sum / n,
            acc: correct as f64 / n,
        });
        if !validation.is_empty() {
            let (loss, acc) = evaluate_source(&model, validation)?;
            log.push(EpochLog {
                epoch,
                split: LogSplit::Validation,
                loss,
                acc,
            });
            best.offer(epoch, acc, &model);
        }
        log::debug!("source epoch {epoch}: {:?}", &log[log.len() - 1]);
    }

    let (model, best_epoch) = match best.best {
        Some((e, _, m)) => (m, Some(e)),
        None => (model, None),
    };
    let checkpoint = Checkpoint::from_source(&model, config.seed, config.epochs, best_epoch);
    Ok(TrainedSource {
        model,
        checkpoint,
        log,
        best_epoch,
    })
}

/// Builds the target model from a source checkpoint. The source classifier is
/// discarded; pooling and bag classifier are initialised from the seed.
pub fn init_target(source: &Checkpoint, config: &TargetTrainConfig) -> Result<TargetModel> {
    if let Some(arch) = &config.architecture {
        source.check_architecture(arch)?;
    }
    let src = source.to_source()?;
    let mut model = TargetModel::from_source(
        &src,
        config.aggregation,
        config.attention_dim,
        &mut rng_for(config.seed, "target_init", 0),
    )?;
    model.set_backbone_frozen(config.freeze_backbone);
    Ok(model)
}

fn bag_loss_and_grads(
    model: &TargetModel,
    params: &[&Parameter],
    bag: &Bag<Tensor>,
    embeddings: Option<&Tensor>,
) -> Result<(f64, bool, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let mut b = Binding::training(&tape);
    let (p, _) = match embeddings {
        Some(h) => {
            let hv = tape.constant(h);
            model.forward_embeddings(&mut b, hv)?
        }
        None => {
            let xs: Vec<_> = bag.instances.iter().map(|x| tape.constant(x)).collect();
            model.forward(&mut b, &xs)?
        }
    };
    let y = bag.label.as_f64();
    let correct = (p.item() >= 0.5) == bag.label.is_positive();
    let loss = tape.bce(p, y)?;
    let value = loss.item();
    let grads = tape.backward(loss)?;
    Ok((value, correct, grads_of(&b, &grads, params)))
}

/// Mean BCE and accuracy of a target model over bags, from embeddings.
pub fn evaluate_target_embeddings(model: &TargetModel, bags: &[(Tensor, bool)]) -> Result<(f64, f64)> {
    if bags.is_empty() {
        return Err(Error::contract("evaluation needs at least one bag"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (h, positive) in bags {
        let p = model.predict_embeddings(h)?;
        loss += bce_value(p.probability, if *positive { 1.0 } else { 0.0 });
        correct += (p.label().is_positive() == *positive) as usize;
    }
    let n = bags.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn evaluate_target(model: &TargetModel, bags: &[Bag<Tensor>]) -> Result<(f64, f64)> {
    let embedded = bags
        .iter()
        .map(|b| Ok((model.embed_bag(b)?, b.label.is_positive())))
        .collect::<Result<Vec<_>>>()?;
    evaluate_target_embeddings(model, &embedded)
}

fn check_bags(bags: &[Bag<Tensor>], cap: usize) -> Result<()> {
    for b in bags {
        if b.is_empty() || b.len() > cap {
            return Err(Error::contract(format!(
                "bag '{}' has {} instances, allowed 1..={cap}",
                b.slide_id,
                b.len()
            )));
        }
    }
    Ok(())
}

/// Trains the slide-level model, one SGD step per bag.
///
/// With `freeze_backbone` the backbone and head never change, so instance
/// embeddings are computed once and reused; the result is identical to
/// running the full forward pass every step.
pub fn train_target(
    source: &Checkpoint,
    train: &[Bag<Tensor>],
    validation: &[Bag<Tensor>],
    config: &TargetTrainConfig,
) -> Result<TrainedTarget> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("target training needs at least one bag"));
    }
    check_bags(train, config.bag_cap)?;
    check_bags(validation, config.bag_cap)?;
    let mut model = init_target(source, config)?;
    let mut opt = Sgd::new(config.lr, config.momentum);

    let cached: Option<Vec<Tensor>> = if config.freeze_backbone {
        Some(train.iter().map(|b| model.embed_bag(b)).collect::<Result<_>>()?)
    } else {
        None
    };
    let val_cached: Option<Vec<(Tensor, bool)>> = if config.freeze_backbone {
        Some(
            validation
                .iter()
                .map(|b| Ok((model.embed_bag(b)?, b.label.is_positive())))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut log = Vec::new();
    let mut best = BestTracker { best: None };
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(config.seed, "target_shuffle", epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for &i in &order {
            let params: Vec<&Parameter> = model.params();
            let h = cached.as_ref().map(|c| &c[i]);
            let (l, c, g) = bag_loss_and_grads(&model, &params, &train[i], h)?;
            loss_sum += l;
            correct += c as usize;
            apply_mean_grads(model.params_mut(), vec![g])?;
            opt.step(model.params_mut())?;
        }
        let n = order.len() as f64;
        log.push(EpochLog {
            epoch,
            split: LogSplit::Train,
            loss: loss_sum / n,
            acc: correct as f64 / n,
        });
        if !validation.is_empty() {
            let (loss, acc) = match &val_cached {
                Some(v) => evaluate_target_embeddings(&model, v)?,
                None => evaluate_target(&model, validation)?,
            };
            log.push(EpochLog {
                epoch,
                split: LogSplit::Validation,
                loss,
                acc,
            });
            best.offer(epoch, acc, &model);
        }
        log::debug!("target epoch {epoch}: {:?}", &log[log.len() - 1]);
    }

    let (model, best_epoch) = match best.best {
        Some((e, _, m)) => (m, Some(e)),
        None => (model, None),
    };
    let checkpoint = Checkpoint::from_target(&model, config.seed, config.epochs, best_epoch);
    Ok(TrainedTarget {
        model,
        checkpoint,
        log,
        best_epoch,
    })
}

/// Splits items into (train, validation) for one cross-validation fold;
/// test-set items and unknown patients are left out.
pub fn fold_partition<'a, T>(
    items: &'a [T],
    patient_of: impl Fn(&T) -> &str,
    split: &crate::dataset::FoldSplit,
    validation_fold: usize,
) -> (Vec<&'a T>, Vec<&'a T>) {
    use crate::dataset::Side;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for it in items {
        match split.side(patient_of(it), validation_fold) {
            Some(Side::Train) => train.push(it),
            Some(Side::Validation) => val.push(it),
            _ => {}
        }
    }
    (train, val)
}
