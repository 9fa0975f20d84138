//! Dual-objective training with batch accumulation.
//!
//! Each iteration zeroes gradients, backpropagates the primary loss of an
//! ordered batch, backpropagates `alpha` times the pretext loss of a
//! transformed batch, then applies one optimizer step to both groups.

mod config;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{self, LabeledSample, SampleId, UnlabeledSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::netcore::{images_to_tensor, Batch, GeosModel};
use crate::optim::Optimizer;
use crate::params::{Grads, Group, ParamStore};
use crate::permset::PermutationSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::sstasks::{self, AugmentConfig, SSVariant, Task};

pub use config::{presets, LrDecay, Mode, TrainConfig};

const EVAL_CHUNK: usize = 64;
/// Pretext variants drawn per held-out target image when validating in DA mode.
const PRETEXT_VAL_DRAWS: usize = 4;

/// A model with two loss terms whose gradients can be accumulated separately.
pub trait DualObjective<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn isolation(&self) -> bool;
    fn accumulate_primary(&self, batch: &Batch<T>, grads: &mut Grads<T>) -> Result<T>;
    fn accumulate_auxiliary(&self, batch: &Batch<T>, scale: T, grads: &mut Grads<T>) -> Result<T>;
}

impl<T: Scalar> DualObjective<T> for GeosModel<T> {
    fn params(&self) -> &ParamStore<T> {
        GeosModel::params(self)
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        GeosModel::params_mut(self)
    }
    fn isolation(&self) -> bool {
        GeosModel::isolation(self)
    }
    fn accumulate_primary(&self, batch: &Batch<T>, grads: &mut Grads<T>) -> Result<T> {
        GeosModel::accumulate_primary(self, batch, grads)
    }
    fn accumulate_auxiliary(&self, batch: &Batch<T>, scale: T, grads: &mut Grads<T>) -> Result<T> {
        GeosModel::accumulate_auxiliary(self, batch, scale, grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub primary: f64,
    pub auxiliary: Option<f64>,
}

/// Per-step verification that each loss only reached its own group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlowAudit {
    pub steps_checked: usize,
}

fn audit_violation(what: &str, batch: usize) -> Error {
    Error::Protocol(format!("parameter-flow audit failed at batch {batch}: {what}"))
}

/// One synchronized update. `grads` is scratch space shaped like the model's store.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar, M: DualObjective<T>>(
    model: &mut M,
    optimizer: &mut Optimizer<T>,
    grads: &mut Grads<T>,
    primary: &Batch<T>,
    auxiliary: Option<&Batch<T>>,
    alpha: f64,
    batch_id: usize,
    audit: Option<&mut FlowAudit>,
) -> Result<StepLosses> {
    if primary.labels.is_empty() || auxiliary.is_some_and(|a| a.labels.is_empty()) {
        return Err(Error::Shape("training batches must be non-empty".into()));
    }
    grads.zero();
    let checking = audit.is_some() && model.isolation();
    let theta_before = checking.then(|| model.params().checksum(Group::Theta));
    let lambda_before = checking.then(|| model.params().checksum(Group::Lambda));

    let lp = model.accumulate_primary(primary, grads)?;
    if !lp.is_finite() {
        return Err(Error::Divergence {
            loss: "primary",
            batch: batch_id,
        });
    }
    if checking && !grads.group_is_zero(model.params(), Group::Lambda) {
        return Err(audit_violation("primary loss reached the auxiliary block", batch_id));
    }

    let mut la = None;
    if let Some(aux) = auxiliary {
        let theta_grads = checking.then(|| grads.checksum(model.params(), Group::Theta));
        let loss = model.accumulate_auxiliary(aux, T::from_f64_lossy(alpha), grads)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                loss: "auxiliary",
                batch: batch_id,
            });
        }
        if checking && theta_grads != Some(grads.checksum(model.params(), Group::Theta)) {
            return Err(audit_violation("auxiliary loss reached the primary network", batch_id));
        }
        la = Some(loss.as_f64());
    }

    if checking
        && (theta_before != Some(model.params().checksum(Group::Theta))
            || lambda_before != Some(model.params().checksum(Group::Lambda)))
    {
        return Err(audit_violation("parameters changed before the optimizer step", batch_id));
    }
    if let Some(a) = audit {
        if checking {
            a.steps_checked += 1;
        }
    }
    let params = model.params_mut();
    optimizer.step(params, grads);
    Ok(StepLosses {
        primary: lp.as_f64(),
        auxiliary: la,
    })
}

/// Which data stream a tapped batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Primary,
    Auxiliary,
    Validation,
}

pub type Tap<'a> = Box<dyn FnMut(Stream, &[SampleId]) + Send + 'a>;

#[derive(Default)]
pub struct FitHooks<'a> {
    /// Observes the ids of every batch the trainer assembles.
    pub tap: Option<Tap<'a>>,
    /// Verify gradient isolation at every step.
    pub audit_flow: bool,
}

impl FitHooks<'_> {
    fn emit(&mut self, stream: Stream, ids: &[SampleId]) {
        if let Some(tap) = self.tap.as_mut() {
            tap(stream, ids);
        }
    }
}

/// Data handed to [`fit`]; which fields are required depends on the mode.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    /// Labeled source samples (training and validation pool).
    pub labeled: &'a [LabeledSample],
    /// Unlabeled target (da) or auxiliary (pda) images.
    pub unlabeled: Option<&'a [UnlabeledSample]>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_p")]
    pub primary_loss: f64,
    #[serde(rename = "L_a")]
    pub auxiliary_loss: Option<f64>,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Weights after the last completed epoch.
    pub model: GeosModel<T>,
    pub optimizer: Optimizer<T>,
    pub epoch: usize,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    /// Weights at `best_epoch`.
    pub best_model: GeosModel<T>,
    pub history: Vec<EpochRecord>,
    /// Root of every per-epoch and per-batch random stream.
    pub seed: u64,
    pub audit: FlowAudit,
}

impl<T: Scalar> TrainState<T> {
    pub fn best(&self) -> &GeosModel<T> {
        &self.best_model
    }
}

/// Ordered batch with training augmentation; item `i` uses substream `i` of `seed`.
pub fn primary_batch<T: Scalar>(samples: &[&LabeledSample], aug: &AugmentConfig, seed: u64) -> Result<Batch<T>> {
    let images: Vec<Image<f32>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::rng(rng::derive_index(seed, i as u64));
            sstasks::augment(&s.image, aug, &mut r)
        })
        .collect();
    let refs: Vec<&Image<f32>> = images.iter().collect();
    Ok(Batch {
        inputs: images_to_tensor(&refs)?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

pub fn variants_to_batch<T: Scalar>(variants: &[SSVariant]) -> Result<Batch<T>> {
    let refs: Vec<&Image<f32>> = variants.iter().map(|v| &v.image).collect();
    Ok(Batch {
        inputs: images_to_tensor(&refs)?,
        labels: variants.iter().map(|v| v.label).collect(),
    })
}

fn count_correct<T: Scalar>(model: &GeosModel<T>, images: &[Image<f32>], labels: &[usize]) -> Result<usize> {
    let refs: Vec<&Image<f32>> = images.iter().collect();
    let x = images_to_tensor(&refs)?;
    let out = model.forward_primary(&x)?;
    Ok(out.primary_logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count())
}

/// Fraction of samples whose top primary logit is the label.
pub fn evaluate<T: Scalar>(model: &GeosModel<T>, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let size = model.config().input_size;
    let correct: Vec<usize> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let images: Vec<_> = chunk.iter().map(|s| sstasks::prepare_eval(&s.image, size)).collect();
            let labels: Vec<_> = chunk.iter().map(|s| s.label).collect();
            count_correct(model, &images, &labels)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Pretext accuracy over deterministic, unaugmented variants of `samples`.
pub fn pretext_accuracy<T: Scalar>(
    model: &GeosModel<T>,
    samples: &[UnlabeledSample],
    task: Task,
    perm_set: Option<&PermutationSet>,
    grid: sstasks::Grid,
    count: usize,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() || count == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let aug = AugmentConfig::disabled(model.config().input_size);
    let variants = sstasks::make_ss_batch(samples, task, perm_set, grid, &aug, count, seed)?;
    let correct: Vec<usize> = variants
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let batch = variants_to_batch::<T>(chunk)?;
            let out = model.forward_auxiliary(&batch.inputs)?;
            let logits = out.pretext_logits.expect("auxiliary forward");
            Ok(logits.argmax_rows().iter().zip(&batch.labels).filter(|(p, y)| p == y).count())
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / variants.len() as f64)
}

fn check_inputs(config: &TrainConfig, inputs: &TrainInputs) -> Result<()> {
    if inputs.labeled.is_empty() {
        return Err(Error::Protocol("no labeled source samples".into()));
    }
    match (config.mode, inputs.unlabeled) {
        (Mode::Dg | Mode::NullHypothesis, Some(_)) => Err(Error::Protocol(format!(
            "{} mode takes labeled sources only",
            config.mode.name()
        ))),
        (Mode::Da | Mode::Pda, None) => Err(Error::Protocol(format!(
            "{} mode needs unlabeled {} images",
            config.mode.name(),
            if config.mode == Mode::Da { "target" } else { "auxiliary" }
        ))),
        (Mode::Da | Mode::Pda, Some([])) => Err(Error::EmptySource),
        _ => Ok(()),
    }
}

/// Seeded partition of unlabeled images into (train, held-out).
fn holdout_unlabeled(samples: &[UnlabeledSample], fraction: f64, seed: u64) -> (Vec<UnlabeledSample>, Vec<UnlabeledSample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::rng(seed));
    let n_val = ((samples.len() as f64 * fraction).round() as usize).clamp(1, samples.len().saturating_sub(1).max(1));
    let (val, train) = order.split_at(n_val.min(samples.len()));
    let pick = |ix: &[usize]| {
        let mut v: Vec<_> = ix.iter().map(|&i| samples[i].clone()).collect();
        v.sort_by_key(|s| s.id);
        v
    };
    let train = if train.is_empty() { pick(val) } else { pick(train) };
    (train, pick(val))
}

/// Train from scratch (or from pretrained Θ) and keep the best-validating epoch.
pub fn fit<T: Scalar>(
    config: &TrainConfig,
    inputs: TrainInputs,
    perm_set: Option<&PermutationSet>,
    mut hooks: FitHooks,
) -> Result<TrainState<T>> {
    config.validate()?;
    check_inputs(config, &inputs)?;
    let grid = config.grid();
    let uses_aux = config.mode.uses_auxiliary();
    let num_pretext = sstasks::pretext_classes(config.task, perm_set)?;
    if config.task == Task::Jigsaw {
        let n = perm_set.expect("checked by pretext_classes").n();
        if n != grid.tiles() {
            return Err(Error::Config(format!("permutation set has {n} tiles, grid has {}", grid.tiles())));
        }
    }
    let channels = inputs.labeled[0].image.channels();
    let mut model = GeosModel::<T>::build(config.model_config(inputs.num_classes, num_pretext, channels))?;
    let mut optimizer = Optimizer::new(config.optimizer_config(), model.params());
    let mut grads = model.grads();
    let aug = config.augment_config();
    let seed = config.seed;

    // Primary stream and validation set per mode.
    let (train, val_labeled, aux_pool, val_unlabeled) = match config.mode {
        Mode::Da => {
            let unlabeled = inputs.unlabeled.expect("checked");
            let (aux, held) = holdout_unlabeled(unlabeled, config.val_fraction, rng::derive_seed(seed, "split"));
            (inputs.labeled.to_vec(), Vec::new(), aux, held)
        }
        _ => {
            let sp = datasets::split(inputs.labeled, config.val_fraction, rng::derive_seed(seed, "split"))?;
            if sp.val.is_empty() {
                return Err(Error::Protocol("validation split is empty".into()));
            }
            let aux = match config.mode {
                Mode::Dg => datasets::strip_labels(&sp.train),
                Mode::Pda => inputs.unlabeled.expect("checked").to_vec(),
                _ => Vec::new(),
            };
            (sp.train, sp.val, aux, Vec::new())
        }
    };
    if !val_labeled.is_empty() {
        hooks.emit(Stream::Validation, &val_labeled.iter().map(|s| s.id).collect::<Vec<_>>());
    }
    if !val_unlabeled.is_empty() {
        hooks.emit(Stream::Validation, &val_unlabeled.iter().map(|s| s.id).collect::<Vec<_>>());
    }

    let validate = |model: &GeosModel<T>| -> Result<f64> {
        match config.mode {
            Mode::Da => pretext_accuracy(
                model,
                &val_unlabeled,
                config.task,
                perm_set,
                grid,
                val_unlabeled.len() * PRETEXT_VAL_DRAWS,
                rng::derive_seed(seed, "val-pretext"),
            ),
            _ => evaluate(model, &val_labeled),
        }
    };

    let mut state_best: Option<(f64, usize, GeosModel<T>)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut audit = FlowAudit::default();
    let mut batch_id = 0usize;
    for epoch in 0..config.epochs {
        optimizer.set_lr_scale(config.lr_scale(epoch));
        let epoch_seed = rng::derive_index(rng::derive_seed(seed, "epoch"), epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::rng(epoch_seed));
        let (mut sum_lp, mut sum_la, mut steps) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size_primary).enumerate() {
            let batch_seed = rng::derive_index(epoch_seed, b as u64);
            let picked: Vec<&LabeledSample> = chunk.iter().map(|&i| &train[i]).collect();
            hooks.emit(Stream::Primary, &picked.iter().map(|s| s.id).collect::<Vec<_>>());
            let primary = primary_batch::<T>(&picked, &aug, rng::derive_seed(batch_seed, "primary"))?;
            let aux = if uses_aux {
                let variants = sstasks::make_ss_batch(
                    &aux_pool,
                    config.task,
                    perm_set,
                    grid,
                    &aug,
                    config.batch_size_auxiliary,
                    rng::derive_seed(batch_seed, "aux"),
                )?;
                hooks.emit(Stream::Auxiliary, &variants.iter().map(|v| v.source_id).collect::<Vec<_>>());
                Some(variants_to_batch::<T>(&variants)?)
            } else {
                None
            };
            let losses = train_step(
                &mut model,
                &mut optimizer,
                &mut grads,
                &primary,
                aux.as_ref(),
                config.alpha,
                batch_id,
                hooks.audit_flow.then_some(&mut audit),
            )?;
            batch_id += 1;
            sum_lp += losses.primary;
            sum_la += losses.auxiliary.unwrap_or(0.0);
            steps += 1;
        }
        let val_metric = validate(&model)?;
        let record = EpochRecord {
            epoch,
            primary_loss: sum_lp / steps.max(1) as f64,
            auxiliary_loss: uses_aux.then(|| sum_la / steps.max(1) as f64),
            val_metric,
            lr: optimizer.current_lr_main(),
        };
        log::info!(
            "epoch {epoch}: L_p {:.4} L_a {} val {:.4}",
            record.primary_loss,
            record.auxiliary_loss.map_or("-".into(), |v| format!("{v:.4}")),
            val_metric
        );
        history.push(record);
        if state_best.as_ref().is_none_or(|(m, _, _)| val_metric > *m) {
            state_best = Some((val_metric, epoch, model.clone()));
        }
    }
    let (best_val_metric, best_epoch, best_model) = match state_best {
        Some(b) => b,
        None => (validate(&model)?, 0, model.clone()),
    };
    Ok(TrainState {
        model,
        optimizer,
        epoch: config.epochs,
        best_val_metric,
        best_epoch,
        best_model,
        history,
        seed,
        audit,
    })
}

/// Write one row per epoch: epoch, L_p, L_a, val_metric, lr.
pub fn write_log(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Provenance stored beside checkpoint weights.
pub fn checkpoint_metadata<T: Scalar>(
    config: &TrainConfig,
    perm_set: Option<&PermutationSet>,
    state: &TrainState<T>,
) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("mode".into(), config.mode.name().into());
    m.insert("task".into(), config.task.name().into());
    m.insert("seed".into(), config.seed.to_string());
    m.insert("config_sha256".into(), config.hash());
    m.insert("train_config".into(), config.to_toml_string());
    if let Some(p) = perm_set {
        m.insert("permset_sha256".into(), crate::sha256_hex(p.to_text().as_bytes()));
        m.insert("permset".into(), p.to_text());
    }
    m.insert("best_epoch".into(), state.best_epoch.to_string());
    m.insert("best_val_metric".into(), format!("{}", state.best_val_metric));
    m
}
