//! One-sample test-time adaptation: fine-tune Λ on pretext variants of a
//! single test image, predict with the adapted block, then restore Λ.
//!
//! Θ is never written. Each sample starts from the same Λ snapshot with a
//! fresh optimizer, so samples are independent and can run in parallel.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::datasets::{LabeledSample, SampleId, UnlabeledSample};
use crate::error::{Error, Result};
use crate::netcore::{images_to_tensor, GeosModel, LambdaSnapshot};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::Group;
use crate::permset::PermutationSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::sstasks::{self, AugmentConfig, Grid, Task};
use crate::trainer::{variants_to_batch, TrainConfig};

pub const DEFAULT_ITERATIONS: usize = 3;
pub const DEFAULT_BATCH_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OSConfig {
    pub iterations: usize,
    /// Variants per iteration.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub task: Task,
    pub grid: Grid,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Testing aid: report a non-finite loss at this iteration (1-based).
    #[serde(skip)]
    pub fault_injection: Option<usize>,
}

impl OSConfig {
    /// Optimizer, pretext task and augmentation inherited from training.
    pub fn from_training(cfg: &TrainConfig) -> Self {
        OSConfig {
            iterations: DEFAULT_ITERATIONS,
            batch_size: DEFAULT_BATCH_SIZE,
            optimizer: cfg.optimizer_config(),
            task: cfg.task,
            grid: cfg.grid(),
            augment: cfg.augment_config(),
            seed: rng::derive_seed(cfg.seed, "os"),
            fault_injection: None,
        }
    }

    /// Replace learning rate (both groups), momentum or weight decay.
    pub fn with_overrides(mut self, lr: Option<f64>, momentum: Option<f64>, weight_decay: Option<f64>) -> Self {
        if let Some(lr) = lr {
            self.optimizer.lr_main = lr;
            self.optimizer.lr_head = lr;
        }
        if let Some(m) = momentum {
            self.optimizer.momentum = m;
        }
        if let Some(wd) = weight_decay {
            self.optimizer.weight_decay = wd;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("adaptation batch size must be at least 1".into()));
        }
        self.augment.validate(self.grid)
    }
}

/// Record of one sample's adaptation trajectory.
///
/// At iteration `k` (1-based) a fresh variant batch `B_k` is drawn. `aux_loss[k-1]`
/// is the loss of Λ_{k-1} on `B_k` (the quantity the step minimizes);
/// `post_step_loss[k-1]` is Λ_k on `B_k`; `reference_loss[k-1]` is the
/// unadapted Λ_0 on `B_k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OSTrace {
    pub sample_id: SampleId,
    pub aux_loss: Vec<f64>,
    pub post_step_loss: Vec<f64>,
    pub reference_loss: Vec<f64>,
    /// Predicted class after 0, 1, ..., `iterations` steps.
    pub predictions: Vec<usize>,
    pub logits_before: Vec<f64>,
    pub logits_after: Vec<f64>,
    pub restored: bool,
}

impl OSTrace {
    pub fn predicted_class(&self) -> usize {
        *self.predictions.last().expect("iteration 0 is always recorded")
    }

    /// Whether adapted Λ beats Λ_0 on the last iteration's own batch; `None` without iterations.
    pub fn made_progress(&self) -> Option<bool> {
        let k = self.post_step_loss.len().checked_sub(1)?;
        Some(self.post_step_loss[k] < self.reference_loss[k])
    }
}

/// Reusable adaptation worker: owns a private copy of the model whose Λ is
/// reset to the reference snapshot after every sample.
pub struct Adapter<'m, T> {
    reference: &'m GeosModel<T>,
    work: GeosModel<T>,
    snapshot: LambdaSnapshot<T>,
    theta_checksum: u64,
}

impl<'m, T: Scalar> Adapter<'m, T> {
    pub fn new(model: &'m GeosModel<T>) -> Self {
        Adapter {
            reference: model,
            work: model.clone(),
            snapshot: model.snapshot_lambda(),
            theta_checksum: model.params().checksum(Group::Theta),
        }
    }

    /// True when the worker's Λ equals the reference snapshot bit for bit.
    pub fn lambda_restored(&self) -> bool {
        self.work.snapshot_lambda().bits_eq(&self.snapshot)
    }

    pub fn theta_checksum(&self) -> u64 {
        self.work.params().checksum(Group::Theta)
    }

    pub fn adapt(&mut self, sample: &UnlabeledSample, cfg: &OSConfig, perm_set: Option<&PermutationSet>) -> Result<OSTrace> {
        let outcome = self.run(sample, cfg, perm_set);
        self.work.restore_lambda(&self.snapshot)?;
        let restored = self.lambda_restored();
        if self.theta_checksum() != self.theta_checksum {
            return Err(Error::Snapshot("primary network changed during adaptation".into()));
        }
        outcome.map(|mut t| {
            t.restored = restored;
            t
        })
    }

    fn run(&mut self, sample: &UnlabeledSample, cfg: &OSConfig, perm_set: Option<&PermutationSet>) -> Result<OSTrace> {
        cfg.validate()?;
        let size = self.work.config().input_size;
        let view = sstasks::prepare_eval(&sample.image, size);
        let x = images_to_tensor::<T>(&[&view])?;
        let predict = |m: &GeosModel<T>| -> Result<(usize, Vec<f64>)> {
            let logits = m.forward_primary(&x)?.primary_logits;
            Ok((logits.argmax_rows()[0], logits.data().iter().map(|v| v.as_f64()).collect()))
        };
        let (first, logits_before) = predict(&self.work)?;
        let mut trace = OSTrace {
            sample_id: sample.id,
            aux_loss: Vec::with_capacity(cfg.iterations),
            post_step_loss: Vec::with_capacity(cfg.iterations),
            reference_loss: Vec::with_capacity(cfg.iterations),
            predictions: vec![first],
            logits_after: logits_before.clone(),
            logits_before,
            restored: false,
        };
        if cfg.iterations == 0 {
            return Ok(trace);
        }
        let mut optimizer = Optimizer::for_group(cfg.optimizer, self.work.params(), Group::Lambda);
        let mut grads = self.work.grads();
        let stream = rng::derive_seed(cfg.seed, &format!("os/{}", sample.id));
        let source = std::slice::from_ref(sample);
        for k in 1..=cfg.iterations {
            let variants = sstasks::make_ss_batch(
                source,
                cfg.task,
                perm_set,
                cfg.grid,
                &cfg.augment,
                cfg.batch_size,
                rng::derive_index(stream, k as u64),
            )?;
            let batch = variants_to_batch::<T>(&variants)?;
            let f = self.work.backbone_features(&batch.inputs)?;
            grads.zero();
            let loss = self.work.auxiliary_from_features(&f, &batch.labels, Some(&mut grads));
            if !loss.is_finite() || cfg.fault_injection == Some(k) {
                return Err(Error::AdaptationDivergence(k));
            }
            optimizer.step(self.work.params_mut(), &grads);
            trace.aux_loss.push(loss.as_f64());
            trace.post_step_loss.push(self.work.auxiliary_from_features(&f, &batch.labels, None).as_f64());
            trace.reference_loss.push(self.reference.auxiliary_from_features(&f, &batch.labels, None).as_f64());
            let (class, logits) = predict(&self.work)?;
            trace.predictions.push(class);
            trace.logits_after = logits;
        }
        Ok(trace)
    }
}

/// Adapt on one sample and return the adapted prediction. `model` is left untouched.
pub fn adapt_and_predict<T: Scalar>(
    model: &GeosModel<T>,
    sample: &UnlabeledSample,
    cfg: &OSConfig,
    perm_set: Option<&PermutationSet>,
) -> Result<(usize, OSTrace)> {
    let trace = Adapter::new(model).adapt(sample, cfg, perm_set)?;
    Ok((trace.predicted_class(), trace))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepOptions {
    /// Re-run adaptation from scratch for every iteration count instead of
    /// reading predictions off one trajectory.
    pub restart_per_k: bool,
    /// Process samples one after another on the calling thread.
    pub serial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    /// `accuracy[k]` is the accuracy after `k` adaptation steps.
    pub accuracy: Vec<f64>,
    pub traces: Vec<OSTrace>,
    pub labels: Vec<usize>,
}

impl SweepResult {
    /// Fraction of adapted samples whose last-iteration loss beat the unadapted block.
    pub fn progress_fraction(&self) -> Option<f64> {
        let flags: Vec<bool> = self.traces.iter().filter_map(OSTrace::made_progress).collect();
        (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
    }
}

/// Accuracy after every iteration count `0..=cfg.iterations`; labels are read only for scoring.
pub fn adapt_batch<T: Scalar>(
    model: &GeosModel<T>,
    test_set: &[LabeledSample],
    cfg: &OSConfig,
    perm_set: Option<&PermutationSet>,
    options: SweepOptions,
) -> Result<SweepResult> {
    if test_set.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    cfg.validate()?;
    let unlabeled: Vec<UnlabeledSample> = test_set.iter().map(LabeledSample::unlabeled).collect();
    let one = |adapter: &mut Adapter<'_, T>, s: &UnlabeledSample| -> Result<OSTrace> {
        if !options.restart_per_k {
            return adapter.adapt(s, cfg, perm_set);
        }
        let mut trace = adapter.adapt(s, cfg, perm_set)?;
        for k in 0..cfg.iterations {
            let short = OSConfig {
                iterations: k,
                ..cfg.clone()
            };
            trace.predictions[k] = adapter.adapt(s, &short, perm_set)?.predicted_class();
        }
        Ok(trace)
    };
    let traces: Vec<OSTrace> = if options.serial {
        let mut adapter = Adapter::new(model);
        unlabeled.iter().map(|s| one(&mut adapter, s)).collect::<Result<_>>()?
    } else {
        unlabeled
            .par_iter()
            .map_init(|| Adapter::new(model), |adapter, s| one(adapter, s))
            .collect::<Result<_>>()?
    };
    let labels: Vec<usize> = test_set.iter().map(|s| s.label).collect();
    let accuracy = (0..=cfg.iterations)
        .map(|k| {
            let hits = traces.iter().zip(&labels).filter(|(t, &y)| t.predictions[k] == y).count();
            hits as f64 / labels.len() as f64
        })
        .collect();
    Ok(SweepResult {
        accuracy,
        traces,
        labels,
    })
}

#[derive(Serialize)]
struct TraceRow {
    sample_id: String,
    iteration: usize,
    aux_loss: Option<f64>,
    predicted_class: usize,
}

/// Per-sample trace dump: sample_id, iteration, aux_loss, predicted_class.
/// Iteration 0 has no loss.
pub fn write_traces(traces: &[OSTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for t in traces {
        for (k, &class) in t.predictions.iter().enumerate() {
            w.serialize(TraceRow {
                sample_id: t.sample_id.to_string(),
                iteration: k,
                aux_loss: k.checked_sub(1).map(|i| t.aux_loss[i]),
                predicted_class: class,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
