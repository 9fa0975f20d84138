//! Experimental protocols over a [`DomainDataset`]: leave-one-domain-out
//! generalization, multi-source adaptation and predictive adaptation over
//! ordered domain pairs, with table-shaped reports.
//!
//! A protocol is a set of independent cells keyed by (target, repetition,
//! training variant). Cells run in parallel with seeds derived from the
//! key, and rows are merged in key order.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{strip_labels, DomainDataset, LabeledSample, SampleId, UnlabeledSample};
use crate::error::{Error, Result};
use crate::osadapt::{self, OSConfig, SweepOptions};
use crate::permset::PermutationSet;
use crate::rng;
use crate::sstasks::Task;
use crate::trainer::{self, FitHooks, Mode, Stream, TrainConfig, TrainInputs};

/// Ordered-pair count above which `pda_pairs` subsamples unless a full sweep is acknowledged.
pub const DEFAULT_MAX_PAIRS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    DgLoo,
    DaMulti,
    PdaPairs,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::DgLoo => "dg_loo",
            Protocol::DaMulti => "da_multi",
            Protocol::PdaPairs => "pda_pairs",
        }
    }

    fn training_mode(self) -> Mode {
        match self {
            Protocol::DgLoo => Mode::Dg,
            Protocol::DaMulti => Mode::Da,
            Protocol::PdaPairs => Mode::Pda,
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dg_loo" => Ok(Protocol::DgLoo),
            "da_multi" => Ok(Protocol::DaMulti),
            "pda_pairs" => Ok(Protocol::PdaPairs),
            _ => Err(Error::Usage(format!("unknown protocol `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Null,
    Ges,
    Geos,
    GesRotation,
    GeosRotation,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Null, Method::Ges, Method::Geos, Method::GesRotation, Method::GeosRotation];

    pub fn name(self) -> &'static str {
        match self {
            Method::Null => "null",
            Method::Ges => "ges",
            Method::Geos => "geos",
            Method::GesRotation => "ges_rotation",
            Method::GeosRotation => "geos_rotation",
        }
    }

    fn variant(self) -> Variant {
        match self {
            Method::Null => Variant::Null,
            Method::Ges | Method::Geos => Variant::Jigsaw,
            Method::GesRotation | Method::GeosRotation => Variant::Rotation,
        }
    }

    fn adapts(self) -> bool {
        matches!(self, Method::Geos | Method::GeosRotation)
    }

    /// Row label in markdown tables.
    fn label(self, iterations: usize) -> String {
        match self {
            Method::Null => "Null hypothesis".into(),
            Method::Ges => "GeS".into(),
            Method::GesRotation => "GeS_rotation".into(),
            Method::Geos => format!("GeOS_{{it={iterations}}}"),
            Method::GeosRotation => format!("GeOS_rotation_{{it={iterations}}}"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}`")))
    }
}

/// Trained model shared by the methods that evaluate it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Variant {
    Null,
    Jigsaw,
    Rotation,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Null => "null",
            Variant::Jigsaw => "jigsaw",
            Variant::Rotation => "rotation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub protocol: Protocol,
    pub repetitions: usize,
    pub methods: Vec<Method>,
    pub os_max_iterations: usize,
    pub os_batch_size: usize,
    pub train: TrainConfig,
    /// Evaluate on a seeded subset of at most this many target images.
    pub eval_limit: Option<usize>,
    /// Required to run every ordered pair when there are more than `max_pairs`.
    pub full_sweep: bool,
    pub max_pairs: usize,
    /// Record the sample ids seen by every training stream.
    pub audit: bool,
}

impl ProtocolSpec {
    pub fn new(protocol: Protocol, train: TrainConfig) -> Self {
        ProtocolSpec {
            protocol,
            repetitions: 3,
            methods: vec![Method::Ges, Method::Geos],
            os_max_iterations: osadapt::DEFAULT_ITERATIONS,
            os_batch_size: osadapt::DEFAULT_BATCH_SIZE,
            train,
            eval_limit: None,
            full_sweep: false,
            max_pairs: DEFAULT_MAX_PAIRS,
            audit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.max_pairs == 0 {
            return Err(Error::Config("max_pairs must be at least 1".into()));
        }
        if self.eval_limit == Some(0) {
            return Err(Error::Config("eval_limit must be at least 1".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub protocol: Protocol,
    pub target: String,
    pub method: Method,
    pub os_iterations: usize,
    pub run: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetAggregate {
    pub target: String,
    pub method: Method,
    pub os_iterations: usize,
    pub mean: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverallAggregate {
    pub method: Method,
    pub os_iterations: usize,
    pub mean: f64,
}

/// Ids that reached each training stream of one cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellAudit {
    pub target: String,
    pub run: usize,
    pub variant: &'static str,
    pub primary: HashSet<SampleId>,
    pub auxiliary: HashSet<SampleId>,
    pub validation: HashSet<SampleId>,
    /// Every id of the evaluation domain(s).
    pub target_ids: HashSet<SampleId>,
}

/// Test-time adaptation outcome of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptationSummary {
    pub target: String,
    pub run: usize,
    pub variant: &'static str,
    pub samples: usize,
    /// Samples whose final-iteration pretext loss beat the unadapted block on the same batch.
    pub progressed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub protocol: Protocol,
    /// Column order for tables.
    pub targets: Vec<String>,
    pub rows: Vec<ProtocolRow>,
    pub targets_mean: Vec<TargetAggregate>,
    pub overall: Vec<OverallAggregate>,
    pub notices: Vec<String>,
    pub audits: Vec<CellAudit>,
    pub adaptation: Vec<AdaptationSummary>,
}

impl ProtocolResult {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.status == RowStatus::Failed)
    }

    fn from_rows(protocol: Protocol, targets: Vec<String>, rows: Vec<ProtocolRow>) -> Self {
        let (targets_mean, overall) = aggregate(&rows, &targets);
        ProtocolResult {
            protocol,
            targets,
            rows,
            targets_mean,
            overall,
            notices: Vec::new(),
            audits: Vec::new(),
            adaptation: Vec::new(),
        }
    }
}

/// Per-target means over successful repetitions, then the mean of those per method.
pub fn aggregate(rows: &[ProtocolRow], targets: &[String]) -> (Vec<TargetAggregate>, Vec<OverallAggregate>) {
    let order: BTreeMap<&str, usize> = targets.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut cells: BTreeMap<(usize, Method, usize), (String, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let (Some(acc), RowStatus::Ok) = (r.accuracy, r.status) else {
            continue;
        };
        let t = order.get(r.target.as_str()).copied().unwrap_or(usize::MAX);
        cells
            .entry((t, r.method, r.os_iterations))
            .or_insert_with(|| (r.target.clone(), Vec::new()))
            .1
            .push(acc);
    }
    let per_target: Vec<TargetAggregate> = cells
        .into_iter()
        .map(|((_, method, os_iterations), (target, accs))| TargetAggregate {
            target,
            method,
            os_iterations,
            mean: accs.iter().sum::<f64>() / accs.len() as f64,
            runs: accs.len(),
        })
        .collect();
    let mut by_method: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
    for a in &per_target {
        by_method.entry((a.method, a.os_iterations)).or_default().push(a.mean);
    }
    let overall = by_method
        .into_iter()
        .map(|((method, os_iterations), means)| OverallAggregate {
            method,
            os_iterations,
            mean: means.iter().sum::<f64>() / means.len() as f64,
        })
        .collect();
    (per_target, overall)
}

/// Training/evaluation data for one target of a protocol.
struct Plan {
    target: String,
    labeled: Vec<LabeledSample>,
    unlabeled: Option<Vec<UnlabeledSample>>,
    eval: Vec<LabeledSample>,
}

fn cell_seed(root: u64, protocol: Protocol, target: &str, run: usize) -> u64 {
    rng::derive_seed(root, &format!("{}/{target}/{run}", protocol.name()))
}

fn limit_eval(samples: Vec<LabeledSample>, limit: Option<usize>, seed: u64) -> Vec<LabeledSample> {
    match limit {
        Some(n) if samples.len() > n => {
            let mut picked = index::sample(&mut rng::rng(seed), samples.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| samples[i].clone()).collect()
        }
        _ => samples,
    }
}

fn plan_dg(ds: &DomainDataset, target: usize) -> Plan {
    let sources: Vec<usize> = (0..ds.domains().len()).filter(|&d| d != target).collect();
    Plan {
        target: ds.domains()[target].name.clone(),
        labeled: ds.gather(&sources),
        unlabeled: None,
        eval: ds.gather(&[target]),
    }
}

fn plan_da(ds: &DomainDataset, target: usize) -> Plan {
    let Plan { target: name, labeled, eval, .. } = plan_dg(ds, target);
    Plan {
        target: name,
        labeled,
        unlabeled: Some(strip_labels(&eval)),
        eval,
    }
}

fn pair_name(ds: &DomainDataset, source: usize, target: usize) -> String {
    format!("{}->{}", ds.domains()[source].name, ds.domains()[target].name)
}

fn plan_pda(ds: &DomainDataset, source: usize, target: usize) -> Plan {
    let aux: Vec<usize> = (0..ds.domains().len()).filter(|&d| d != source && d != target).collect();
    Plan {
        target: pair_name(ds, source, target),
        labeled: ds.gather(&[source]),
        // Labels of the auxiliary domains are dropped here, before training sees them.
        unlabeled: Some(strip_labels(&ds.gather(&aux))),
        eval: ds.gather(&[target]),
    }
}

struct CellOutput {
    rows: Vec<ProtocolRow>,
    audit: Option<CellAudit>,
    adaptation: Option<AdaptationSummary>,
    failure: Option<String>,
}

fn run_cell(
    plan: &Plan,
    spec: &ProtocolSpec,
    num_classes: usize,
    perm_set: Option<&PermutationSet>,
    variant: Variant,
    run: usize,
) -> Result<CellOutput> {
    let seed = cell_seed(spec.train.seed, spec.protocol, &plan.target, run);
    let mut cfg = spec.train.clone();
    cfg.seed = seed;
    let (inputs, perms) = match variant {
        Variant::Null => {
            cfg.mode = Mode::NullHypothesis;
            cfg.task = Task::Rotation;
            (
                TrainInputs {
                    labeled: &plan.labeled,
                    unlabeled: None,
                    num_classes,
                },
                None,
            )
        }
        Variant::Jigsaw | Variant::Rotation => {
            cfg.mode = spec.protocol.training_mode();
            cfg.task = if variant == Variant::Jigsaw { Task::Jigsaw } else { Task::Rotation };
            (
                TrainInputs {
                    labeled: &plan.labeled,
                    unlabeled: plan.unlabeled.as_deref(),
                    num_classes,
                },
                if variant == Variant::Jigsaw { perm_set } else { None },
            )
        }
    };

    let recorder = spec.audit.then(|| Arc::new(Mutex::new(CellAudit::default())));
    let hooks = FitHooks {
        tap: recorder.as_ref().map(|rec| {
            let rec = Arc::clone(rec);
            Box::new(move |stream: Stream, ids: &[SampleId]| {
                let mut a = rec.lock().expect("audit lock");
                let set = match stream {
                    Stream::Primary => &mut a.primary,
                    Stream::Auxiliary => &mut a.auxiliary,
                    Stream::Validation => &mut a.validation,
                };
                set.extend(ids.iter().copied());
            }) as trainer::Tap<'_>
        }),
        audit_flow: spec.audit,
    };
    let methods: Vec<Method> = spec.methods.iter().copied().filter(|m| m.variant() == variant).collect();
    let row = |method: Method, k: usize, accuracy: Option<f64>| ProtocolRow {
        protocol: spec.protocol,
        target: plan.target.clone(),
        method,
        os_iterations: k,
        run,
        seed,
        accuracy,
        status: if accuracy.is_some() { RowStatus::Ok } else { RowStatus::Failed },
    };
    let expand = |accs: &dyn Fn(usize) -> Option<f64>| -> Vec<ProtocolRow> {
        let mut rows = Vec::new();
        for &m in &methods {
            if m.adapts() {
                rows.extend((1..=spec.os_max_iterations).map(|k| row(m, k, accs(k))));
            } else {
                rows.push(row(m, 0, accs(0)));
            }
        }
        rows
    };

    let state = match trainer::fit::<f32>(&cfg, inputs, perms, hooks) {
        Ok(s) => s,
        Err(e @ (Error::Divergence { .. } | Error::AdaptationDivergence(_))) => {
            return Ok(CellOutput {
                rows: expand(&|_| None),
                audit: None,
                adaptation: None,
                failure: Some(format!("{} run {run} ({}): {e}", plan.target, variant.name())),
            });
        }
        Err(e) => return Err(e),
    };
    let model = state.best();
    let eval = limit_eval(
        plan.eval.clone(),
        spec.eval_limit,
        rng::derive_seed(spec.train.seed, &format!("eval/{}", plan.target)),
    );
    let adapt = methods.iter().any(|m| m.adapts()) && spec.os_max_iterations > 0;
    let mut adaptation = None;
    let accuracy: Vec<f64> = if adapt {
        let os = OSConfig {
            iterations: spec.os_max_iterations,
            batch_size: spec.os_batch_size,
            ..OSConfig::from_training(&cfg)
        };
        match osadapt::adapt_batch(model, &eval, &os, perms, SweepOptions::default()) {
            Ok(sweep) => {
                adaptation = Some(AdaptationSummary {
                    target: plan.target.clone(),
                    run,
                    variant: variant.name(),
                    samples: sweep.traces.len(),
                    progressed: sweep.traces.iter().filter(|t| t.made_progress() == Some(true)).count(),
                });
                sweep.accuracy
            }
            Err(e @ Error::AdaptationDivergence(_)) => {
                return Ok(CellOutput {
                    rows: expand(&|_| None),
                    audit: None,
                    adaptation: None,
                    failure: Some(format!("{} run {run} ({}): {e}", plan.target, variant.name())),
                });
            }
            Err(e) => return Err(e),
        }
    } else {
        vec![trainer::evaluate(model, &eval)?]
    };
    let audit = recorder.map(|rec| {
        let mut a = Arc::try_unwrap(rec).map(|m| m.into_inner().expect("audit lock")).unwrap_or_else(|rec| rec.lock().expect("audit lock").clone());
        a.target = plan.target.clone();
        a.run = run;
        a.variant = variant.name();
        a.target_ids = plan.eval.iter().map(|s| s.id).collect();
        a
    });
    Ok(CellOutput {
        rows: expand(&|k| accuracy.get(k).copied()),
        audit,
        adaptation,
        failure: None,
    })
}

fn run_plans(
    plans: Vec<Plan>,
    ds: &DomainDataset,
    spec: &ProtocolSpec,
    perm_set: Option<&PermutationSet>,
) -> Result<ProtocolResult> {
    spec.validate()?;
    let variants: BTreeSet<Variant> = spec.methods.iter().map(|m| m.variant()).collect();
    if variants.contains(&Variant::Jigsaw) && perm_set.is_none() {
        return Err(Error::Config("jigsaw methods need a permutation set".into()));
    }
    let cells: Vec<(usize, Variant, usize)> = (0..plans.len())
        .flat_map(|p| variants.iter().flat_map(move |&v| (0..spec.repetitions).map(move |r| (p, v, r))))
        .collect();
    let outputs: Vec<CellOutput> = cells
        .par_iter()
        .map(|&(p, v, r)| run_cell(&plans[p], spec, ds.num_classes(), perm_set, v, r))
        .collect::<Result<_>>()?;

    let targets: Vec<String> = plans.iter().map(|p| p.target.clone()).collect();
    let target_pos: BTreeMap<&str, usize> = targets.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut rows = Vec::new();
    let mut notices = Vec::new();
    let mut audits = Vec::new();
    let mut adaptation = Vec::new();
    for out in outputs {
        rows.extend(out.rows);
        adaptation.extend(out.adaptation);
        notices.extend(out.failure);
        audits.extend(out.audit);
    }
    rows.sort_by(|a, b| {
        (target_pos[a.target.as_str()], a.method, a.os_iterations, a.run).cmp(&(
            target_pos[b.target.as_str()],
            b.method,
            b.os_iterations,
            b.run,
        ))
    });
    let mut result = ProtocolResult::from_rows(spec.protocol, targets, rows);
    result.notices = notices;
    result.audits = audits;
    result.adaptation = adaptation;
    Ok(result)
}

/// Leave-one-domain-out: every domain is held out once, the rest are aggregated sources.
pub fn run_dg_loo(ds: &DomainDataset, spec: &ProtocolSpec, perm_set: Option<&PermutationSet>) -> Result<ProtocolResult> {
    if ds.domains().len() < 2 {
        return Err(Error::Protocol("leave-one-domain-out needs at least 2 domains".into()));
    }
    let plans = (0..ds.domains().len()).map(|t| plan_dg(ds, t)).collect();
    run_plans(plans, ds, &ProtocolSpec { protocol: Protocol::DgLoo, ..spec.clone() }, perm_set)
}

/// Multi-source adaptation towards each named target (all domains when `targets` is empty).
pub fn run_da(ds: &DomainDataset, targets: &[String], spec: &ProtocolSpec, perm_set: Option<&PermutationSet>) -> Result<ProtocolResult> {
    if ds.domains().len() < 2 {
        return Err(Error::Protocol("domain adaptation needs at least 2 domains".into()));
    }
    let idx: Vec<usize> = if targets.is_empty() {
        (0..ds.domains().len()).collect()
    } else {
        targets.iter().map(|t| ds.domain_index(t)).collect::<Result<_>>()?
    };
    let plans = idx.into_iter().map(|t| plan_da(ds, t)).collect();
    run_plans(plans, ds, &ProtocolSpec { protocol: Protocol::DaMulti, ..spec.clone() }, perm_set)
}

/// Ordered (source, target) pairs with every other domain as unlabeled auxiliary data.
pub fn run_pda(ds: &DomainDataset, spec: &ProtocolSpec, perm_set: Option<&PermutationSet>) -> Result<ProtocolResult> {
    let d = ds.domains().len();
    if d < 3 {
        return Err(Error::Protocol("predictive adaptation needs at least 3 domains".into()));
    }
    let mut pairs: Vec<(usize, usize)> = (0..d).flat_map(|s| (0..d).filter(move |&t| t != s).map(move |t| (s, t))).collect();
    let mut notices = Vec::new();
    if pairs.len() > spec.max_pairs && !spec.full_sweep {
        let mut picked = index::sample(&mut rng::rng(rng::derive_seed(spec.train.seed, "pda-pairs")), pairs.len(), spec.max_pairs).into_vec();
        picked.sort_unstable();
        let msg = format!(
            "running {} of {} ordered pairs; pass --full-sweep for all of them",
            spec.max_pairs,
            pairs.len()
        );
        log::warn!("{msg}");
        notices.push(msg);
        pairs = picked.into_iter().map(|i| pairs[i]).collect();
    }
    let plans = pairs.into_iter().map(|(s, t)| plan_pda(ds, s, t)).collect();
    let mut result = run_plans(plans, ds, &ProtocolSpec { protocol: Protocol::PdaPairs, ..spec.clone() }, perm_set)?;
    notices.append(&mut result.notices);
    result.notices = notices;
    Ok(result)
}

pub fn run(ds: &DomainDataset, spec: &ProtocolSpec, perm_set: Option<&PermutationSet>) -> Result<ProtocolResult> {
    match spec.protocol {
        Protocol::DgLoo => run_dg_loo(ds, spec, perm_set),
        Protocol::DaMulti => run_da(ds, &[], spec, perm_set),
        Protocol::PdaPairs => run_pda(ds, spec, perm_set),
    }
}

/// Recompute one row from its recorded seed.
pub fn rerun_row(ds: &DomainDataset, spec: &ProtocolSpec, perm_set: Option<&PermutationSet>, row: &ProtocolRow) -> Result<Option<f64>> {
    let plan = match row.protocol {
        Protocol::DgLoo => plan_dg(ds, ds.domain_index(&row.target)?),
        Protocol::DaMulti => plan_da(ds, ds.domain_index(&row.target)?),
        Protocol::PdaPairs => {
            let (s, t) = row
                .target
                .split_once("->")
                .ok_or_else(|| Error::Protocol(format!("`{}` is not a domain pair", row.target)))?;
            plan_pda(ds, ds.domain_index(s)?, ds.domain_index(t)?)
        }
    };
    let spec = ProtocolSpec {
        protocol: row.protocol,
        methods: vec![row.method],
        audit: false,
        ..spec.clone()
    };
    if cell_seed(spec.train.seed, row.protocol, &row.target, row.run) != row.seed {
        return Err(Error::Protocol("row seed does not derive from this spec's root seed".into()));
    }
    let out = run_cell(&plan, &spec, ds.num_classes(), perm_set, row.method.variant(), row.run)?;
    Ok(out
        .rows
        .into_iter()
        .find(|r| r.method == row.method && r.os_iterations == row.os_iterations)
        .and_then(|r| r.accuracy))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    /// Per-run accuracy gain of each adapted iteration count over the unadapted model.
    Gains,
    /// Full-precision per-target means plus one `Avg` row per method.
    Aggregates,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "gains" => Ok(ReportFormat::Gains),
            "aggregates" => Ok(ReportFormat::Aggregates),
            _ => Err(Error::Usage(format!("unknown report format `{s}`"))),
        }
    }
}

pub fn to_csv(rows: &[ProtocolRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Ingestion(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Target name used for the mean over targets in aggregate tables.
pub const AVERAGE_TARGET: &str = "Avg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub target: String,
    pub method: Method,
    pub os_iterations: usize,
    pub mean: f64,
    /// Repetitions for a target row, targets for the `Avg` row.
    pub count: usize,
}

pub fn aggregate_rows(result: &ProtocolResult) -> Vec<AggregateRow> {
    let mut rows: Vec<AggregateRow> = result
        .targets_mean
        .iter()
        .map(|a| AggregateRow {
            target: a.target.clone(),
            method: a.method,
            os_iterations: a.os_iterations,
            mean: a.mean,
            count: a.runs,
        })
        .collect();
    rows.extend(result.overall.iter().map(|o| AggregateRow {
        target: AVERAGE_TARGET.into(),
        method: o.method,
        os_iterations: o.os_iterations,
        mean: o.mean,
        count: result
            .targets_mean
            .iter()
            .filter(|a| a.method == o.method && a.os_iterations == o.os_iterations)
            .count(),
    }));
    rows
}

pub fn aggregates_csv(result: &ProtocolResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in aggregate_rows(result) {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Ingestion(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_aggregates_csv(text: &str) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn parse_csv(text: &str) -> Result<Vec<ProtocolRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Rebuild a result (rows and aggregates) from its CSV.
pub fn result_from_csv(text: &str) -> Result<ProtocolResult> {
    let rows = parse_csv(text)?;
    let first = rows.first().ok_or(Error::EmptyEvaluation)?;
    let protocol = first.protocol;
    let mut targets: Vec<String> = Vec::new();
    for r in &rows {
        if !targets.contains(&r.target) {
            targets.push(r.target.clone());
        }
    }
    Ok(ProtocolResult::from_rows(protocol, targets, rows))
}

fn method_rows(result: &ProtocolResult) -> Vec<(Method, usize)> {
    let mut keys: Vec<(Method, usize)> = result.overall.iter().map(|o| (o.method, o.os_iterations)).collect();
    keys.sort();
    keys
}

/// One row per method (and iteration count), one column per target plus the average, in percent.
pub fn markdown(result: &ProtocolResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Method | {} | Avg |", result.targets.join(" | "));
    let _ = writeln!(out, "|---|{}---|", "---|".repeat(result.targets.len()));
    for (method, k) in method_rows(result) {
        let mut line = format!("| {} |", method.label(k));
        for t in &result.targets {
            let cell = result
                .targets_mean
                .iter()
                .find(|a| &a.target == t && a.method == method && a.os_iterations == k)
                .map_or("–".to_string(), |a| format!("{:.2}", 100.0 * a.mean));
            let _ = write!(line, " {cell} |");
        }
        let avg = result
            .overall
            .iter()
            .find(|o| o.method == method && o.os_iterations == k)
            .map_or(f64::NAN, |o| o.mean);
        let _ = writeln!(line, " {:.2} |", 100.0 * avg);
        out.push_str(&line);
    }
    out
}

/// Accuracy gain in points of each adapted iteration count over the same run's unadapted model.
pub fn gains_table(result: &ProtocolResult) -> String {
    let mut base: BTreeMap<(&str, usize, bool), f64> = BTreeMap::new();
    let mut adapted: BTreeMap<(&str, usize, bool), BTreeMap<usize, f64>> = BTreeMap::new();
    for r in result.rows.iter().filter(|r| r.status == RowStatus::Ok) {
        let acc = r.accuracy.expect("ok rows carry accuracy");
        let rot = matches!(r.method, Method::GesRotation | Method::GeosRotation);
        match r.method {
            Method::Ges | Method::GesRotation => {
                base.insert((&r.target, r.run, rot), acc);
            }
            Method::Geos | Method::GeosRotation => {
                adapted.entry((&r.target, r.run, rot)).or_default().insert(r.os_iterations, acc);
            }
            Method::Null => {}
        }
    }
    let max_k = adapted.values().flat_map(|m| m.keys().copied()).max().unwrap_or(0);
    let mut out = String::new();
    let header: Vec<String> = (1..=max_k).map(|k| format!("it={k}")).collect();
    let _ = writeln!(out, "| Target | Task | Run | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|---|---|{}", "---|".repeat(max_k));
    for ((target, run, rot), by_k) in &adapted {
        let Some(b) = base.get(&(*target, *run, *rot)) else {
            continue;
        };
        let cells: Vec<String> = (1..=max_k)
            .map(|k| by_k.get(&k).map_or("–".into(), |a| format!("{:+.2}", 100.0 * (a - b))))
            .collect();
        let task = if *rot { "rotation" } else { "jigsaw" };
        let _ = writeln!(out, "| {target} | {task} | {run} | {} |", cells.join(" | "));
    }
    out
}

pub fn render(result: &ProtocolResult, format: ReportFormat) -> Result<String> {
    if result.rows.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    match format {
        ReportFormat::Csv => to_csv(&result.rows),
        ReportFormat::Markdown => Ok(markdown(result)),
        ReportFormat::Gains => Ok(gains_table(result)),
        ReportFormat::Aggregates => aggregates_csv(result),
    }
}

pub fn emit_report(result: &ProtocolResult, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = render(result, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
