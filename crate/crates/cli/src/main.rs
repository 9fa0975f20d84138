use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use geos_core::datasets::{self, DomainDataset, LabeledSample, SynthSpec};
use geos_core::evalproto::{self, Method, Protocol, ProtocolSpec};
use geos_core::netcore::checkpoint;
use geos_core::osadapt::{self, OSConfig, SweepOptions};
use geos_core::permset::{self, PermutationSet};
use geos_core::sstasks::Task;
use geos_core::trainer::{self, presets, FitHooks, TrainInputs};
use geos_core::{Error, Mode, TrainConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};

mod manifest;

use manifest::Manifest;

/// Size of generated permutation sets when no `--perms` file is given.
const DEFAULT_PERM_COUNT: usize = 30;

#[derive(Parser, Debug)]
#[command(name = "geos", version, about = "Gradient-isolated self-supervision with one-sample adaptation")]
struct Cli {
    /// Worker threads for training and evaluation cells (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a maximal-Hamming permutation set.
    Permgen(PermgenArgs),
    /// Write a synthetic multi-domain dataset in the folder layout.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint and epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint with one-sample adaptation.
    Eval(EvalArgs),
    /// Run an evaluation protocol over every target and repetition.
    Protocol(ProtocolArgs),
    /// Render a protocol result CSV as a table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct PermgenArgs {
    #[arg(long, default_value_t = 9)]
    tiles: usize,
    #[arg(long, default_value_t = DEFAULT_PERM_COUNT)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; its manifest is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    /// Images per domain and class.
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 28)]
    resolution: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct DataArgs {
    /// Dataset root laid out as `<domain>/<class>/<image>`.
    #[arg(long, env = "GEOS_DATA_ROOT")]
    data: Option<PathBuf>,
    /// CSV of `path,domain,class` rows relative to the dataset root.
    #[arg(long)]
    data_manifest: Option<PathBuf>,
    /// Side length images are resized to on load.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Learning rate for both parameter groups.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct TrainArgs {
    /// TOML config file or preset name (pacs_dg, compcars_pda, portraits_decades_pda, portraits_regions_pda, desk).
    #[arg(long, default_value = "pacs_dg")]
    config: String,
    #[arg(long)]
    mode: Option<Mode>,
    /// Held-out domain (dg, null) or unlabeled target domain (da, pda).
    #[arg(long)]
    target: Option<String>,
    /// Labeled source domain for pda.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    perms: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Resolve the config, write the manifest and stop.
    #[arg(long)]
    dry_run: bool,
    /// Replay the arguments recorded in an earlier manifest.
    #[arg(long)]
    #[serde(skip)]
    from_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Domains to evaluate on; defaults to the training target, else every domain.
    #[arg(long, value_delimiter = ',')]
    domain: Vec<String>,
    #[arg(long, default_value_t = osadapt::DEFAULT_ITERATIONS)]
    os_iterations: usize,
    #[arg(long, default_value_t = osadapt::DEFAULT_BATCH_SIZE)]
    os_batch: usize,
    #[arg(long)]
    os_lr: Option<f64>,
    /// Evaluate an evenly spaced subset of at most this many images.
    #[arg(long)]
    limit: Option<usize>,
    /// Per-sample adaptation trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output directory; defaults to `eval/` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ProtocolArgs {
    #[arg(long, required_unless_present = "from_manifest")]
    protocol: Option<Protocol>,
    #[arg(long, default_value = "desk")]
    config: String,
    #[command(flatten)]
    data: DataArgs,
    /// Targets for da_multi; all domains when omitted.
    #[arg(long, value_delimiter = ',')]
    target: Vec<String>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "ges,geos")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = osadapt::DEFAULT_ITERATIONS)]
    os_iterations: usize,
    #[arg(long, default_value_t = osadapt::DEFAULT_BATCH_SIZE)]
    os_batch: usize,
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Run every ordered pair of a pair protocol.
    #[arg(long)]
    full_sweep: bool,
    #[arg(long, default_value_t = evalproto::DEFAULT_MAX_PAIRS)]
    max_pairs: usize,
    #[arg(long)]
    perms: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    #[serde(skip)]
    from_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ReportArgs {
    /// Protocol result CSV.
    #[arg(long)]
    input: PathBuf,
    /// csv, md, gains or aggregates.
    #[arg(long, default_value = "md")]
    format: String,
    /// CSV of `method,target,accuracy,note` rows (accuracy in percent) appended
    /// to the markdown table as annotated references.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Output directory; the table is printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct ReferenceRow {
    method: String,
    target: String,
    accuracy: f64,
    #[serde(default)]
    note: String,
}

/// Some protocol rows diverged; outputs were still written.
#[derive(Debug)]
struct RowsFailed(usize);

impl fmt::Display for RowsFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} result rows failed", self.0)
    }
}

impl std::error::Error for RowsFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<RowsFailed>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global()?;
    }
    match cli.command {
        Command::Permgen(a) => permgen(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Protocol(a) => protocol(a),
        Command::Report(a) => report(a),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn permgen(a: PermgenArgs) -> Result<()> {
    let mut m = Manifest::new("permgen", &a)?;
    m.seeds.insert("root".into(), a.seed);
    let mut side = a.out.clone().into_os_string();
    side.push(".manifest.json");
    m.write(Path::new(&side))?;
    let set = permset::generate(a.tiles, a.count, a.seed)?;
    set.save(&a.out)?;
    match set.min_pairwise_hamming() {
        Some(d) => println!("min pairwise hamming: {d}"),
        None => println!("min pairwise hamming: undefined for a single permutation"),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    create_out(&a.out)?;
    let mut m = Manifest::new("synth", &a)?;
    m.seeds.insert("root".into(), a.seed);
    m.write(&a.out.join(manifest::FILE_NAME))?;
    let ds = datasets::synthesize(&SynthSpec::desk(a.domains, a.classes, a.per_class, a.resolution, a.seed))?;
    datasets::export_folder(&ds, &a.out)?;
    println!("wrote {} images in {} domains to {}", ds.len(), ds.domains().len(), a.out.display());
    Ok(())
}

/// Manifests record absolute input paths so replays work from any directory.
fn absolute(p: &mut PathBuf) -> Result<()> {
    *p = std::path::absolute(&*p)?;
    Ok(())
}

impl DataArgs {
    fn absolutize(&mut self) -> Result<()> {
        self.data.as_mut().map(absolute).transpose()?;
        self.data_manifest.as_mut().map(absolute).transpose()?;
        Ok(())
    }
}

fn absolutize_config(name: &mut String) -> Result<()> {
    if Path::new(name.as_str()).is_file() {
        *name = std::path::absolute(name.as_str())?.to_string_lossy().into_owned();
    }
    Ok(())
}

/// Config file when `name` is an existing path, otherwise a preset.
fn resolve_config(name: &str, overrides: &Overrides) -> Result<(TrainConfig, Option<PathBuf>)> {
    let path = Path::new(name);
    let (mut cfg, file) = if path.is_file() {
        (TrainConfig::load(path)?, Some(path.to_path_buf()))
    } else {
        (presets::by_name(name)?, None)
    };
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(e) = overrides.epochs {
        cfg.epochs = e;
    }
    if let Some(t) = overrides.task {
        cfg.task = t;
    }
    if let Some(al) = overrides.alpha {
        cfg.alpha = al;
    }
    if let Some(lr) = overrides.lr {
        cfg.lr_main = lr;
        cfg.lr_head = lr;
    }
    cfg.validate()?;
    Ok((cfg, file))
}

/// Load resolution when the flag is absent: the crop plus a margin for random crops.
fn default_resolution(cfg: &TrainConfig) -> usize {
    cfg.crop_size + cfg.crop_size / 6
}

fn data_root(d: &DataArgs) -> Result<&Path> {
    d.data
        .as_deref()
        .ok_or_else(|| Error::Usage("no dataset: pass --data or set GEOS_DATA_ROOT".into()).into())
}

fn record_data(m: &mut Manifest, d: &DataArgs) -> Result<()> {
    m.input("data", data_root(d)?)?;
    if let Some(p) = &d.data_manifest {
        m.input("data_manifest", p)?;
    }
    Ok(())
}

fn load_data(d: &DataArgs, resolution: usize) -> Result<DomainDataset> {
    let root = data_root(d)?;
    let (ds, report) = match &d.data_manifest {
        Some(csv) => datasets::load_manifest(csv, root, resolution)?,
        None => datasets::load_folder(root, resolution)?,
    };
    for e in &report.errors {
        warn!("skipped {}: {}", e.0.display(), e.1);
    }
    info!("loaded {} images from {} domains", ds.len(), ds.domains().len());
    Ok(ds)
}

/// Generated sets are seeded from the run's root seed.
fn load_perms(path: Option<&Path>, cfg: &TrainConfig, needed: bool) -> Result<Option<PermutationSet>> {
    match path {
        Some(p) => Ok(Some(PermutationSet::load(p)?)),
        None if needed => Ok(Some(permset::generate(cfg.grid().tiles(), DEFAULT_PERM_COUNT, cfg.seed)?)),
        None => Ok(None),
    }
}

fn echo_resolved(cfg: &TrainConfig) {
    println!(
        "resolved: mode={} task={} alpha={} lr={} lr_head={} momentum={} wd={} epochs={} batch={} seed={}",
        cfg.mode.name(),
        cfg.task.name(),
        cfg.alpha,
        cfg.lr_main,
        cfg.lr_head,
        cfg.momentum,
        cfg.weight_decay,
        cfg.epochs,
        cfg.batch_size_primary,
        cfg.seed
    );
}

struct Selection {
    labeled: Vec<LabeledSample>,
    unlabeled: Option<Vec<datasets::UnlabeledSample>>,
}

fn select_training_data(ds: &DomainDataset, mode: Mode, target: Option<&str>, source: Option<&str>) -> Result<Selection> {
    let all: Vec<usize> = (0..ds.domains().len()).collect();
    let except = |skip: &[usize]| -> Vec<usize> { all.iter().copied().filter(|d| !skip.contains(d)).collect() };
    let sel = match mode {
        Mode::Dg | Mode::NullHypothesis => {
            let held = target.map(|t| ds.domain_index(t)).transpose()?;
            let sources = except(&held.into_iter().collect::<Vec<_>>());
            Selection {
                labeled: ds.gather(&sources),
                unlabeled: None,
            }
        }
        Mode::Da => {
            let t = target.ok_or_else(|| Error::Usage("--mode da needs --target".into()))?;
            let t = ds.domain_index(t)?;
            Selection {
                labeled: ds.gather(&except(&[t])),
                unlabeled: Some(datasets::strip_labels(&ds.gather(&[t]))),
            }
        }
        Mode::Pda => {
            let s = source.ok_or_else(|| Error::Usage("--mode pda needs --source".into()))?;
            let s = ds.domain_index(s)?;
            let aux = match target {
                Some(t) => vec![ds.domain_index(t)?],
                None => except(&[s]),
            };
            Selection {
                labeled: ds.gather(&[s]),
                unlabeled: Some(datasets::strip_labels(&ds.gather(&aux))),
            }
        }
    };
    if sel.labeled.is_empty() {
        bail!(Error::Usage("no labeled training images selected".into()));
    }
    Ok(sel)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut a = match &a.from_manifest {
        Some(p) => TrainArgs {
            out: a.out.clone(),
            ..Manifest::read(p)?.replay_args("train")?
        },
        None => a,
    };
    a.data.absolutize()?;
    a.perms.as_mut().map(absolute).transpose()?;
    absolutize_config(&mut a.config)?;
    let (mut cfg, config_file) = resolve_config(&a.config, &a.overrides)?;
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    if cfg.mode == Mode::Da && a.target.is_none() {
        bail!(Error::Usage("--mode da needs --target".into()));
    }
    if cfg.mode == Mode::Pda && a.source.is_none() {
        bail!(Error::Usage("--mode pda needs --source".into()));
    }
    let resolution = a.data.resolution.unwrap_or_else(|| default_resolution(&cfg));
    // The pretext head is built in every mode, so jigsaw always needs a set.
    let needs_perms = cfg.task == Task::Jigsaw;

    create_out(&a.out)?;
    let mut m = Manifest::new("train", &TrainArgs { mode: Some(cfg.mode), ..a.clone() })?;
    m.resolved_config = Some(cfg.to_toml_string());
    m.seeds.insert("root".into(), cfg.seed);
    if let Some(f) = &config_file {
        m.input("config", f)?;
    }
    if let Some(p) = &a.perms {
        m.input("perms", p)?;
    }
    if !a.dry_run || a.data.data.is_some() {
        record_data(&mut m, &a.data)?;
    }
    m.write(&a.out.join(manifest::FILE_NAME))?;
    echo_resolved(&cfg);
    if a.dry_run {
        return Ok(());
    }

    let perms = load_perms(a.perms.as_deref(), &cfg, needs_perms)?;
    let ds = load_data(&a.data, resolution)?;
    let sel = select_training_data(&ds, cfg.mode, a.target.as_deref(), a.source.as_deref())?;
    let inputs = TrainInputs {
        labeled: &sel.labeled,
        unlabeled: sel.unlabeled.as_deref(),
        num_classes: ds.num_classes(),
    };
    let state = trainer::fit::<f32>(&cfg, inputs, perms.as_ref(), FitHooks::default())?;
    trainer::write_log(&state.history, a.out.join("log.csv"))?;
    let mut meta = trainer::checkpoint_metadata(&cfg, perms.as_ref(), &state);
    meta.insert("resolution".into(), resolution.to_string());
    meta.insert("class_names".into(), serde_json::to_string(ds.class_names())?);
    if let Some(t) = &a.target {
        meta.insert("target".into(), t.clone());
    }
    if let Some(s) = &a.source {
        meta.insert("source".into(), s.clone());
    }
    checkpoint::save(state.best(), &meta, a.out.join("checkpoint.safetensors"))?;
    println!("best epoch {} validation accuracy {:.4}", state.best_epoch, state.best_val_metric);
    Ok(())
}

fn meta_field<'a>(meta: &'a std::collections::BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")).into())
}

/// Evenly spaced subset of at most `limit` samples.
fn spread(samples: Vec<LabeledSample>, limit: Option<usize>) -> Vec<LabeledSample> {
    match limit {
        Some(n) if n < samples.len() => (0..n).map(|i| samples[i * samples.len() / n].clone()).collect(),
        _ => samples,
    }
}

fn eval(mut a: EvalArgs) -> Result<()> {
    a.data.absolutize()?;
    absolute(&mut a.checkpoint)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    create_out(&out)?;
    let mut m = Manifest::new("eval", &a)?;
    m.input("checkpoint", &a.checkpoint)?;
    record_data(&mut m, &a.data)?;

    let (model, meta) = checkpoint::load::<f32>(&a.checkpoint)?;
    let cfg = TrainConfig::from_toml_str(meta_field(&meta, "train_config")?)?;
    m.resolved_config = Some(cfg.to_toml_string());
    m.seeds.insert("root".into(), cfg.seed);
    m.write(&out.join(manifest::FILE_NAME))?;

    let resolution: usize = meta_field(&meta, "resolution")?
        .parse()
        .map_err(|_| Error::Checkpoint("unreadable resolution".into()))?;
    if let Some(r) = a.data.resolution {
        if r != resolution {
            bail!(Error::Config(format!("checkpoint was trained on {resolution}px images, --resolution is {r}")));
        }
    }
    let ds = load_data(&a.data, resolution)?;
    let classes: Vec<String> = serde_json::from_str(meta_field(&meta, "class_names")?)?;
    if classes != ds.class_names() {
        bail!(Error::Config(format!(
            "checkpoint classes {:?} do not match dataset classes {:?}",
            classes,
            ds.class_names()
        )));
    }
    let perms = meta.get("permset").map(|t| PermutationSet::parse(t, "checkpoint")).transpose()?;

    let domains = if !a.domain.is_empty() {
        a.domain.clone()
    } else if let Some(t) = meta.get("target") {
        vec![t.clone()]
    } else {
        ds.domain_names().iter().map(|s| s.to_string()).collect()
    };
    let ix = domains.iter().map(|d| ds.domain_index(d)).collect::<geos_core::Result<Vec<_>>>()?;
    let samples = spread(ds.gather(&ix), a.limit);

    let os = OSConfig {
        iterations: a.os_iterations,
        batch_size: a.os_batch,
        ..OSConfig::from_training(&cfg)
    }
    .with_overrides(a.os_lr, None, None);
    let sweep = osadapt::adapt_batch(&model, &samples, &os, perms.as_ref(), SweepOptions::default())?;

    let mut csv = String::from("os_iterations,accuracy\n");
    for (k, acc) in sweep.accuracy.iter().enumerate() {
        println!("it={k} accuracy={acc:.4}");
        csv.push_str(&format!("{k},{acc}\n"));
    }
    if let Some(p) = sweep.progress_fraction() {
        info!("adaptation lowered the pretext loss on {:.1}% of samples", 100.0 * p);
    }
    fs::write(out.join("result.csv"), csv)?;
    if let Some(t) = &a.trace {
        osadapt::write_traces(&sweep.traces, t)?;
    }
    Ok(())
}

fn protocol(a: ProtocolArgs) -> Result<()> {
    let mut a = match &a.from_manifest {
        Some(p) => ProtocolArgs {
            out: a.out.clone(),
            ..Manifest::read(p)?.replay_args("protocol")?
        },
        None => a,
    };
    a.data.absolutize()?;
    a.perms.as_mut().map(absolute).transpose()?;
    absolutize_config(&mut a.config)?;
    let protocol = a.protocol.ok_or_else(|| Error::Usage("--protocol is required".into()))?;
    let (train, config_file) = resolve_config(&a.config, &a.overrides)?;
    let spec = ProtocolSpec {
        repetitions: a.reps,
        methods: a.methods.clone(),
        os_max_iterations: a.os_iterations,
        os_batch_size: a.os_batch,
        eval_limit: a.eval_limit,
        full_sweep: a.full_sweep,
        max_pairs: a.max_pairs,
        ..ProtocolSpec::new(protocol, train)
    };
    spec.validate()?;
    if protocol != Protocol::DaMulti && !a.target.is_empty() {
        bail!(Error::Usage("--target applies to da_multi only".into()));
    }
    let resolution = a.data.resolution.unwrap_or_else(|| default_resolution(&spec.train));
    let needs_perms = a.methods.iter().any(|m| matches!(m, Method::Ges | Method::Geos));

    create_out(&a.out)?;
    let mut m = Manifest::new("protocol", &a)?;
    m.resolved_config = Some(spec.train.to_toml_string());
    m.seeds.insert("root".into(), spec.train.seed);
    if let Some(f) = &config_file {
        m.input("config", f)?;
    }
    if let Some(p) = &a.perms {
        m.input("perms", p)?;
    }
    record_data(&mut m, &a.data)?;
    m.write(&a.out.join(manifest::FILE_NAME))?;

    let perms = load_perms(a.perms.as_deref(), &spec.train, needs_perms)?;
    let ds = load_data(&a.data, resolution)?;
    let result = if protocol == Protocol::DaMulti {
        evalproto::run_da(&ds, &a.target, &spec, perms.as_ref())?
    } else {
        evalproto::run(&ds, &spec, perms.as_ref())?
    };
    for n in &result.notices {
        eprintln!("notice: {n}");
    }
    fs::write(a.out.join("result.csv"), evalproto::to_csv(&result.rows)?)?;
    fs::write(a.out.join("aggregates.csv"), evalproto::aggregates_csv(&result)?)?;
    let md = evalproto::markdown(&result);
    fs::write(a.out.join("result.md"), &md)?;
    print!("{md}");
    let failed = result.rows.iter().filter(|r| r.accuracy.is_none()).count();
    if failed > 0 {
        bail!(RowsFailed(failed));
    }
    Ok(())
}

/// Markdown rows for reference values, in first-seen method order; missing cells print `-`.
fn reference_rows(path: &Path, targets: &[String]) -> Result<String> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut methods: Vec<(String, Vec<ReferenceRow>)> = Vec::new();
    for row in reader.deserialize::<ReferenceRow>() {
        let row = row.with_context(|| format!("reading {}", path.display()))?;
        match methods.iter_mut().find(|(m, _)| *m == row.method) {
            Some((_, rows)) => rows.push(row),
            None => methods.push((row.method.clone(), vec![row])),
        }
    }
    let mut out = String::new();
    let mut notes = Vec::new();
    for (method, rows) in &methods {
        let mut line = format!("| {method} (reference) |");
        for t in targets.iter().map(String::as_str).chain([evalproto::AVERAGE_TARGET]) {
            match rows.iter().find(|r| r.target == t) {
                Some(r) => line.push_str(&format!(" {:.2} |", r.accuracy)),
                None => line.push_str(" - |"),
            }
        }
        out.push_str(&line);
        out.push('\n');
        notes.extend(rows.iter().filter(|r| !r.note.is_empty()).map(|r| format!("{method} {}: {}", r.target, r.note)));
    }
    if !notes.is_empty() {
        out.push('\n');
        for n in notes {
            out.push_str(&format!("- {n}\n"));
        }
    }
    Ok(out)
}

fn report(mut a: ReportArgs) -> Result<()> {
    absolute(&mut a.input)?;
    a.reference.as_mut().map(absolute).transpose()?;
    let format: evalproto::ReportFormat = a.format.parse()?;
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let result = evalproto::result_from_csv(&text)?;
    let mut rendered = evalproto::render(&result, format)?;
    if let Some(path) = &a.reference {
        if format != evalproto::ReportFormat::Markdown {
            bail!(Error::Usage("--reference applies to the md format only".into()));
        }
        rendered.push_str(&reference_rows(path, &result.targets)?);
    }
    let Some(out) = &a.out else {
        print!("{rendered}");
        return Ok(());
    };
    let name = match format {
        evalproto::ReportFormat::Csv => "result.csv",
        evalproto::ReportFormat::Markdown => "result.md",
        evalproto::ReportFormat::Gains => "gains.md",
        evalproto::ReportFormat::Aggregates => "aggregates.csv",
    };
    let target = out.join(name);
    if target.exists() && fs::canonicalize(&target)? == fs::canonicalize(&a.input)? {
        bail!(Error::Usage(format!("refusing to overwrite the input {}", a.input.display())));
    }
    create_out(out)?;
    let mut m = Manifest::new("report", &a)?;
    m.input("input", &a.input)?;
    if let Some(r) = &a.reference {
        m.input("reference", r)?;
    }
    m.write(&out.join(manifest::FILE_NAME))?;
    fs::write(&target, rendered)?;
    Ok(())
}
