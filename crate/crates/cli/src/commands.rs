//! Subcommand implementations. Data goes to stdout or the named report
//! files; diagnostics go to stderr.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use mstcn::checkpoint::{encode_checkpoint, load_checkpoint};
use mstcn::data::{load_dataset_dir, load_series, subjects, synthesize_dataset, ClassSchema, LabeledSeries, SynthSpec};
use mstcn::evaluate::{absolute_count_error, evaluate_held_out, HeldOutEval, RecordingEval};
use mstcn::gradcheck::{check_model_gradients, GradCheckOptions};
use mstcn::loss::Normalization;
use mstcn::metrics::{agreement_report, count_events, counts_per_class, decode, extract_segments, AgreementReport, ClassFilter, SdMode};
use mstcn::train::{predict, training_slices, write_metrics_log, TrainConfig, Trainer};
use mstcn::{count_parameters, CheckpointError, ModelConfig, MsTcnNet};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::manifest::{config_hash, sibling, write_atomic, write_json_atomic, RunManifest, TOOL_VERSION};
use crate::{CountArgs, DataArgs};

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum NormArg {
    Elementwise,
    Conventional,
}

impl From<NormArg> for Normalization {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Elementwise => Normalization::Elementwise,
            NormArg::Conventional => Normalization::Conventional,
        }
    }
}

/// The gradient check ran to completion and found a mismatch.
#[derive(Debug)]
pub struct GradCheckFailed(pub f64);

impl fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradient check failed: max relative error {:.3e}", self.0)
    }
}

impl std::error::Error for GradCheckFailed {}

/// Maps the first recognised error in the chain to a process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use mstcn::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                E::Io { .. } => 1,
                E::InvalidArgument(_) => 2,
                E::Format { .. } | E::Rate { .. } | E::Overlap { .. } | E::Json(_) => 3,
                E::Checkpoint(c) => checkpoint_code(c),
                E::Contract(_) | E::Schema(_) | E::Spec(_) => 4,
                E::Diverged { .. } => 5,
                E::CheckInvalid(_) => 6,
            };
        }
        if let Some(c) = cause.downcast_ref::<CheckpointError>() {
            return checkpoint_code(c);
        }
        if cause.is::<GradCheckFailed>() {
            return 6;
        }
        if cause.is::<serde_json::Error>() {
            return 3;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound { 2 } else { 1 };
        }
    }
    1
}

fn checkpoint_code(c: &CheckpointError) -> u8 {
    match c {
        CheckpointError::BadMagic | CheckpointError::Truncated(_) | CheckpointError::Manifest(_) => 3,
        CheckpointError::Version { .. } | CheckpointError::Shape(_) => 4,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| mstcn::Error::io(path, e))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = read_json(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let mut manifest = RunManifest::start("synth", &spec)?;
    manifest.config_paths.push(spec_path.to_owned());
    manifest.seeds.push(spec.seed);
    let data = synthesize_dataset(&spec)?;
    mstcn::data::write_dataset_dir(out, &spec.schema()?, &data)?;
    manifest.outputs.push(out.to_owned());
    manifest.finish("ok", &out.join("run.json"))?;
    eprintln!("wrote {} recordings to {}", data.len(), out.display());
    Ok(())
}

pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
}

fn load_train_config(path: &Path, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(path)?;
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(lr) = o.lr {
        cfg.lr = lr;
    }
    Ok(cfg)
}

/// Splits `data` into (training, held-out) recordings; every held-out name
/// must be a subject of the dataset.
fn split<'a>(data: &'a [LabeledSeries], held_out: &[String]) -> Result<(Vec<&'a LabeledSeries>, Vec<&'a LabeledSeries>)> {
    let known = subjects(data);
    if let Some(bad) = held_out.iter().find(|h| !known.contains(h)) {
        return Err(mstcn::Error::InvalidArgument(format!("unknown subject {bad:?}; dataset has {known:?}")).into());
    }
    Ok(data.iter().partition(|r| !held_out.contains(&r.series.subject_id)))
}

fn save_checkpoint_atomic(net: &MsTcnNet, seed: u64, epoch: usize, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net, seed, epoch)?)
}

pub fn train(data: &DataArgs, config_path: &Path, out: &Path, held_out: &[String], o: TrainOverrides) -> Result<()> {
    let cfg = load_train_config(config_path, &o)?;
    let mut manifest = RunManifest::start("train", &cfg)?;
    manifest.config_paths.push(config_path.to_owned());
    manifest.inputs.push(data.data.clone());
    manifest.seeds.push(cfg.seed);

    let (schema, dataset) = load_dataset_dir(&data.data, data.rate)?;
    check_classes(&schema, &cfg.model)?;
    let (train_set, _) = split(&dataset, held_out)?;
    if train_set.is_empty() {
        return Err(mstcn::Error::InvalidArgument("every subject is held out".into()).into());
    }
    let slices = training_slices(&cfg, &train_set)?;
    if slices.is_empty() {
        return Err(mstcn::Error::InvalidArgument("every recording is shorter than one training slice".into()).into());
    }
    eprintln!("training on {} slices from {} recordings", slices.len(), train_set.len());

    let mut trainer = Trainer::new(cfg.clone())?;
    let outcome = trainer.run(&slices);
    // The trainer aborts before a non-finite step, so its weights are always
    // the last good ones.
    let metrics = sibling(out, ".metrics.jsonl");
    let mut log = Vec::new();
    write_metrics_log(trainer.log(), &mut log)?;
    write_atomic(&metrics, &log)?;
    save_checkpoint_atomic(trainer.net(), cfg.seed, trainer.epoch(), out)?;
    manifest.outputs.extend([out.to_owned(), metrics]);
    let status = if outcome.is_ok() { "ok" } else { "diverged" };
    manifest.finish(status, &sibling(out, ".run.json"))?;
    outcome?;
    Ok(())
}

fn check_classes(schema: &ClassSchema, model: &ModelConfig) -> Result<()> {
    if schema.len() != model.num_classes {
        return Err(mstcn::Error::Schema(format!(
            "label schema has {} classes, model config has {}",
            schema.len(),
            model.num_classes
        ))
        .into());
    }
    Ok(())
}

/// Class indices forming the all-jumps total.
fn jump_classes(schema: &ClassSchema, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((1..schema.len()).collect());
    }
    let ids = names.iter().map(|n| schema.index_of(n)).collect::<mstcn::Result<Vec<_>>>()?;
    if ids.contains(&0) {
        return Err(mstcn::Error::InvalidArgument("the null class cannot be counted".into()).into());
    }
    Ok(ids)
}

#[derive(Serialize)]
struct EvalReport {
    tool_version: &'static str,
    checkpoint: String,
    config_hash: String,
    held_out: Vec<String>,
    min_duration: usize,
    agreement: AgreementReport,
    oversegmentation_ratio: Option<f64>,
    sample_accuracy: f64,
    recordings: Vec<RecordingEval>,
}

pub fn eval(data: &DataArgs, ckpt: &Path, held_out: &[String], report: &Path, count: &CountArgs, predicted_spread_sd: bool) -> Result<()> {
    let (net, meta) = load_checkpoint(ckpt)?;
    let (schema, dataset) = load_dataset_dir(&data.data, data.rate)?;
    check_classes(&schema, &net.config)?;
    let jumps = jump_classes(&schema, &count.jumps)?;
    let (_, test) = split(&dataset, held_out)?;
    let mode = if predicted_spread_sd { SdMode::PredictedSpread } else { SdMode::PairedDifference };

    let mut manifest = RunManifest::start("eval", &meta.config)?;
    manifest.inputs.extend([data.data.clone(), ckpt.to_owned()]);
    manifest.seeds.push(meta.seed);

    let ev = evaluate_held_out(&net, &test, count.min_duration)?;
    let out = EvalReport {
        tool_version: TOOL_VERSION,
        checkpoint: ckpt.display().to_string(),
        config_hash: config_hash(&meta.config)?,
        held_out: held_out.to_vec(),
        min_duration: count.min_duration,
        agreement: agreement_report(&ev.units, schema.names(), &jumps, mode)?,
        oversegmentation_ratio: ev.oversegmentation_ratio,
        sample_accuracy: ev.sample_accuracy,
        recordings: ev.recordings,
    };
    write_json_atomic(report, &out)?;
    manifest.outputs.push(report.to_owned());
    manifest.finish("ok", &sibling(report, ".run.json"))?;
    let r = out.agreement.pearson_r.map_or("n/a".to_string(), |r| format!("{r:.3}"));
    eprintln!("overall {}  r={r}", out.agreement.overall.loa);
    Ok(())
}

fn parse_stages(spec: &str) -> Result<Vec<usize>> {
    let bad = || mstcn::Error::InvalidArgument(format!("bad stage list {spec:?}; use a..b or a,b,c"));
    let stages: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if stages.is_empty() || stages.contains(&0) {
        return Err(bad().into());
    }
    Ok(stages)
}

#[derive(Serialize)]
struct StageResult {
    stages: usize,
    agreement: AgreementReport,
    all_jumps_abs_count_error: usize,
    oversegmentation_ratio: Option<f64>,
    sample_accuracy: f64,
}

#[derive(Serialize)]
struct SweepReport {
    tool_version: &'static str,
    config_hash: String,
    folds: Vec<String>,
    min_duration: usize,
    results: Vec<StageResult>,
}

pub fn sweep_stages(data: &DataArgs, config_path: &Path, stages: &str, held_out: &[String], report: &Path, count: &CountArgs, workers: usize) -> Result<()> {
    let cfg: TrainConfig = read_json(config_path)?;
    let stage_list = parse_stages(stages)?;
    let (schema, dataset) = load_dataset_dir(&data.data, data.rate)?;
    check_classes(&schema, &cfg.model)?;
    let jumps = jump_classes(&schema, &count.jumps)?;
    let folds = if held_out.is_empty() { subjects(&dataset) } else { held_out.to_vec() };
    if folds.len() < 2 && held_out.is_empty() {
        return Err(mstcn::Error::InvalidArgument("leave-one-subject-out needs at least two subjects".into()).into());
    }
    for f in &folds {
        split(&dataset, std::slice::from_ref(f))?;
    }

    let mut manifest = RunManifest::start("sweep-stages", &cfg)?;
    manifest.config_paths.push(config_path.to_owned());
    manifest.inputs.push(data.data.clone());
    manifest.seeds.push(cfg.seed);

    // One job per (stage count, fold); each trains from the same seed.
    let jobs: Vec<(usize, &String)> = stage_list.iter().flat_map(|&s| folds.iter().map(move |f| (s, f))).collect();
    let results: Mutex<Vec<Option<mstcn::Result<HeldOutEval>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_job = |&(s, fold): &(usize, &String)| -> mstcn::Result<HeldOutEval> {
        let mut c = cfg.clone();
        c.model.num_stages = s;
        let (train_set, test) = dataset.iter().partition::<Vec<&LabeledSeries>, _>(|r| &r.series.subject_id != fold);
        let out = mstcn::train::train(&c, &train_set)?;
        eprintln!("stages {s} fold {fold}: final loss {:.5}", out.log.last().map_or(f64::NAN, |r| r.total));
        evaluate_held_out(&out.net, &test, count.min_duration)
    };
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = run_job(job);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let mut by_job = results.into_inner().expect("worker panicked").into_iter();

    let mut out = Vec::new();
    for &s in &stage_list {
        let mut recs = Vec::new();
        for _ in &folds {
            recs.extend(by_job.next().flatten().expect("every job ran")?.recordings);
        }
        let pooled = HeldOutEval::from_recordings(recs, schema.len());
        out.push(StageResult {
            stages: s,
            agreement: agreement_report(&pooled.units, schema.names(), &jumps, SdMode::PairedDifference)?,
            all_jumps_abs_count_error: absolute_count_error(&pooled.units, &jumps),
            oversegmentation_ratio: pooled.oversegmentation_ratio,
            sample_accuracy: pooled.sample_accuracy,
        });
    }
    let sweep = SweepReport {
        tool_version: TOOL_VERSION,
        config_hash: config_hash(&cfg)?,
        folds,
        min_duration: count.min_duration,
        results: out,
    };
    write_json_atomic(report, &sweep)?;
    manifest.outputs.push(report.to_owned());
    manifest.finish("ok", &sibling(report, ".run.json"))?;
    Ok(())
}

/// Small enough for an exhaustive finite-difference check in seconds.
pub fn gradcheck_default_config() -> ModelConfig {
    ModelConfig { num_stages: 2, layers_per_stage: 4, num_filters: 8, in_channels: 3, num_classes: 4, ..Default::default() }
}

fn model_config(path: Option<&Path>, default: ModelConfig) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => default,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn gradcheck(config: Option<&Path>, slice_samples: usize, seed: u64, h: f64, tol: f64, max_coords: usize, norm: NormArg) -> Result<()> {
    let cfg = model_config(config, gradcheck_default_config())?;
    let opts = GradCheckOptions { h, tol, max_coords, seed, ..Default::default() };
    let report = check_model_gradients(&cfg, slice_samples, seed, norm.into(), opts)?;
    print_json(&report)?;
    if !report.passed {
        return Err(GradCheckFailed(report.max_rel_error).into());
    }
    Ok(())
}

pub fn paramcount(config: Option<&Path>) -> Result<()> {
    let cfg = model_config(config, ModelConfig::default())?;
    println!("{}", count_parameters(&cfg));
    Ok(())
}

#[derive(Serialize)]
struct CountOutput {
    series: String,
    min_duration: usize,
    per_class: std::collections::BTreeMap<String, usize>,
    all_jumps: usize,
}

pub fn count(ckpt: &Path, series_path: &Path, schema_path: &Path, rate: f64, args: &CountArgs) -> Result<()> {
    let (net, _) = load_checkpoint(ckpt)?;
    let schema = ClassSchema::load(schema_path)?;
    check_classes(&schema, &net.config)?;
    let jumps = jump_classes(&schema, &args.jumps)?;
    let series = load_series(series_path, rate)?;
    let outputs = predict(&net, &series)?;
    let track = decode(&outputs.last().expect("at least one stage").probs);
    let segs = extract_segments(&track, args.min_duration);
    let counts = counts_per_class(&segs, schema.len());
    let out = CountOutput {
        series: series_path.display().to_string(),
        min_duration: args.min_duration,
        per_class: schema.names().iter().cloned().zip(counts).skip(1).collect(),
        all_jumps: count_events(&segs, &ClassFilter::Set(jumps), schema.len())?,
    };
    print_json(&out)
}
