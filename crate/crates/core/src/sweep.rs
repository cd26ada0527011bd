//! Experiment grids: enumeration, resumable execution and reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::am::{align_corpus, prepare_training_set, train_pipeline, Stage, StageLog, TrainOptions, TrainSchedule, TrainingSet};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::evaluate::{aggregate, compare_models, corpus_pairs, emit_heatmap, Attribution, EvalReport};
use crate::lexicon::{Lexicon, NaturalClassMap, PhoneClassMap};

/// Base schedule shared by every Experiment-1 dataset: the 35_40_40_40
/// tool default divided by the five augmentation copies.
pub const EXPERIMENT1_BASE: &str = "7_8_8_8";
pub const EXPERIMENT2_BASE: &str = "5_3_2_2";
pub const EXPERIMENT2_SCHEDULES: usize = 7;
pub const CONTROL_SCHEDULE: &str = "35_40_40_40";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub class_map: String,
    pub schedule: TrainSchedule,
    pub seed: u64,
    /// Human-readable variant name ("default", "mono_x2", "control", ...);
    /// not part of the run id.
    #[serde(default)]
    pub variant: String,
}

impl RunConfig {
    pub fn new(dataset: &str, class_map: &str, schedule: TrainSchedule, seed: u64, variant: &str) -> Self {
        Self {
            dataset: dataset.to_owned(),
            class_map: class_map.to_owned(),
            schedule,
            seed,
            variant: variant.to_owned(),
        }
    }

    /// Canonical JSON of the identifying fields, keys sorted.
    pub fn canonical(&self) -> String {
        let v = serde_json::json!({
            "class_map": self.class_map,
            "dataset": self.dataset,
            "max_gaussians": self.schedule.max_gaussians,
            "schedule": self.schedule.label(),
            "seed": self.seed,
        });
        v.to_string()
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::canonical`].
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.dataset, self.class_map, self.schedule.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Done,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub iterations: usize,
    pub final_log_likelihood: f64,
    pub gaussians: usize,
}

impl StageSummary {
    pub fn from_log(log: &StageLog) -> Self {
        let last = log.iterations.last();
        Self {
            stage: log.stage,
            iterations: log.iterations.len(),
            final_log_likelihood: last.map_or(log.initial_log_likelihood, |r| r.log_likelihood),
            gaussians: last.map_or(0, |r| r.gaussians),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config: RunConfig,
    pub status: RunStatus,
    pub report: Option<EvalReport>,
    pub wall_seconds: f64,
    pub stages: Vec<StageSummary>,
    pub error: Option<String>,
}

impl RunResult {
    /// The record without its wall time, for order- and timing-independent comparison.
    pub fn canonical(&self) -> String {
        let mut r = self.clone();
        r.wall_seconds = 0.0;
        serde_json::to_string(&r).expect("result serializes")
    }
}

fn scaled(schedule: &TrainSchedule, f: impl Fn(usize) -> usize, stage: Option<usize>) -> TrainSchedule {
    let mut c = schedule.counts();
    for (i, v) in c.iter_mut().enumerate() {
        if stage.is_none_or(|s| s == i) {
            *v = f(*v).max(1);
        }
    }
    let mut s = TrainSchedule::from_counts(c).expect("counts stay positive");
    s.max_gaussians = schedule.max_gaussians;
    s
}

/// The default schedule plus x0.5, x2 and x4 of each stage on its own.
/// Halving rounds up.
pub fn iteration_variants(base: &TrainSchedule) -> Vec<(String, TrainSchedule)> {
    let mut out = vec![("default".to_owned(), base.clone())];
    for (i, stage) in Stage::ALL.iter().enumerate() {
        out.push((format!("{}_x0.5", stage.name()), scaled(base, |c| c.div_ceil(2), Some(i))));
        out.push((format!("{}_x2", stage.name()), scaled(base, |c| c * 2, Some(i))));
        out.push((format!("{}_x4", stage.name()), scaled(base, |c| c * 4, Some(i))));
    }
    out
}

/// Dataset x class map x iteration variant.
pub fn enumerate_experiment1(
    datasets: &[String],
    class_maps: &[String],
    base: &TrainSchedule,
    seed: u64,
) -> Vec<RunConfig> {
    let variants = iteration_variants(base);
    let mut out = Vec::with_capacity(datasets.len() * class_maps.len() * variants.len());
    for d in datasets {
        for c in class_maps {
            for (name, s) in &variants {
                out.push(RunConfig::new(d, c, s.clone(), seed, name));
            }
        }
    }
    out
}

/// The doubling schedules, `base` first, plus one control run per dataset.
pub fn experiment2_schedules(base: &TrainSchedule, count: usize) -> Vec<TrainSchedule> {
    let mut out = Vec::with_capacity(count);
    let mut s = base.clone();
    for _ in 0..count {
        out.push(s.clone());
        s = s.doubled();
    }
    out
}

pub fn enumerate_experiment2(
    datasets: &[String],
    class_map: &str,
    base: &TrainSchedule,
    count: usize,
    seed: u64,
) -> Vec<RunConfig> {
    let control: TrainSchedule = CONTROL_SCHEDULE.parse().expect("valid control schedule");
    let mut out = Vec::new();
    for d in datasets {
        for s in experiment2_schedules(base, count) {
            let name = s.label();
            out.push(RunConfig::new(d, class_map, s, seed, &name));
        }
        out.push(RunConfig::new(d, class_map, control.clone(), seed, "control"));
    }
    out
}

/// Each count divided by `copy_count`, rounded to nearest, at least 1.
pub fn scale_schedule_for_augmentation(schedule: &TrainSchedule, copy_count: usize) -> Result<TrainSchedule> {
    if copy_count == 0 {
        return Err(Error::InvalidParameter("copy count must be at least 1".into()));
    }
    Ok(scaled(
        schedule,
        |c| (c as f64 / copy_count as f64).round() as usize,
        None,
    ))
}

/// Output of one executed run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub stages: Vec<StageSummary>,
}

/// Executes single runs. `Ok(None)` marks the run as skipped.
pub trait RunExecutor: Sync {
    fn execute(&self, config: &RunConfig) -> Result<Option<RunOutput>>;
}

impl<F> RunExecutor for F
where
    F: Fn(&RunConfig) -> Result<Option<RunOutput>> + Sync,
{
    fn execute(&self, config: &RunConfig) -> Result<Option<RunOutput>> {
        self(config)
    }
}

/// A corpus ready for training and evaluation.
pub struct Dataset {
    pub corpus: Corpus,
    pub lexicon: Lexicon,
    pub natural_classes: NaturalClassMap,
    training_set: TrainingSet,
}

impl Dataset {
    pub fn new(corpus: Corpus, lexicon: Lexicon, natural_classes: NaturalClassMap, options: &TrainOptions) -> Result<Self> {
        let training_set = prepare_training_set(&corpus, &lexicon, &options.feature_config)?;
        Ok(Self {
            corpus,
            lexicon,
            natural_classes,
            training_set,
        })
    }
}

/// Train, align the training data, and score it against its own annotation.
pub struct PipelineExecutor {
    pub datasets: HashMap<String, Dataset>,
    pub class_maps: HashMap<String, PhoneClassMap>,
    pub options: TrainOptions,
    /// When set, each run's model is saved under `<dir>/<run id>/`.
    pub artifacts: Option<PathBuf>,
}

impl RunExecutor for PipelineExecutor {
    fn execute(&self, config: &RunConfig) -> Result<Option<RunOutput>> {
        let (Some(data), Some(classes)) = (self.datasets.get(&config.dataset), self.class_maps.get(&config.class_map))
        else {
            return Ok(None);
        };
        let mut options = self.options.clone();
        options.seed = config.seed;
        let run_dir = self.artifacts.as_ref().map(|d| d.join(config.run_id()));
        options.stage_dir = None;
        options.log_path = None;
        if let Some(dir) = &run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let log = dir.join("stages.jsonl");
            let _ = std::fs::remove_file(&log);
            options.log_path = Some(log);
        }
        let trained = train_pipeline(&data.training_set, &config.schedule, classes, &options)?;
        if let Some(dir) = &run_dir {
            trained.model.save(&dir.join("final.mdl"))?;
        }
        let aligned = align_corpus(&trained.model, &data.corpus, &data.lexicon)?;
        let pairs = corpus_pairs(&data.corpus, &aligned.alignments)?;
        let report = aggregate(
            &pairs,
            &data.natural_classes,
            Attribution::Onset,
            &config.label(),
            &config.dataset,
        )?;
        if let Some(dir) = &run_dir {
            let path = dir.join("report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(Some(RunOutput {
            report,
            stages: trained.logs.iter().map(StageSummary::from_log).collect(),
        }))
    }
}

/// Complete records in a results store. Lines that do not parse (a write
/// torn by a crash) are ignored; for repeated ids the first record wins.
pub fn read_store(path: &Path) -> Result<Vec<RunResult>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path.display().to_string(), e)),
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunResult>(&line) {
            Ok(r) => {
                if seen.insert(r.run_id.clone()) {
                    out.push(r);
                }
            }
            Err(e) => log::warn!("{}:{}: skipping incomplete record ({e})", path.display(), n + 1),
        }
    }
    Ok(out)
}

/// Opens the store for appending, first terminating any torn final line.
fn open_store(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let len = f.metadata().map_err(|e| Error::io(path.display().to_string(), e))?.len();
    if len > 0 {
        let mut last = [0u8; 1];
        f.seek(SeekFrom::Start(len - 1))
            .and_then(|_| f.read_exact(&mut last))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if last[0] != b'\n' {
            f.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(f)
}

/// Execute every config not already in the store with `workers` threads.
/// Each finished run is appended to the store as one line by the calling
/// thread; failures are recorded and do not stop the grid. Returns one
/// result per config, in config order.
pub fn run_grid(configs: &[RunConfig], workers: usize, store: &Path, executor: &dyn RunExecutor) -> Result<Vec<RunResult>> {
    let mut known: HashMap<String, RunResult> = read_store(store)?.into_iter().map(|r| (r.run_id.clone(), r)).collect();
    let mut file = open_store(store)?;
    let mut queued = HashSet::new();
    let pending: Vec<&RunConfig> = configs
        .iter()
        .filter(|c| {
            let id = c.run_id();
            !known.contains_key(&id) && queued.insert(id)
        })
        .collect();
    log::info!(
        "{} runs: {} already stored, {} to execute",
        configs.len(),
        configs.len() - pending.len(),
        pending.len()
    );
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<RunResult>();
    let mut write_error: Option<Error> = None;
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(pending.len().max(1)) {
            let tx = tx.clone();
            let next = &next;
            let pending = &pending;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(config) = pending.get(i) else { break };
                let result = execute_one(config, executor);
                if tx.send(result).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for result in rx {
            if write_error.is_none() {
                let mut line = serde_json::to_string(&result).expect("result serializes");
                line.push('\n');
                if let Err(e) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
                    write_error = Some(Error::io(store.display().to_string(), e));
                }
            }
            known.insert(result.run_id.clone(), result);
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    Ok(configs
        .iter()
        .map(|c| known.get(&c.run_id()).cloned().expect("every config has a result"))
        .collect())
}

fn execute_one(config: &RunConfig, executor: &dyn RunExecutor) -> RunResult {
    let start = Instant::now();
    let run_id = config.run_id();
    log::info!("run {run_id} {} starting", config.label());
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| executor.execute(config)))
        .unwrap_or_else(|_| Err(Error::Sweep(format!("run {run_id} panicked"))));
    let wall_seconds = start.elapsed().as_secs_f64();
    let (status, report, stages, error) = match outcome {
        Ok(Some(out)) => (RunStatus::Done, Some(out.report), out.stages, None),
        Ok(None) => (RunStatus::Skipped, None, Vec::new(), Some("assets unavailable".to_owned())),
        Err(e) => {
            log::warn!("run {run_id} failed: {e}");
            (RunStatus::Failed, None, Vec::new(), Some(e.to_string()))
        }
    };
    RunResult {
        run_id,
        config: config.clone(),
        status,
        report,
        wall_seconds,
        stages,
        error,
    }
}

/// Store contents sorted by run id with wall times removed.
pub fn canonical_store(results: &[RunResult]) -> String {
    let mut v: Vec<&RunResult> = results.iter().collect();
    v.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    v.iter().map(|r| r.canonical() + "\n").collect()
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub ranking: Vec<EvalReport>,
    pub best: RunResult,
    pub files: Vec<PathBuf>,
}

/// Per-dataset heatmaps, an overall ranking table and a best-run summary.
pub fn report_grid(results: &[RunResult], out_dir: &Path) -> Result<GridReport> {
    let done: Vec<&RunResult> = results
        .iter()
        .filter(|r| r.status == RunStatus::Done && r.report.is_some())
        .collect();
    if done.is_empty() {
        return Err(Error::Sweep("no completed runs to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut files = Vec::new();
    let mut by_dataset: BTreeMap<&str, Vec<EvalReport>> = BTreeMap::new();
    for r in &done {
        let mut rep = r.report.clone().expect("done runs carry a report");
        rep.model = format!("{} {}", r.config.class_map, r.config.schedule.label());
        by_dataset.entry(r.config.dataset.as_str()).or_default().push(rep);
    }
    for (dataset, mut reports) in by_dataset {
        reports.sort_by(|a, b| a.model.cmp(&b.model));
        let safe: String = dataset
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        files.extend(emit_heatmap(&reports, &out_dir.join(format!("heatmap_{safe}")))?);
    }
    let reports: Vec<EvalReport> = done.iter().map(|r| r.report.clone().expect("report")).collect();
    let ranking = compare_models(&reports);
    let by_label: HashMap<&str, &RunResult> = done
        .iter()
        .map(|r| (r.report.as_ref().expect("report").model.as_str(), *r))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Sweep(e.to_string());
    w.write_record(["rank", "run_id", "dataset", "class_map", "schedule", "seed", "overall_mean_abs_ms", "overall_mean_signed_ms", "boundaries"])
        .map_err(csv_err)?;
    for (i, rep) in ranking.iter().enumerate() {
        let r = by_label[rep.model.as_str()];
        w.write_record([
            (i + 1).to_string(),
            r.run_id.clone(),
            r.config.dataset.clone(),
            r.config.class_map.clone(),
            r.config.schedule.label(),
            r.config.seed.to_string(),
            format!("{:.2}", rep.overall_mean_abs_ms),
            format!("{:.2}", rep.overall_mean_signed_ms),
            rep.count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let ranking_path = out_dir.join("ranking.csv");
    let bytes = w.into_inner().map_err(|e| Error::Sweep(e.to_string()))?;
    std::fs::write(&ranking_path, bytes).map_err(|e| Error::io(ranking_path.display().to_string(), e))?;
    files.push(ranking_path);

    let best = by_label[ranking[0].model.as_str()].clone();
    let summary = format!(
        "best run {}\ndataset: {}\nclass map: {}\nschedule: {}\nseed: {}\noverall mean absolute difference: {:.2} ms\n",
        best.run_id,
        best.config.dataset,
        best.config.class_map,
        best.config.schedule.label(),
        best.config.seed,
        ranking[0].overall_mean_abs_ms
    );
    let best_path = out_dir.join("best.txt");
    std::fs::write(&best_path, summary).map_err(|e| Error::io(best_path.display().to_string(), e))?;
    files.push(best_path);
    Ok(GridReport { ranking, best, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(s: &str) -> TrainSchedule {
        s.parse().unwrap()
    }

    #[test]
    fn experiment1_has_208_distinct_runs() {
        let ds: Vec<String> = ["north", "north-aug", "south", "south-aug"].map(String::from).to_vec();
        let cm: Vec<String> = ["4", "9", "22", "identity"].map(String::from).to_vec();
        let grid = enumerate_experiment1(&ds, &cm, &sched(EXPERIMENT1_BASE), 0);
        assert_eq!(grid.len(), 208);
        let ids: HashSet<String> = grid.iter().map(RunConfig::run_id).collect();
        assert_eq!(ids.len(), 208);
        assert_eq!(iteration_variants(&sched("7_8_8_8")).len(), 13);
        let labels: Vec<String> = iteration_variants(&sched("7_8_8_8")).iter().map(|v| v.1.label()).collect();
        assert!(labels.contains(&"28_8_8_8".to_owned()));
        assert!(labels.contains(&"4_8_8_8".to_owned()));
    }

    #[test]
    fn experiment2_doubles() {
        let s = experiment2_schedules(&sched(EXPERIMENT2_BASE), EXPERIMENT2_SCHEDULES);
        assert_eq!(s[0].label(), "5_3_2_2");
        assert_eq!(s[6].label(), "320_192_128_128");
        let grid = enumerate_experiment2(&["south".to_owned()], "identity", &s[0], 7, 0);
        assert_eq!(grid.len(), 8);
        assert_eq!(grid[7].schedule.label(), CONTROL_SCHEDULE);
    }

    #[test]
    fn augmentation_scaling() {
        assert_eq!(scale_schedule_for_augmentation(&sched("35_40_40_40"), 5).unwrap().label(), "7_8_8_8");
        assert_eq!(scale_schedule_for_augmentation(&sched("5_3_2_2"), 5).unwrap().label(), "1_1_1_1");
        assert_eq!(scale_schedule_for_augmentation(&sched("5_3_2_2"), 1).unwrap().label(), "5_3_2_2");
        assert!(scale_schedule_for_augmentation(&sched("5_3_2_2"), 0).is_err());
    }

    #[test]
    fn run_id_is_stable() {
        let c = RunConfig::new("d", "c", sched("5_3_2_2"), 1, "x");
        let mut d = c.clone();
        d.variant = "other".into();
        assert_eq!(c.run_id(), d.run_id());
        assert_eq!(c.run_id().len(), 16);
        d.seed = 2;
        assert_ne!(c.run_id(), d.run_id());
    }
}
