//! Viterbi-EM training: flat start, monophone, triphone, LDA and SAT stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gmm::{moments, DiagGmm};
use super::graph::{compile_training_graph, Segment, TrainingGraph};
use super::model::{
    AcousticModel, HmmPhoneModel, ModelKey, SpeakerTransform, Stage, PHONE_STATES, SILENCE_STATES,
};
use super::sat::estimate_speaker_transform;
use super::viterbi::{emission_table, path_score, resolve_graph, viterbi, UtteranceGraph, ViterbiPath};
use crate::augment::stable_hash;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::features::{
    apply_transform, compute_corpus_features, estimate_lda, splice, FeatureConfig, FeatureMatrix, LDA_RIDGE,
};
use crate::lexicon::{Lexicon, PhoneClassMap};

pub const MIN_TRANSITION_PROB: f64 = 0.01;
pub const MAX_TRANSITION_PROB: f64 = 0.99;
/// A state may hold one component per this many aligned frames.
pub const FRAMES_PER_COMPONENT: f64 = 20.0;
/// EM steps run on a freshly split mixture before it competes with the
/// unsplit update.
pub const SPLIT_INNER_STEPS: usize = 3;
pub const DEFAULT_MAX_GAUSSIANS: [usize; 4] = [128, 512, 512, 512];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub mono: usize,
    pub tri: usize,
    pub lda: usize,
    pub sat: usize,
    pub max_gaussians: [usize; 4],
}

impl TrainSchedule {
    pub fn new(mono: usize, tri: usize, lda: usize, sat: usize) -> Result<Self> {
        if [mono, tri, lda, sat].contains(&0) {
            return Err(Error::Schedule(format!(
                "iteration counts must be at least 1, got {mono}_{tri}_{lda}_{sat}"
            )));
        }
        Ok(Self {
            mono,
            tri,
            lda,
            sat,
            max_gaussians: DEFAULT_MAX_GAUSSIANS,
        })
    }

    pub fn label(&self) -> String {
        format!("{}_{}_{}_{}", self.mono, self.tri, self.lda, self.sat)
    }

    pub fn counts(&self) -> [usize; 4] {
        [self.mono, self.tri, self.lda, self.sat]
    }

    pub fn from_counts(c: [usize; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn iterations(&self, stage: Stage) -> usize {
        self.counts()[stage.index()]
    }

    pub fn doubled(&self) -> Self {
        let mut s = self.clone();
        s.mono *= 2;
        s.tri *= 2;
        s.lda *= 2;
        s.sat *= 2;
        s
    }
}

impl FromStr for TrainSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('_').collect();
        if parts.len() != 4 {
            return Err(Error::Schedule(format!("expected m_t_l_s, got {s:?}")));
        }
        let mut c = [0usize; 4];
        for (slot, p) in c.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::Schedule(format!("{p:?} in {s:?} is not a count")))?;
        }
        Self::from_counts(c)
    }
}

impl fmt::Display for TrainSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    pub feature_config: FeatureConfig,
    pub lda_dim: usize,
    pub splice: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub variance_floor_scale: f64,
    pub min_sat_frames: usize,
    /// Stage logs are appended here as JSON lines.
    pub log_path: Option<PathBuf>,
    /// Each completed stage's model is saved here.
    pub stage_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_config: FeatureConfig::default(),
            lda_dim: 40,
            splice: 3,
            variance_floor_scale: 0.01,
            min_sat_frames: 100,
            log_path: None,
            stage_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub id: String,
    pub speaker: String,
    pub graph: TrainingGraph,
    pub duration: f64,
    /// CMVN-normalized static cepstra.
    pub statics: FeatureMatrix,
    /// Statics with deltas and delta-deltas.
    pub full: FeatureMatrix,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub utterances: Vec<TrainUtterance>,
    /// Utterances left out, with the reason.
    pub skipped: Vec<(String, String)>,
    pub feature_config: FeatureConfig,
    pub inventory: Vec<String>,
}

/// Features and graphs for every utterance; utterances too short for their
/// graph are skipped and reported.
pub fn prepare_training_set(corpus: &Corpus, lexicon: &Lexicon, config: &FeatureConfig) -> Result<TrainingSet> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let feats = compute_corpus_features(corpus, config)?;
    let mut utterances = Vec::new();
    let mut skipped = Vec::new();
    let mut inventory = BTreeSet::new();
    for (u, f) in corpus.utterances.iter().zip(feats) {
        let graph = compile_training_graph(&u.words(), lexicon)?;
        let need = graph.min_frames();
        if f.full.frames() < need {
            skipped.push((
                u.id.clone(),
                format!("{} frames, graph needs {need}", f.full.frames()),
            ));
            continue;
        }
        for s in graph.phones() {
            inventory.insert(s.label().to_owned());
        }
        utterances.push(TrainUtterance {
            id: u.id.clone(),
            speaker: u.speaker_id.clone(),
            graph,
            duration: u.duration(),
            statics: f.statics,
            full: f.full,
        });
    }
    if utterances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for (id, why) in &skipped {
        log::warn!("skipping {id}: {why}");
    }
    Ok(TrainingSet {
        utterances,
        skipped,
        feature_config: config.clone(),
        inventory: inventory.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: Stage,
    pub iteration: usize,
    pub log_likelihood: f64,
    pub gaussians: usize,
    pub zero_occupancy: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub stage: Stage,
    /// Alignment-conditional log-likelihood before the first iteration.
    pub initial_log_likelihood: f64,
    pub iterations: Vec<IterationRecord>,
}

impl StageLog {
    /// Largest drop between consecutive values (including the initial one).
    pub fn max_decrease(&self) -> f64 {
        let mut prev = self.initial_log_likelihood;
        let mut worst = 0.0f64;
        for r in &self.iterations {
            worst = worst.max(prev - r.log_likelihood);
            prev = r.log_likelihood;
        }
        worst
    }
}

/// A Viterbi path together with the resolved graph it indexes.
#[derive(Debug, Clone)]
pub struct UttPath {
    pub graph: UtteranceGraph,
    pub path: ViterbiPath,
}

/// Trained model plus everything needed to continue training.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub model: AcousticModel,
    pub log: StageLog,
    pub paths: Vec<UttPath>,
    /// Features in this stage's space, before any speaker transform.
    pub features: Vec<FeatureMatrix>,
}

fn global_moments(feats: &[FeatureMatrix]) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<&[f64]> = feats.iter().flat_map(|f| f.rows()).collect();
    let dims = feats.first().map_or(0, FeatureMatrix::dims);
    moments(&rows, &vec![1e-10; dims]).ok_or(Error::EmptyCorpus)
}

fn floor_from(var: &[f64], scale: f64) -> Vec<f64> {
    var.iter().map(|v| (v * scale).max(1e-10)).collect()
}

fn pdf_seed(seed: u64, stage: Stage, iteration: usize, key: &ModelKey, state: usize) -> u64 {
    stable_hash(&format!("{seed}/{stage}/{iteration}/{}/{state}", key.encode()))
}

/// Uniform segmentation over the non-optional segments.
pub fn uniform_path(graph: &TrainingGraph, ug: &UtteranceGraph, frames: usize) -> Result<Vec<usize>> {
    let exp = &ug.expanded;
    let mut seg_states: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, st) in exp.states.iter().enumerate() {
        if !graph.segments[st.segment].is_optional() {
            seg_states.entry(st.segment).or_default().push(i);
        }
    }
    let segs: Vec<&Vec<usize>> = seg_states.values().collect();
    let k = segs.len();
    let need: usize = segs.iter().map(|s| s.len()).sum();
    if frames < need || k == 0 {
        return Err(Error::NoPath {
            frames,
            required: need,
        });
    }
    let mut path = Vec::with_capacity(frames);
    for (j, states) in segs.iter().enumerate() {
        let (a, b) = (j * frames / k, (j + 1) * frames / k);
        let n = b - a;
        let per = states.len();
        for (si, &s) in states.iter().enumerate() {
            let count = (si + 1) * n / per - si * n / per;
            path.extend(std::iter::repeat(s).take(count));
        }
    }
    Ok(path)
}

/// All states initialized to the global mean and variance, uniform
/// transitions, and a uniform segmentation of every utterance.
pub fn flat_start(set: &TrainingSet, options: &TrainOptions) -> Result<(AcousticModel, Vec<UttPath>, f64)> {
    let feats: Vec<FeatureMatrix> = set.utterances.iter().map(|u| u.full.clone()).collect();
    let (mean, var) = global_moments(&feats)?;
    let gmm = DiagGmm::single(mean, var)?;
    let mut hmms = BTreeMap::new();
    hmms.insert(ModelKey::Silence, HmmPhoneModel::uniform(SILENCE_STATES, gmm.clone()));
    for p in &set.inventory {
        hmms.insert(ModelKey::Mono(p.clone()), HmmPhoneModel::uniform(PHONE_STATES, gmm.clone()));
    }
    let model = AcousticModel {
        stage: Stage::Mono,
        feature_config: set.feature_config.clone(),
        dims: gmm.dims(),
        inventory: set.inventory.clone(),
        class_map: None,
        hmms,
        lda: None,
        speaker_transforms: BTreeMap::new(),
        schedule_label: String::new(),
    };
    let _ = options;
    let results: Vec<(UttPath, f64)> = set
        .utterances
        .par_iter()
        .zip(&feats)
        .map(|(u, f)| {
            let ug = resolve_graph(&model, &u.graph)?;
            let states = uniform_path(&u.graph, &ug, f.frames())?;
            let em = emission_table(&model, &ug, f, None);
            let score = path_score(&ug.expanded, &em, &states).expect("uniform path is admissible");
            Ok((
                UttPath {
                    graph: ug,
                    path: ViterbiPath { states, score },
                },
                score,
            ))
        })
        .collect::<Result<_>>()?;
    let ll = results.iter().map(|r| r.1).sum();
    Ok((model, results.into_iter().map(|r| r.0).collect(), ll))
}

/// Hard-count statistics from a set of paths.
struct Stats {
    frames: BTreeMap<(ModelKey, usize), Vec<(u32, u32)>>,
    transitions: BTreeMap<(ModelKey, usize), (f64, f64)>,
}

fn accumulate(paths: &[UttPath]) -> Stats {
    let mut frames: BTreeMap<(ModelKey, usize), Vec<(u32, u32)>> = BTreeMap::new();
    let mut transitions: BTreeMap<(ModelKey, usize), (f64, f64)> = BTreeMap::new();
    for (u, up) in paths.iter().enumerate() {
        let exp = &up.graph.expanded;
        let keys = &up.graph.pdf_keys;
        let mut local_frames: Vec<Vec<u32>> = vec![Vec::new(); keys.len()];
        let mut local_trans = vec![(0.0, 0.0); keys.len()];
        for (t, &s) in up.path.states.iter().enumerate() {
            let pdf = exp.states[s].pdf;
            local_frames[pdf].push(t as u32);
            if let Some(&next) = up.path.states.get(t + 1) {
                if next == s {
                    local_trans[pdf].0 += 1.0;
                } else {
                    local_trans[pdf].1 += 1.0;
                }
            }
        }
        for (i, key) in keys.iter().enumerate() {
            if !local_frames[i].is_empty() {
                frames
                    .entry(key.clone())
                    .or_default()
                    .extend(local_frames[i].iter().map(|&t| (u as u32, t)));
            }
            let e = transitions.entry(key.clone()).or_insert((0.0, 0.0));
            e.0 += local_trans[i].0;
            e.1 += local_trans[i].1;
        }
    }
    Stats { frames, transitions }
}

/// Result of one EM iteration.
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub model: AcousticModel,
    pub paths: Vec<UttPath>,
    pub log_likelihood: f64,
    pub zero_occupancy: usize,
}

/// Per-run context for an EM iteration.
pub struct EmContext<'a> {
    pub set: &'a TrainingSet,
    /// Features in the model's space, speaker transforms already applied.
    pub features: &'a [FeatureMatrix],
    /// Per-utterance log Jacobian of the speaker transform, added per frame.
    pub log_dets: Option<&'a [f64]>,
    pub floor: &'a [f64],
    pub seed: u64,
}

/// Pick components to split, largest occupancy first, until the model
/// holds `target` components or every state is at its cap. The cap for a
/// state is one component per [`FRAMES_PER_COMPONENT`] frames of occupancy
/// (unbounded for states that have never been updated).
pub fn plan_splits(
    model: &AcousticModel,
    target: usize,
    eligible: impl Fn(&ModelKey, usize) -> bool,
) -> BTreeMap<(ModelKey, usize), Vec<usize>> {
    let mut total = model.gaussian_count();
    let mut cands: Vec<(f64, ModelKey, usize, usize)> = Vec::new();
    let mut room: BTreeMap<(ModelKey, usize), usize> = BTreeMap::new();
    for (key, hmm) in &model.hmms {
        for (si, st) in hmm.states.iter().enumerate() {
            if !eligible(key, si) {
                continue;
            }
            let k = st.gmm.num_components();
            let cap = if st.occupancy > 0.0 {
                ((st.occupancy / FRAMES_PER_COMPONENT).floor() as usize).max(1)
            } else {
                usize::MAX
            };
            room.insert((key.clone(), si), cap.saturating_sub(k));
            for (c, w) in st.gmm.weights().iter().enumerate() {
                let occ = if st.occupancy > 0.0 { w * st.occupancy } else { *w };
                cands.push((occ, key.clone(), si, c));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| (&a.1, a.2, a.3).cmp(&(&b.1, b.2, b.3))));
    let mut plan: BTreeMap<(ModelKey, usize), Vec<usize>> = BTreeMap::new();
    for (_, key, si, c) in cands {
        if total >= target {
            break;
        }
        let r = room.get_mut(&(key.clone(), si)).expect("room entry");
        if *r == 0 {
            continue;
        }
        *r -= 1;
        plan.entry((key, si)).or_default().push(c);
        total += 1;
    }
    plan
}

/// Split the planned components of every state (no retraining).
pub fn split_gaussians(model: &AcousticModel, target: usize, seed: u64) -> AcousticModel {
    let plan = plan_splits(model, target, |_, _| true);
    let mut out = model.clone();
    for ((key, si), comps) in plan {
        let st = &mut out.hmms.get_mut(&key).expect("planned key").states[si];
        let mut rng = ChaCha8Rng::seed_from_u64(pdf_seed(seed, model.stage, 0, &key, si));
        for c in comps {
            st.gmm = st.gmm.split_component(c, &mut rng);
        }
    }
    out
}

/// One Viterbi-EM iteration: statistics from `paths`, M-step (optionally
/// growing mixtures toward `growth_target`), then realignment.
pub fn em_iteration(
    model: &AcousticModel,
    ctx: &EmContext<'_>,
    paths: &[UttPath],
    iteration: usize,
    growth_target: Option<usize>,
) -> Result<EmOutcome> {
    let stats = accumulate(paths);
    let feats = ctx.features;
    let frames_of = |list: &[(u32, u32)]| -> Vec<&[f64]> {
        list.iter().map(|&(u, t)| feats[u as usize].row(t as usize)).collect()
    };

    // Plain EM update of every visited state.
    let visited: Vec<(&(ModelKey, usize), &Vec<(u32, u32)>)> = stats.frames.iter().collect();
    let updates: Vec<(DiagGmm, f64)> = visited
        .par_iter()
        .map(|(key, list)| {
            let gmm = &model.hmms[&key.0].states[key.1].gmm;
            let (g, _) = gmm.em_step(&frames_of(list), ctx.floor);
            (g, list.len() as f64)
        })
        .collect();
    let mut next = model.clone();
    for ((key, _), (g, occ)) in visited.iter().zip(updates) {
        let st = &mut next.hmms.get_mut(&key.0).expect("visited key").states[key.1];
        st.gmm = g;
        st.occupancy = occ;
    }

    if let Some(target) = growth_target {
        if target > next.gaussian_count() {
            let plan = plan_splits(&next, target, |k, s| stats.frames.contains_key(&(k.clone(), s)));
            let planned: Vec<(&(ModelKey, usize), &Vec<usize>)> = plan.iter().collect();
            let grown: Vec<Option<DiagGmm>> = planned
                .par_iter()
                .map(|(key, comps)| {
                    let frames = frames_of(&stats.frames[*key]);
                    let base = &next.hmms[&key.0].states[key.1].gmm;
                    let mut rng = ChaCha8Rng::seed_from_u64(pdf_seed(ctx.seed, model.stage, iteration, &key.0, key.1));
                    let mut g = base.clone();
                    for &c in comps.iter() {
                        g = g.split_component(c, &mut rng);
                    }
                    for _ in 0..SPLIT_INNER_STEPS {
                        g = g.em_step(&frames, ctx.floor).0;
                    }
                    (g.total_log_likelihood(&frames) >= base.total_log_likelihood(&frames)).then_some(g)
                })
                .collect();
            for ((key, _), g) in planned.iter().zip(grown) {
                if let Some(g) = g {
                    next.hmms.get_mut(&key.0).expect("planned key").states[key.1].gmm = g;
                }
            }
        }
    }

    for (key, (n_self, n_fwd)) in &stats.transitions {
        if n_self + n_fwd > 0.0 {
            let p = (n_self / (n_self + n_fwd)).clamp(MIN_TRANSITION_PROB, MAX_TRANSITION_PROB);
            next.hmms.get_mut(&key.0).expect("transition key").states[key.1].self_loop = p;
        }
    }

    // States of models used by some utterance but never visited.
    let mut used: BTreeSet<(ModelKey, usize)> = BTreeSet::new();
    for up in paths {
        used.extend(up.graph.pdf_keys.iter().cloned());
    }
    let zero_occupancy = used.iter().filter(|k| !stats.frames.contains_key(*k)).count();

    let (paths, ll) = align_all(&next, ctx)?;
    Ok(EmOutcome {
        model: next,
        paths,
        log_likelihood: ll,
        zero_occupancy,
    })
}

fn align_all(model: &AcousticModel, ctx: &EmContext<'_>) -> Result<(Vec<UttPath>, f64)> {
    let results: Vec<UttPath> = ctx
        .set
        .utterances
        .par_iter()
        .zip(ctx.features)
        .map(|(u, f)| {
            let ug = resolve_graph(model, &u.graph)?;
            let em = emission_table(model, &ug, f, None);
            let path = viterbi(&ug.expanded, &em, f.frames())?;
            Ok(UttPath { graph: ug, path })
        })
        .collect::<Result<_>>()?;
    let mut ll = 0.0;
    for (i, r) in results.iter().enumerate() {
        ll += r.path.score + ctx.log_dets.map_or(0.0, |d| d[i] * ctx.features[i].frames() as f64);
    }
    Ok((results, ll))
}

fn growth_target(iteration: usize, iters: usize, current: usize, max: usize) -> Option<usize> {
    let step = iters.div_ceil(4).max(1);
    (iteration % step == 0 && current < max).then(|| (2 * current).min(max))
}

fn persist_stage(options: &TrainOptions, log: &StageLog, model: &AcousticModel) -> Result<()> {
    if let Some(path) = &options.log_path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = String::new();
        for r in &log.iterations {
            buf.push_str(&serde_json::to_string(r).expect("record serializes"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    if let Some(dir) = &options.stage_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        model.save(&dir.join(format!("{}.mdl", model.stage)))?;
    }
    Ok(())
}

/// Run `iters` EM iterations from `paths`.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    mut model: AcousticModel,
    set: &TrainingSet,
    features: &[FeatureMatrix],
    mut paths: Vec<UttPath>,
    initial: f64,
    iters: usize,
    max_gaussians: usize,
    floor: &[f64],
    options: &TrainOptions,
) -> Result<(AcousticModel, Vec<UttPath>, StageLog)> {
    let stage = model.stage;
    let mut log = StageLog {
        stage,
        initial_log_likelihood: initial,
        iterations: Vec::with_capacity(iters),
    };
    let ctx = EmContext {
        set,
        features,
        log_dets: None,
        floor,
        seed: options.seed,
    };
    for it in 1..=iters {
        let target = growth_target(it, iters, model.gaussian_count(), max_gaussians);
        let out = em_iteration(&model, &ctx, &paths, it, target)?;
        model = out.model;
        paths = out.paths;
        log.iterations.push(IterationRecord {
            stage,
            iteration: it,
            log_likelihood: out.log_likelihood,
            gaussians: model.gaussian_count(),
            zero_occupancy: out.zero_occupancy,
        });
        log::debug!("{stage} iteration {it}: ll {:.3}", out.log_likelihood);
    }
    Ok((model, paths, log))
}

/// Flat start followed by `schedule.mono` EM iterations.
pub fn train_monophone(set: &TrainingSet, schedule: &TrainSchedule, options: &TrainOptions) -> Result<StageResult> {
    let (model, paths, ll0) = flat_start(set, options)?;
    let features: Vec<FeatureMatrix> = set.utterances.iter().map(|u| u.full.clone()).collect();
    let (_, var) = global_moments(&features)?;
    let floor = floor_from(&var, options.variance_floor_scale);
    let (mut model, paths, log) = run_stage(
        model,
        set,
        &features,
        paths,
        ll0,
        schedule.mono,
        schedule.max_gaussians[0],
        &floor,
        options,
    )?;
    model.schedule_label = schedule.label();
    persist_stage(options, &log, &model)?;
    Ok(StageResult {
        model,
        log,
        paths,
        features,
    })
}

/// Re-fit every monophone backoff model on the pooled frames of its centre
/// phone, taken from the current alignment.
fn refit_backoff(model: &mut AcousticModel, features: &[FeatureMatrix], paths: &[UttPath], floor: &[f64]) {
    let mut pooled: BTreeMap<(String, usize), Vec<&[f64]>> = BTreeMap::new();
    for (u, up) in paths.iter().enumerate() {
        for (t, &s) in up.path.states.iter().enumerate() {
            let (key, si) = &up.graph.pdf_keys[up.graph.expanded.states[s].pdf];
            if let ModelKey::Tri(k) = key {
                pooled
                    .entry((k.center.clone(), *si))
                    .or_default()
                    .push(features[u].row(t));
            }
        }
    }
    let dims = model.dims;
    let global = {
        let rows: Vec<&[f64]> = features.iter().flat_map(|f| f.rows()).collect();
        moments(&rows, floor)
    };
    let monos: Vec<ModelKey> = model.hmms.keys().filter(|k| matches!(k, ModelKey::Mono(_))).cloned().collect();
    for key in monos {
        let hmm = model.hmms.get_mut(&key).expect("mono key");
        for (si, st) in hmm.states.iter_mut().enumerate() {
            let frames = pooled.get(&(key.center_phone().to_owned(), si));
            match frames {
                Some(frames) if !frames.is_empty() => {
                    let mut g = if st.gmm.dims() == dims {
                        st.gmm.clone()
                    } else {
                        let (m, v) = moments(frames, floor).expect("non-empty");
                        DiagGmm::single(m, v).expect("valid moments")
                    };
                    for _ in 0..2 {
                        g = g.em_step(frames, floor).0;
                    }
                    st.gmm = g;
                    st.occupancy = frames.len() as f64;
                }
                _ if st.gmm.dims() != dims => {
                    let (m, v) = global.clone().expect("non-empty corpus");
                    st.gmm = DiagGmm::single(m, v).expect("valid moments");
                    st.occupancy = 0.0;
                }
                _ => {}
            }
        }
    }
}

/// Context-dependent models keyed through `class_map`; every seen key is
/// cloned from its centre monophone, then trained.
pub fn train_triphone(
    set: &TrainingSet,
    mono: &StageResult,
    class_map: &PhoneClassMap,
    iters: usize,
    max_gaussians: usize,
    options: &TrainOptions,
) -> Result<StageResult> {
    if iters == 0 {
        return Err(Error::Schedule("triphone iterations must be at least 1".into()));
    }
    let mut model = mono.model.clone();
    model.stage = Stage::Tri;
    model.class_map = Some(class_map.clone());
    let mut keys = BTreeSet::new();
    for u in &set.utterances {
        for seg in &u.graph.segments {
            if let Segment::Phone { .. } = seg {
                keys.insert(model.segment_key(seg)?);
            }
        }
    }
    for key in keys {
        let center = ModelKey::Mono(key.center_phone().to_owned());
        let hmm = model.hmms[&center].clone();
        model.hmms.insert(key, hmm);
    }
    let paths = transfer_paths(&model, set, &mono.paths)?;
    let features = mono.features.clone();
    let (_, var) = global_moments(&features)?;
    let floor = floor_from(&var, options.variance_floor_scale);
    let (mut model, paths, log) = run_stage(
        model,
        set,
        &features,
        paths,
        mono.log.iterations.last().map_or(mono.log.initial_log_likelihood, |r| r.log_likelihood),
        iters,
        max_gaussians,
        &floor,
        options,
    )?;
    refit_backoff(&mut model, &features, &paths, &floor);
    persist_stage(options, &log, &model)?;
    Ok(StageResult {
        model,
        log,
        paths,
        features,
    })
}

/// Re-resolve graphs against a new model, keeping the state paths. The
/// expanded topology depends only on the segments, so indices carry over.
fn transfer_paths(model: &AcousticModel, set: &TrainingSet, paths: &[UttPath]) -> Result<Vec<UttPath>> {
    set.utterances
        .iter()
        .zip(paths)
        .map(|(u, p)| {
            Ok(UttPath {
                graph: resolve_graph(model, &u.graph)?,
                path: p.path.clone(),
            })
        })
        .collect()
}

fn rescore(model: &AcousticModel, features: &[FeatureMatrix], paths: &mut [UttPath]) -> f64 {
    paths
        .iter_mut()
        .zip(features)
        .map(|(p, f)| {
            let em = emission_table(model, &p.graph, f, None);
            let s = path_score(&p.graph.expanded, &em, &p.path.states).expect("path stays admissible");
            p.path.score = s;
            s
        })
        .sum()
}

/// Spliced statics projected by the model's LDA transform.
pub fn lda_features(statics: &FeatureMatrix, lda: &crate::features::LdaTransform) -> Result<FeatureMatrix> {
    apply_transform(&splice(statics, lda.splice), &lda.matrix)
}

/// Carry a mixture into a new feature space: component posteriors come from
/// `old` on the old frames, moments from the paired new frames. Components
/// with less than one frame of occupancy are dropped.
fn convert_mixture(old: &DiagGmm, old_frames: &[&[f64]], new_frames: &[&[f64]], floor: &[f64]) -> Option<DiagGmm> {
    let k = old.num_components();
    let d = floor.len();
    let mut occ = vec![0.0; k];
    let mut s1 = vec![vec![0.0; d]; k];
    let mut post = Vec::with_capacity(k);
    let posts: Vec<Vec<f64>> = old_frames
        .iter()
        .map(|x| {
            old.posteriors(x, &mut post);
            post.clone()
        })
        .collect();
    for (p, y) in posts.iter().zip(new_frames) {
        for c in 0..k {
            occ[c] += p[c];
            for (a, v) in s1[c].iter_mut().zip(y.iter()) {
                *a += p[c] * v;
            }
        }
    }
    let means: Vec<Vec<f64>> = (0..k).map(|c| s1[c].iter().map(|a| a / occ[c].max(1e-300)).collect()).collect();
    let mut s2 = vec![vec![0.0; d]; k];
    for (p, y) in posts.iter().zip(new_frames) {
        for c in 0..k {
            for ((a, v), m) in s2[c].iter_mut().zip(y.iter()).zip(&means[c]) {
                *a += p[c] * (v - m) * (v - m);
            }
        }
    }
    let keep: Vec<usize> = (0..k).filter(|&c| occ[c] >= 1.0).collect();
    if keep.is_empty() {
        return None;
    }
    DiagGmm::new(
        keep.iter().map(|&c| occ[c]).collect(),
        keep.iter().map(|&c| means[c].clone()).collect(),
        keep.iter()
            .map(|&c| s2[c].iter().zip(floor).map(|(a, f)| (a / occ[c]).max(*f)).collect())
            .collect(),
    )
    .ok()
}

/// LDA estimated on spliced statics labelled by the triphone alignment's
/// pdfs; each state's mixture is carried into the projected space.
pub fn train_lda_stage(
    set: &TrainingSet,
    tri: &StageResult,
    iters: usize,
    max_gaussians: usize,
    options: &TrainOptions,
) -> Result<StageResult> {
    if iters == 0 {
        return Err(Error::Schedule("LDA iterations must be at least 1".into()));
    }
    let mut pdf_ids: BTreeMap<(ModelKey, usize), usize> = BTreeMap::new();
    for (key, hmm) in &tri.model.hmms {
        for si in 0..hmm.states.len() {
            let n = pdf_ids.len();
            pdf_ids.insert((key.clone(), si), n);
        }
    }
    let spliced: Vec<FeatureMatrix> = set.utterances.iter().map(|u| splice(&u.statics, options.splice)).collect();
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut labels = Vec::new();
    for (sp, up) in spliced.iter().zip(&tri.paths) {
        for (t, &s) in up.path.states.iter().enumerate() {
            rows.push(sp.row(t));
            labels.push(pdf_ids[&up.graph.pdf_keys[up.graph.expanded.states[s].pdf]]);
        }
    }
    let in_dim = spliced[0].dims();
    let lda = estimate_lda(&rows, &labels, options.lda_dim.min(in_dim), LDA_RIDGE, options.splice)?;
    let features: Vec<FeatureMatrix> = spliced
        .iter()
        .map(|s| apply_transform(s, &lda.matrix))
        .collect::<Result<_>>()?;
    let (gmean, gvar) = global_moments(&features)?;
    let floor = floor_from(&gvar, options.variance_floor_scale);
    let global = DiagGmm::single(gmean, gvar)?;

    let stats = accumulate(&tri.paths);
    let mut model = tri.model.clone();
    model.stage = Stage::Lda;
    model.dims = lda.out_dim();
    for (key, hmm) in model.hmms.iter_mut() {
        for (si, st) in hmm.states.iter_mut().enumerate() {
            match stats.frames.get(&(key.clone(), si)) {
                Some(list) => {
                    let frames: Vec<&[f64]> = list
                        .iter()
                        .map(|&(u, t)| features[u as usize].row(t as usize))
                        .collect();
                    let old: Vec<&[f64]> = list
                        .iter()
                        .map(|&(u, t)| tri.features[u as usize].row(t as usize))
                        .collect();
                    st.gmm = match convert_mixture(&st.gmm, &old, &frames, &floor) {
                        Some(g) => g,
                        None => {
                            let (m, v) = moments(&frames, &floor).expect("non-empty");
                            DiagGmm::single(m, v)?
                        }
                    };
                    st.occupancy = frames.len() as f64;
                }
                None => {
                    st.gmm = global.clone();
                    st.occupancy = 0.0;
                }
            }
        }
    }
    model.lda = Some(lda);
    let mut paths = transfer_paths(&model, set, &tri.paths)?;
    let initial = rescore(&model, &features, &mut paths);
    let (mut model, paths, log) = run_stage(
        model,
        set,
        &features,
        paths,
        initial,
        iters,
        max_gaussians,
        &floor,
        options,
    )?;
    refit_backoff(&mut model, &features, &paths, &floor);
    persist_stage(options, &log, &model)?;
    Ok(StageResult {
        model,
        log,
        paths,
        features,
    })
}

/// Per-speaker frames paired with the mixture they are aligned to.
fn speaker_frames<'a>(
    model: &'a AcousticModel,
    set: &TrainingSet,
    features: &'a [FeatureMatrix],
    paths: &[UttPath],
) -> BTreeMap<String, Vec<(&'a [f64], &'a DiagGmm)>> {
    let mut out: BTreeMap<String, Vec<(&[f64], &DiagGmm)>> = BTreeMap::new();
    for ((u, f), up) in set.utterances.iter().zip(features).zip(paths) {
        let entry = out.entry(u.speaker.clone()).or_default();
        for (t, &s) in up.path.states.iter().enumerate() {
            let (key, si) = &up.graph.pdf_keys[up.graph.expanded.states[s].pdf];
            entry.push((f.row(t), &model.hmms[key].states[*si].gmm));
        }
    }
    out
}

/// Alternate per-speaker transform estimation with EM in the transformed
/// space, `iters` times.
pub fn train_sat(
    set: &TrainingSet,
    lda: &StageResult,
    iters: usize,
    max_gaussians: usize,
    options: &TrainOptions,
) -> Result<StageResult> {
    if iters == 0 {
        return Err(Error::Schedule("SAT iterations must be at least 1".into()));
    }
    let base = &lda.features;
    let (_, gvar) = global_moments(base)?;
    let floor = floor_from(&gvar, options.variance_floor_scale);
    let mut model = lda.model.clone();
    model.stage = Stage::Sat;
    let dims = model.dims;
    let mut transforms: BTreeMap<String, SpeakerTransform> = set
        .utterances
        .iter()
        .map(|u| (u.speaker.clone(), SpeakerTransform::identity(u.speaker.clone(), dims)))
        .collect();
    let mut paths = transfer_paths(&model, set, &lda.paths)?;
    let mut log = StageLog {
        stage: Stage::Sat,
        initial_log_likelihood: lda
            .log
            .iterations
            .last()
            .map_or(lda.log.initial_log_likelihood, |r| r.log_likelihood),
        iterations: Vec::with_capacity(iters),
    };
    let mut current = base.clone();
    for it in 1..=iters {
        let by_speaker = speaker_frames(&model, set, base, &paths);
        transforms = by_speaker
            .iter()
            .map(|(spk, frames)| {
                let t = estimate_speaker_transform(spk, frames, transforms.get(spk), options.min_sat_frames);
                (spk.clone(), t)
            })
            .collect();
        current = set
            .utterances
            .iter()
            .zip(base)
            .map(|(u, f)| transforms[&u.speaker].apply(f))
            .collect::<Result<_>>()?;
        let log_dets: Vec<f64> = set.utterances.iter().map(|u| transforms[&u.speaker].log_det()).collect();
        let ctx = EmContext {
            set,
            features: &current,
            log_dets: Some(&log_dets),
            floor: &floor,
            seed: options.seed,
        };
        let target = growth_target(it, iters, model.gaussian_count(), max_gaussians);
        let out = em_iteration(&model, &ctx, &paths, it, target)?;
        model = out.model;
        paths = out.paths;
        log.iterations.push(IterationRecord {
            stage: Stage::Sat,
            iteration: it,
            log_likelihood: out.log_likelihood,
            gaussians: model.gaussian_count(),
            zero_occupancy: out.zero_occupancy,
        });
    }
    refit_backoff(&mut model, &current, &paths, &floor);
    model.speaker_transforms = transforms;
    persist_stage(options, &log, &model)?;
    Ok(StageResult {
        model,
        log,
        paths,
        features: base.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub model: AcousticModel,
    pub logs: Vec<StageLog>,
    pub skipped: Vec<(String, String)>,
}

/// Monophone → triphone → LDA → SAT with the schedule's four counts.
pub fn train_pipeline(
    set: &TrainingSet,
    schedule: &TrainSchedule,
    class_map: &PhoneClassMap,
    options: &TrainOptions,
) -> Result<PipelineResult> {
    let mg = schedule.max_gaussians;
    let mono = train_monophone(set, schedule, options)?;
    let tri = train_triphone(set, &mono, class_map, schedule.tri, mg[1], options)?;
    let lda = train_lda_stage(set, &tri, schedule.lda, mg[2], options)?;
    let mut sat = train_sat(set, &lda, schedule.sat, mg[3], options)?;
    sat.model.schedule_label = schedule.label();
    Ok(PipelineResult {
        model: sat.model,
        logs: vec![mono.log, tri.log, lda.log, sat.log],
        skipped: set.skipped.clone(),
    })
}

/// Convenience wrapper: features, graphs and the full pipeline.
pub fn train_corpus(
    corpus: &Corpus,
    lexicon: &Lexicon,
    schedule: &TrainSchedule,
    class_map: &PhoneClassMap,
    options: &TrainOptions,
) -> Result<PipelineResult> {
    let set = prepare_training_set(corpus, lexicon, &options.feature_config)?;
    train_pipeline(&set, schedule, class_map, options)
}
