use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use alignlab::am::{align_corpus, train_corpus, AcousticModel, TrainOptions, TrainSchedule};
use alignlab::augment::{build_augmented_dataset, parse_spec_file, preset};
use alignlab::config::Config;
use alignlab::corpus::{build_corpus, write_corpus, Corpus, IngestOptions};
use alignlab::evaluate::{aggregate, emit_heatmap, match_boundaries, Attribution, BoundaryPair};
use alignlab::lexicon::{
    compile_lexicon, default_identity_classes, load_phone_class_map, GraphemeMap, Lexicon, NaturalClassMap,
    PhoneClassMap,
};
use alignlab::sweep::{
    enumerate_experiment1, enumerate_experiment2, read_store, report_grid, run_grid, Dataset, PipelineExecutor,
    RunConfig, EXPERIMENT1_BASE, EXPERIMENT2_BASE, EXPERIMENT2_SCHEDULES,
};
use alignlab::synth::{synthesize_corpus, SynthConfig};
use alignlab::textgrid::{parse_textgrid_bytes, serialize_textgrid, TierKind};
use alignlab::{Error, Result};

#[derive(Parser)]
#[command(name = "alignlab", version, about = "Forced-alignment training, augmentation and evaluation")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus directory from a manifest of audio and TextGrids.
    Ingest {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile a pronunciation lexicon with per-language grapheme maps.
    Dict {
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        /// `language=path` pairs.
        #[arg(long = "graphemes", required = true)]
        graphemes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an augmented copy of a corpus.
    Augment {
        #[arg(long)]
        corpus: PathBuf,
        /// "retained" (default) or "full-table".
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a four-stage acoustic model.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value = "35_40_40_40")]
        schedule: TrainSchedule,
        /// Class map file, or `identity`.
        #[arg(long, default_value = "identity")]
        classes: String,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-stage models and the iteration log.
        #[arg(long)]
        stage_dir: Option<PathBuf>,
    },
    /// Align a corpus and write one TextGrid per utterance.
    Align {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypothesis TextGrids against a reference corpus.
    Eval(EvalArgs),
    /// Run an experiment grid into a results store.
    Sweep {
        #[arg(value_enum)]
        experiment: Experiment,
        #[arg(long)]
        config: PathBuf,
        /// Results store (overrides `store` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tables and heatmaps from a results store.
    Report {
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with exact reference boundaries.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        minutes: f64,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    reference: PathBuf,
    /// Directory of `<id>.TextGrid` files.
    #[arg(long)]
    hypothesis: PathBuf,
    /// Natural class file; IPA-based classes when omitted.
    #[arg(long)]
    natural_classes: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AttributionArg::Onset)]
    attribution: AttributionArg,
    #[arg(long, default_value = "model")]
    label: String,
    /// Output prefix for the report and heatmaps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttributionArg {
    Onset,
    Offset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Exp1,
    Exp2,
    Custom,
}

fn corpus_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.tsv")
    } else {
        path.to_path_buf()
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let (corpus, report) = build_corpus(&corpus_manifest(path), &IngestOptions::default())?;
    for (id, why) in &report.skipped {
        log::warn!("{id}: {why}");
    }
    Ok(corpus)
}

fn class_map(spec: &str, lexicon: &Lexicon) -> Result<PhoneClassMap> {
    if spec == "identity" {
        default_identity_classes(lexicon.inventory())
    } else {
        load_phone_class_map(Path::new(spec), lexicon.inventory())
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            context: dir.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: path.display().to_string(),
        source: e,
    })
}

fn ingest(manifest: &Path, out: &Path) -> Result<()> {
    let (corpus, report) = build_corpus(manifest, &IngestOptions::default())?;
    let written = write_corpus(&corpus, out)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    println!("wrote {} utterances to {}", corpus.len(), written.display());
    Ok(())
}

fn dict(corpora: &[PathBuf], graphemes: &[String], out: &Path) -> Result<()> {
    let mut maps = HashMap::new();
    for g in graphemes {
        let (lang, path) = g
            .split_once('=')
            .ok_or_else(|| Error::InvalidParameter(format!("--graphemes expects language=path, got {g:?}")))?;
        maps.insert(lang.to_owned(), GraphemeMap::load(lang, Path::new(path))?);
    }
    let loaded: Vec<Corpus> = corpora.iter().map(|c| load_corpus(c)).collect::<Result<_>>()?;
    let lexicon = compile_lexicon(&loaded, &maps)?;
    write_file(out, &lexicon.to_text())?;
    println!("{} words, {} phones", lexicon.len(), lexicon.inventory().len());
    Ok(())
}

fn augment(corpus: &Path, preset_name: Option<&str>, spec: Option<&Path>, out: &Path) -> Result<()> {
    let specs = match (preset_name, spec) {
        (_, Some(path)) => parse_spec_file(&std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: path.display().to_string(),
            source: e,
        })?)?,
        (name, None) => preset(name.unwrap_or("retained"))?,
    };
    let corpus = load_corpus(corpus)?;
    let augmented = build_augmented_dataset(&corpus, &specs)?;
    let written = write_corpus(&augmented, out)?;
    println!("wrote {} utterances to {}", augmented.len(), written.display());
    Ok(())
}

fn train(
    corpus: &Path,
    lexicon: &Path,
    schedule: &TrainSchedule,
    classes: &str,
    out: &Path,
    stage_dir: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let lexicon = Lexicon::load(lexicon)?;
    let classes = class_map(classes, &lexicon)?;
    let options = TrainOptions {
        seed,
        stage_dir: stage_dir.map(Path::to_path_buf),
        log_path: stage_dir.map(|d| d.join("stages.jsonl")),
        ..TrainOptions::default()
    };
    if let Some(log) = &options.log_path {
        let _ = std::fs::remove_file(log);
    }
    let trained = train_corpus(&corpus, &lexicon, schedule, &classes, &options)?;
    for (id, why) in &trained.skipped {
        log::warn!("skipped {id}: {why}");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            context: dir.display().to_string(),
            source: e,
        })?;
    }
    trained.model.save(out)?;
    for log in &trained.logs {
        let last = log.iterations.last().map_or(log.initial_log_likelihood, |r| r.log_likelihood);
        println!("{}: {} iterations, log-likelihood {last:.3}", log.stage, log.iterations.len());
    }
    println!("model written to {}", out.display());
    Ok(())
}

fn align(model: &Path, corpus: &Path, lexicon: &Path, out: &Path) -> Result<()> {
    let model = AcousticModel::load(model)?;
    let corpus = load_corpus(corpus)?;
    let lexicon = Lexicon::load(lexicon)?;
    let aligned = align_corpus(&model, &corpus, &lexicon)?;
    let hyp = alignlab::am::with_hypothesis_tiers(&corpus, &aligned)?;
    for u in &hyp.utterances {
        let mut tiers = vec![u.word_tier.clone()];
        tiers.extend(u.phone_tier.clone());
        write_file(&out.join(format!("{}.TextGrid", u.id)), &serialize_textgrid(&tiers, u.duration())?)?;
    }
    for (id, why) in &aligned.failures {
        eprintln!("not aligned {id}: {why}");
    }
    println!("aligned {} of {} utterances", aligned.alignments.len(), corpus.len());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let reference = load_corpus(&args.reference)?;
    let mut pairs: Vec<BoundaryPair> = Vec::new();
    let mut missing = 0;
    for u in &reference.utterances {
        let path = args.hypothesis.join(format!("{}.TextGrid", u.id));
        let Ok(bytes) = std::fs::read(&path) else {
            missing += 1;
            continue;
        };
        let grid = parse_textgrid_bytes(&bytes)?;
        let hyp = grid
            .tier(TierKind::Phone)
            .ok_or_else(|| Error::Evaluation(format!("{} has no phone tier", path.display())))?;
        let reference_tier = u
            .phone_tier
            .as_ref()
            .ok_or_else(|| Error::Evaluation(format!("reference {} has no phone tier", u.id)))?;
        pairs.extend(match_boundaries(&u.id, reference_tier, hyp)?);
    }
    if missing > 0 {
        log::warn!("{missing} reference utterances have no hypothesis TextGrid");
    }
    let classes = match &args.natural_classes {
        Some(p) => NaturalClassMap::load(p)?,
        None => {
            let inventory = reference
                .utterances
                .iter()
                .filter_map(|u| u.phone_tier.as_ref())
                .flat_map(|t| t.labeled().map(|i| i.label.clone()))
                .collect();
            NaturalClassMap::from_ipa(&inventory)
        }
    };
    let attribution = match args.attribution {
        AttributionArg::Onset => Attribution::Onset,
        AttributionArg::Offset => Attribution::Offset,
    };
    let report = aggregate(&pairs, &classes, attribution, &args.label, &reference.name)?;
    let mut json = args.out.clone().into_os_string();
    json.push("_report.json");
    write_file(Path::new(&json), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    emit_heatmap(std::slice::from_ref(&report), &args.out)?;
    println!(
        "{} boundaries, mean absolute {:.2} ms, mean signed {:.2} ms",
        report.count, report.overall_mean_abs_ms, report.overall_mean_signed_ms
    );
    for c in report.classes.iter().filter(|c| c.count > 0) {
        println!(
            "  {:<14} n={:<6} signed {:>8.2}  abs {:>8.2}",
            c.class, c.count, c.mean_signed_ms, c.mean_abs_ms
        );
    }
    Ok(())
}

const SWEEP_KEYS: &[&str] = &[
    "lexicon",
    "natural_classes",
    "base_schedule",
    "schedules",
    "doublings",
    "exp2_class_map",
    "seed",
    "workers",
    "store",
    "artifacts",
];

fn relative(base: &Path, value: &str) -> PathBuf {
    let p = Path::new(value);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Sweep config keys: `dataset.<name> = corpus`, `class_map.<name> = file|identity`,
/// optional `lexicon.<dataset>` overrides, plus the plain keys in [`SWEEP_KEYS`].
fn sweep(experiment: Experiment, config_path: &Path, out: Option<&Path>, cli: &Cli) -> Result<()> {
    let cfg = Config::load(config_path)?;
    for k in cfg.keys() {
        let prefixed = ["dataset.", "class_map.", "lexicon."].iter().any(|p| k.starts_with(p));
        if !prefixed && !SWEEP_KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let seed = cfg.get_parsed::<u64>("seed")?.unwrap_or(cli.seed);
    let workers = cfg.get_parsed::<usize>("workers")?.unwrap_or(cli.workers);
    let store = match (out, cfg.get("store")) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(s)) => relative(base_dir, s),
        (None, None) => return Err(Error::Config("no results store: pass --out or set store".into())),
    };
    let shared_lexicon = cfg.get("lexicon").map(|p| Lexicon::load(&relative(base_dir, p))).transpose()?;
    let natural_path = cfg.get("natural_classes").map(|p| relative(base_dir, p));

    let options = TrainOptions::default();
    let mut datasets = HashMap::new();
    let mut dataset_names = Vec::new();
    let mut inventory_source: Option<Lexicon> = None;
    for key in cfg.keys().filter(|k| k.starts_with("dataset.")) {
        let name = &key["dataset.".len()..];
        let corpus = load_corpus(&relative(base_dir, cfg.get(key).expect("key exists")))?;
        let lexicon = match cfg.get(&format!("lexicon.{name}")) {
            Some(p) => Lexicon::load(&relative(base_dir, p))?,
            None => shared_lexicon
                .clone()
                .ok_or_else(|| Error::Config(format!("dataset {name:?} has no lexicon")))?,
        };
        let natural = match &natural_path {
            Some(p) => NaturalClassMap::load(p)?,
            None => NaturalClassMap::from_ipa(lexicon.inventory()),
        };
        inventory_source.get_or_insert_with(|| lexicon.clone());
        datasets.insert(name.to_owned(), Dataset::new(corpus, lexicon, natural, &options)?);
        dataset_names.push(name.to_owned());
    }
    let inventory_lexicon = inventory_source.ok_or_else(|| Error::Config("no dataset.<name> entries".into()))?;
    let mut class_maps = HashMap::new();
    let mut class_names = Vec::new();
    for key in cfg.keys().filter(|k| k.starts_with("class_map.")) {
        let name = &key["class_map.".len()..];
        let value = cfg.get(key).expect("key exists");
        let spec = if value == "identity" {
            value.to_owned()
        } else {
            relative(base_dir, value).display().to_string()
        };
        class_maps.insert(name.to_owned(), class_map(&spec, &inventory_lexicon)?);
        class_names.push(name.to_owned());
    }
    if class_maps.is_empty() {
        class_maps.insert("identity".to_owned(), class_map("identity", &inventory_lexicon)?);
        class_names.push("identity".to_owned());
    }

    let configs: Vec<RunConfig> = match experiment {
        Experiment::Exp1 => {
            let base: TrainSchedule = cfg.get("base_schedule").unwrap_or(EXPERIMENT1_BASE).parse()?;
            enumerate_experiment1(&dataset_names, &class_names, &base, seed)
        }
        Experiment::Exp2 => {
            let base: TrainSchedule = cfg.get("base_schedule").unwrap_or(EXPERIMENT2_BASE).parse()?;
            let count = cfg.get_parsed::<usize>("doublings")?.unwrap_or(EXPERIMENT2_SCHEDULES);
            let cm = cfg.get("exp2_class_map").unwrap_or(&class_names[0]).to_owned();
            if !class_maps.contains_key(&cm) {
                return Err(Error::Config(format!("exp2_class_map {cm:?} is not a declared class map")));
            }
            enumerate_experiment2(&dataset_names, &cm, &base, count, seed)
        }
        Experiment::Custom => {
            let list = cfg
                .get("schedules")
                .ok_or_else(|| Error::Config("custom sweeps need schedules = a,b,...".into()))?;
            let schedules: Vec<TrainSchedule> = list.split(',').map(|s| s.parse()).collect::<Result<_>>()?;
            let mut out = Vec::new();
            for d in &dataset_names {
                for c in &class_names {
                    for s in &schedules {
                        out.push(RunConfig::new(d, c, s.clone(), seed, &s.label()));
                    }
                }
            }
            out
        }
    };
    let executor = PipelineExecutor {
        datasets,
        class_maps,
        options,
        artifacts: cfg.get("artifacts").map(|p| relative(base_dir, p)),
    };
    let results = run_grid(&configs, workers, &store, &executor)?;
    let done = results.iter().filter(|r| r.status == alignlab::sweep::RunStatus::Done).count();
    println!("{} runs, {done} done; store {}", results.len(), store.display());
    Ok(())
}

fn report(store: &Path, out: &Path) -> Result<()> {
    let results = read_store(store)?;
    let rep = report_grid(&results, out)?;
    for (i, r) in rep.ranking.iter().take(10).enumerate() {
        println!("{:>3}. {:<40} {:>8.2} ms", i + 1, r.model, r.overall_mean_abs_ms);
    }
    println!(
        "best: {} / {} / {}",
        rep.best.config.dataset,
        rep.best.config.class_map,
        rep.best.config.schedule.label()
    );
    Ok(())
}

fn synth(out: &Path, minutes: f64, speakers: usize, seed: u64) -> Result<()> {
    let s = synthesize_corpus(&SynthConfig {
        minutes,
        speakers,
        seed,
        ..SynthConfig::default()
    })?;
    let manifest = write_corpus(&s.corpus, out)?;
    write_file(&out.join("lexicon.txt"), &s.lexicon.to_text())?;
    write_file(&out.join("natural_classes.txt"), &s.natural_classes.to_text())?;
    let graphemes: String = s
        .grapheme_map
        .rules()
        .iter()
        .map(|(g, p)| format!("{g}\t{}\n", p.join(" ")))
        .collect();
    write_file(&out.join("graphemes.tsv"), &graphemes)?;
    println!(
        "{} utterances, {:.2} minutes; manifest {}",
        s.corpus.len(),
        s.corpus.total_minutes(),
        manifest.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { manifest, out } => ingest(manifest, out),
        Command::Dict { corpora, graphemes, out } => dict(corpora, graphemes, out),
        Command::Augment {
            corpus,
            preset,
            spec,
            out,
        } => augment(corpus, preset.as_deref(), spec.as_deref(), out),
        Command::Train {
            corpus,
            lexicon,
            schedule,
            classes,
            out,
            stage_dir,
        } => train(corpus, lexicon, schedule, classes, out, stage_dir.as_deref(), cli.seed),
        Command::Align {
            model,
            corpus,
            lexicon,
            out,
        } => align(model, corpus, lexicon, out),
        Command::Eval(args) => eval(args),
        Command::Sweep {
            experiment,
            config,
            out,
        } => sweep(*experiment, config, out.as_deref(), cli),
        Command::Report { store, out } => report(store, out),
        Command::Synth { out, minutes, speakers } => synth(out, *minutes, *speakers, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.workers > 1 {
        log::info!("running up to {} grid runs concurrently", cli.workers);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
