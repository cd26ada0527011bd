//! C ABI for alignlab.
//!
//! Objects cross the boundary as opaque handles created by `al_*_load`,
//! `al_*_train` or `al_synthesize` and released with the matching
//! `al_*_free`. Every fallible call returns an [`AlStatus`]; on failure the
//! message is available from [`al_last_error`] on the same thread until the
//! next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use alignlab::am::{align_corpus, train_corpus, with_hypothesis_tiers, AcousticModel, TrainOptions, TrainSchedule};
use alignlab::corpus::{build_corpus, Corpus, IngestOptions};
use alignlab::evaluate::{aggregate, corpus_pairs, Attribution};
use alignlab::lexicon::{default_identity_classes, load_phone_class_map, Lexicon, NaturalClassMap};
use alignlab::synth::{synthesize_corpus, SynthConfig};
use alignlab::textgrid::serialize_textgrid;
use alignlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    NoPath = 4,
    Runtime = 5,
    Panic = 6,
}

pub struct AlCorpus(Corpus);
pub struct AlLexicon(Lexicon);
pub struct AlModel(AcousticModel);
pub struct AlNaturalClasses(NaturalClassMap);

/// Boundary scores of a model on a corpus, in milliseconds.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AlScore {
    pub mean_abs_ms: f64,
    pub mean_signed_ms: f64,
    pub boundaries: usize,
    pub aligned_utterances: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AlStatus {
    match e {
        Error::Io { .. } => AlStatus::Io,
        Error::NoPath { .. } => AlStatus::NoPath,
        e if e.is_validation() => AlStatus::InvalidArgument,
        _ => AlStatus::Runtime,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (AlStatus, String)>) -> AlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AlStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AlStatus::Panic
        }
    }
}

fn lib(e: Error) -> (AlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (AlStatus, String) {
    (AlStatus::NullArgument, format!("{name} is NULL"))
}

/// # Safety
/// `s` must be NULL or a valid NUL-terminated string.
unsafe fn text<'a>(s: *const c_char, name: &str) -> Result<&'a str, (AlStatus, String)> {
    if s.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (AlStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

/// # Safety
/// `p` must be NULL or point to a live `T` created by this library.
unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (AlStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

fn put<T>(out: *mut *mut T, value: T) {
    // Callers check `out` for NULL before doing any work.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn al_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn al_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a corpus from a manifest file or a directory holding `manifest.tsv`.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_corpus_load(path: *const c_char, out: *mut *mut AlCorpus) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut p = PathBuf::from(text(path, "path")?);
        if p.is_dir() {
            p = p.join("manifest.tsv");
        }
        let (corpus, _) = build_corpus(&p, &IngestOptions::default()).map_err(lib)?;
        put(out, AlCorpus(corpus));
        Ok(())
    })
}

/// Number of utterances, or 0 for NULL.
///
/// # Safety
/// `corpus` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn al_corpus_len(corpus: *const AlCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `corpus` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn al_corpus_free(corpus: *mut AlCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_lexicon_load(path: *const c_char, out: *mut *mut AlLexicon) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let lex = Lexicon::load(&PathBuf::from(text(path, "path")?)).map_err(lib)?;
        put(out, AlLexicon(lex));
        Ok(())
    })
}

/// # Safety
/// `lexicon` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn al_lexicon_free(lexicon: *mut AlLexicon) {
    if !lexicon.is_null() {
        drop(Box::from_raw(lexicon));
    }
}

/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_natural_classes_load(path: *const c_char, out: *mut *mut AlNaturalClasses) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let map = NaturalClassMap::load(&PathBuf::from(text(path, "path")?)).map_err(lib)?;
        put(out, AlNaturalClasses(map));
        Ok(())
    })
}

/// # Safety
/// `classes` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn al_natural_classes_free(classes: *mut AlNaturalClasses) {
    if !classes.is_null() {
        drop(Box::from_raw(classes));
    }
}

/// Synthetic corpus with its lexicon and natural classes. Any of the three
/// outputs may be NULL if not wanted.
///
/// # Safety
/// Non-NULL output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_synthesize(
    minutes: f64,
    speakers: usize,
    seed: u64,
    corpus: *mut *mut AlCorpus,
    lexicon: *mut *mut AlLexicon,
    classes: *mut *mut AlNaturalClasses,
) -> AlStatus {
    guard(|| {
        let s = synthesize_corpus(&SynthConfig {
            minutes,
            speakers,
            seed,
            ..SynthConfig::default()
        })
        .map_err(lib)?;
        if !corpus.is_null() {
            put(corpus, AlCorpus(s.corpus));
        }
        if !lexicon.is_null() {
            put(lexicon, AlLexicon(s.lexicon));
        }
        if !classes.is_null() {
            put(classes, AlNaturalClasses(s.natural_classes));
        }
        Ok(())
    })
}

/// Train all four stages. `schedule` is an `m_t_l_s` label; `class_map`
/// is a class file path, or NULL for one class per phone.
///
/// # Safety
/// Handles must be live; strings valid or NULL where allowed; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn al_model_train(
    corpus: *const AlCorpus,
    lexicon: *const AlLexicon,
    schedule: *const c_char,
    class_map: *const c_char,
    seed: u64,
    out: *mut *mut AlModel,
) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let corpus = handle(corpus, "corpus")?;
        let lexicon = handle(lexicon, "lexicon")?;
        let schedule: TrainSchedule = text(schedule, "schedule")?.parse().map_err(lib)?;
        let classes = if class_map.is_null() {
            default_identity_classes(lexicon.0.inventory())
        } else {
            load_phone_class_map(&PathBuf::from(text(class_map, "class_map")?), lexicon.0.inventory())
        }
        .map_err(lib)?;
        let options = TrainOptions {
            seed,
            ..TrainOptions::default()
        };
        let trained = train_corpus(&corpus.0, &lexicon.0, &schedule, &classes, &options).map_err(lib)?;
        put(out, AlModel(trained.model));
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_model_load(path: *const c_char, out: *mut *mut AlModel) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = AcousticModel::load(&PathBuf::from(text(path, "path")?)).map_err(lib)?;
        put(out, AlModel(model));
        Ok(())
    })
}

/// # Safety
/// `model` must be live; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn al_model_save(model: *const AlModel, path: *const c_char) -> AlStatus {
    guard(|| {
        let model = handle(model, "model")?;
        model.0.save(&PathBuf::from(text(path, "path")?)).map_err(lib)
    })
}

/// Total Gaussian components, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn al_model_gaussians(model: *const AlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.gaussian_count())
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn al_model_free(model: *mut AlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Align `corpus` and write `<id>.TextGrid` files into `out_dir`. The
/// number of aligned utterances goes to `aligned` when it is not NULL.
///
/// # Safety
/// Handles must be live; `out_dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn al_align_to_textgrids(
    model: *const AlModel,
    corpus: *const AlCorpus,
    lexicon: *const AlLexicon,
    out_dir: *const c_char,
    aligned: *mut usize,
) -> AlStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let corpus = handle(corpus, "corpus")?;
        let lexicon = handle(lexicon, "lexicon")?;
        let dir = PathBuf::from(text(out_dir, "out_dir")?);
        let result = align_corpus(&model.0, &corpus.0, &lexicon.0).map_err(lib)?;
        let hyp = with_hypothesis_tiers(&corpus.0, &result).map_err(lib)?;
        std::fs::create_dir_all(&dir).map_err(|e| (AlStatus::Io, format!("{}: {e}", dir.display())))?;
        for u in &hyp.utterances {
            let mut tiers = vec![u.word_tier.clone()];
            tiers.extend(u.phone_tier.clone());
            let text = serialize_textgrid(&tiers, u.duration()).map_err(lib)?;
            let path = dir.join(format!("{}.TextGrid", u.id));
            std::fs::write(&path, text).map_err(|e| (AlStatus::Io, format!("{}: {e}", path.display())))?;
        }
        if !aligned.is_null() {
            *aligned = result.alignments.len();
        }
        Ok(())
    })
}

/// Align `corpus` with `model` and score the phone boundaries against the
/// corpus's own phone tiers. `classes` may be NULL (IPA-based classes).
///
/// # Safety
/// Handles must be live or NULL where allowed; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn al_evaluate(
    model: *const AlModel,
    corpus: *const AlCorpus,
    lexicon: *const AlLexicon,
    classes: *const AlNaturalClasses,
    out: *mut AlScore,
) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = handle(model, "model")?;
        let corpus = handle(corpus, "corpus")?;
        let lexicon = handle(lexicon, "lexicon")?;
        let fallback;
        let classes = match classes.as_ref() {
            Some(c) => &c.0,
            None => {
                fallback = NaturalClassMap::from_ipa(lexicon.0.inventory());
                &fallback
            }
        };
        let aligned = align_corpus(&model.0, &corpus.0, &lexicon.0).map_err(lib)?;
        let pairs = corpus_pairs(&corpus.0, &aligned.alignments).map_err(lib)?;
        let report = aggregate(&pairs, classes, Attribution::Onset, "model", &corpus.0.name).map_err(lib)?;
        *out = AlScore {
            mean_abs_ms: report.overall_mean_abs_ms,
            mean_signed_ms: report.overall_mean_signed_ms,
            boundaries: report.count,
            aligned_utterances: aligned.alignments.len(),
        };
        Ok(())
    })
}
