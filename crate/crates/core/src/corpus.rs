//! Utterances, corpora, transcript clean-up and manifest-driven corpus assembly.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioClip};
use crate::error::{Error, Result};
use crate::textgrid::{parse_textgrid_bytes, serialize_textgrid, Interval, Tier, TierKind};

/// Minimum labeled interval length kept by [`filter_short_intervals`].
pub const MIN_INTERVAL_SECONDS: f64 = 0.100;

/// Maximum tolerated difference between audio length and grid `xmax`.
pub const DURATION_TOLERANCE_SECONDS: f64 = 0.050;

#[derive(Debug, Clone)]
pub struct NormalizationRules {
    /// Tokens matching this pattern are partially transcribed words.
    pub partial_word: Regex,
    /// Spans matching this pattern are transcriber notes.
    pub notes: Regex,
    pub remove_hyphens: bool,
}

impl Default for NormalizationRules {
    fn default() -> Self {
        Self {
            partial_word: Regex::new(r"^\S+-$").expect("static pattern"),
            notes: Regex::new(r"\[[^\]]*\]|\([^)]*\)").expect("static pattern"),
            remove_hyphens: true,
        }
    }
}

impl NormalizationRules {
    pub fn with_patterns(partial_word: &str, notes: &str) -> Result<Self> {
        let compile = |p: &str| {
            Regex::new(p).map_err(|e| Error::InvalidParameter(format!("pattern {p:?}: {e}")))
        };
        Ok(Self {
            partial_word: compile(partial_word)?,
            notes: compile(notes)?,
            remove_hyphens: true,
        })
    }
}

pub fn normalize_transcript(raw: &str, rules: &NormalizationRules) -> String {
    let without_notes = rules.notes.replace_all(raw, " ");
    without_notes
        .split_whitespace()
        .filter(|tok| !rules.partial_word.is_match(tok))
        .map(|tok| {
            if rules.remove_hyphens {
                tok.replace('-', "")
            } else {
                tok.to_owned()
            }
        })
        .filter(|tok| !tok.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Relabel (as empty) every labeled interval shorter than `min_duration`.
pub fn filter_short_intervals(tier: &Tier, min_duration: f64) -> (Tier, usize) {
    let mut removed = 0;
    let intervals = tier
        .intervals
        .iter()
        .map(|iv| {
            if !iv.is_empty() && iv.duration() < min_duration {
                removed += 1;
                Interval::new(iv.start, iv.end, "")
            } else {
                iv.clone()
            }
        })
        .collect();
    (
        Tier {
            name: tier.name.clone(),
            kind: tier.kind,
            intervals,
        },
        removed,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tag: String,
    pub description: String,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub audio: Arc<AudioClip>,
    pub word_tier: Tier,
    pub phone_tier: Option<Tier>,
    pub speaker_id: String,
    pub language_id: String,
    pub provenance: Option<Provenance>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        audio: AudioClip,
        word_tier: Tier,
        phone_tier: Option<Tier>,
        speaker_id: impl Into<String>,
        language_id: impl Into<String>,
    ) -> Result<Self> {
        let utt = Self {
            id: id.into(),
            audio: Arc::new(audio),
            word_tier,
            phone_tier,
            speaker_id: speaker_id.into(),
            language_id: language_id.into(),
            provenance: None,
        };
        utt.validate()?;
        Ok(utt)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Error::InvalidParameter(format!("utterance {}: {m}", self.id));
        if self.speaker_id.is_empty() || self.language_id.is_empty() {
            return Err(invalid("speaker and language ids must be non-empty".into()));
        }
        let duration = self.duration();
        for tier in std::iter::once(&self.word_tier).chain(self.phone_tier.as_ref()) {
            tier.validate()?;
            if tier.end_time() > duration + 1e-9 {
                return Err(invalid(format!(
                    "tier {} ends at {} beyond audio duration {duration}",
                    tier.name,
                    tier.end_time()
                )));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.audio.duration()
    }

    /// Orthographic words in order: every whitespace-separated token of every labeled interval.
    pub fn words(&self) -> Vec<String> {
        self.word_tier
            .labeled()
            .flat_map(|iv| iv.label.split_whitespace().map(str::to_owned))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = HashSet::new();
        for utt in &utterances {
            if !seen.insert(utt.id.as_str()) {
                return Err(Error::DuplicateUtterance(utt.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_minutes(&self) -> f64 {
        self.utterances.iter().map(Utterance::duration).sum::<f64>() / 60.0
    }

    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self
            .utterances
            .iter()
            .map(|u| u.language_id.clone())
            .collect();
        langs.sort();
        langs.dedup();
        langs
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub audio: PathBuf,
    pub textgrid: PathBuf,
    pub speaker: String,
    pub language: String,
}

/// Reads a header-row manifest; tab-separated if the header contains a tab, comma otherwise.
/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read manifest {}", path.display()), e))?;
    let manifest_err = |message: String| Error::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let header = text.lines().next().ok_or_else(|| manifest_err("empty file".into()))?;
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| manifest_err(e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| manifest_err(format!("missing column {name:?}")))
    };
    let (c_id, c_audio, c_grid, c_spk, c_lang) = (
        column("id")?,
        column("audio")?,
        column("textgrid")?,
        column("speaker")?,
        column("language")?,
    );
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| manifest_err(format!("row {}: {e}", i + 2)))?;
        let field = |c: usize| rec.get(c).unwrap_or("").to_owned();
        rows.push(ManifestRow {
            id: field(c_id),
            audio: base.join(field(c_audio)),
            textgrid: base.join(field(c_grid)),
            speaker: field(c_spk),
            language: field(c_lang),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub rules: NormalizationRules,
    pub min_interval: f64,
    pub duration_tolerance: f64,
    /// Also drop short intervals on the phone tier. Off by default: the phone
    /// tier is the evaluation reference and short segments are legitimate there.
    pub filter_phone_tier: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            rules: NormalizationRules::default(),
            min_interval: MIN_INTERVAL_SECONDS,
            duration_tolerance: DURATION_TOLERANCE_SECONDS,
            filter_phone_tier: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub skipped: Vec<(String, String)>,
    pub short_intervals_removed: usize,
    pub words_changed_by_normalization: usize,
}

/// Normalize word labels and drop short intervals on a raw grid's tiers.
pub fn clean_tiers(
    word_tier: &Tier,
    phone_tier: Option<&Tier>,
    options: &IngestOptions,
) -> (Tier, Option<Tier>, usize, usize) {
    let mut changed = 0;
    let normalized = Tier {
        name: word_tier.name.clone(),
        kind: TierKind::Word,
        intervals: word_tier
            .intervals
            .iter()
            .map(|iv| {
                let label = normalize_transcript(&iv.label, &options.rules);
                if label != iv.label.trim() {
                    changed += 1;
                }
                Interval::new(iv.start, iv.end, label)
            })
            .collect(),
    };
    let (words, mut removed) = filter_short_intervals(&normalized, options.min_interval);
    let phones = phone_tier.map(|t| {
        if options.filter_phone_tier {
            let (t, r) = filter_short_intervals(t, options.min_interval);
            removed += r;
            t
        } else {
            t.clone()
        }
    });
    (words, phones, removed, changed)
}

fn load_row(row: &ManifestRow, options: &IngestOptions) -> Result<(Utterance, usize, usize)> {
    let audio = read_wav(&row.audio)?;
    let bytes = std::fs::read(&row.textgrid)
        .map_err(|e| Error::io(format!("read {}", row.textgrid.display()), e))?;
    let grid = parse_textgrid_bytes(&bytes)?;
    let mismatch = (grid.duration - audio.duration()).abs();
    if mismatch > options.duration_tolerance {
        return Err(Error::InvalidParameter(format!(
            "grid xmax {:.3}s vs audio {:.3}s differs by {:.0} ms",
            grid.duration,
            audio.duration(),
            mismatch * 1000.0
        )));
    }
    let word_tier = grid
        .tier(TierKind::Word)
        .or_else(|| grid.tiers.first())
        .ok_or_else(|| Error::InvalidParameter("grid has no tiers".into()))?;
    let phone_tier = grid.tier(TierKind::Phone);
    let (mut words, mut phones, removed, changed) = clean_tiers(word_tier, phone_tier, options);

    // Within tolerance: trim annotations that run past the audio.
    let duration = audio.duration();
    for tier in std::iter::once(&mut words).chain(phones.as_mut()) {
        tier.intervals.retain(|iv| iv.start < duration);
        if let Some(last) = tier.intervals.last_mut() {
            last.end = last.end.min(duration);
        }
    }
    let utt = Utterance::new(&row.id, audio, words, phones, &row.speaker, &row.language)?;
    Ok((utt, removed, changed))
}

/// Build a corpus from a manifest. Rows that fail to load are skipped and
/// reported; duplicate ids are fatal.
pub fn build_corpus(manifest: &Path, options: &IngestOptions) -> Result<(Corpus, ValidationReport)> {
    let rows = read_manifest(manifest)?;
    let mut ids = HashSet::new();
    for row in &rows {
        if !ids.insert(row.id.as_str()) {
            return Err(Error::DuplicateUtterance(row.id.clone()));
        }
    }
    let loaded: Vec<_> = rows.par_iter().map(|row| load_row(row, options)).collect();

    let mut report = ValidationReport::default();
    let mut utterances = Vec::new();
    for (row, res) in rows.iter().zip(loaded) {
        match res {
            Ok((utt, removed, changed)) => {
                report.short_intervals_removed += removed;
                report.words_changed_by_normalization += changed;
                utterances.push(utt);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", row.id);
                report.skipped.push((row.id.clone(), e.to_string()));
            }
        }
    }
    let name = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((Corpus::new(name, utterances)?, report))
}

/// Write every utterance as `<id>.wav` + `<id>.TextGrid` and a tab-separated manifest.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let mut manifest = String::from("id\taudio\ttextgrid\tspeaker\tlanguage\n");
    for utt in &corpus.utterances {
        let wav = format!("{}.wav", utt.id);
        let grid = format!("{}.TextGrid", utt.id);
        write_wav(&utt.audio, &dir.join(&wav))?;
        let mut tiers = vec![utt.word_tier.clone()];
        tiers.extend(utt.phone_tier.clone());
        let text = serialize_textgrid(&tiers, utt.duration())?;
        std::fs::write(dir.join(&grid), text)
            .map_err(|e| Error::io(format!("write {grid}"), e))?;
        manifest.push_str(&format!(
            "{}\t{wav}\t{grid}\t{}\t{}\n",
            utt.id, utt.speaker_id, utt.language_id
        ));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io("write manifest", e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tier(ivs: &[(f64, f64, &str)]) -> Tier {
        Tier::new(
            "words",
            ivs.iter().map(|&(s, e, l)| Interval::new(s, e, l)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn partial_words_and_notes_dropped() {
        let rules = NormalizationRules::default();
        assert_eq!(normalize_transcript("wirri- [laughs] wirriji", &rules), "wirriji");
        assert_eq!(normalize_transcript("(unclear) mara", &rules), "mara");
    }

    #[test]
    fn hyphens_removed() {
        let rules = NormalizationRules::default();
        assert_eq!(normalize_transcript("yan-nhangu", &rules), "yannhangu");
    }

    #[test]
    fn whitespace_collapsed_case_kept() {
        let rules = NormalizationRules::default();
        assert_eq!(normalize_transcript("Ngaju   marri", &rules), "Ngaju marri");
        assert_eq!(normalize_transcript("", &rules), "");
    }

    #[test]
    fn short_interval_relabelled() {
        let (t, n) = filter_short_intervals(&tier(&[(0.0, 0.095, "a"), (0.095, 1.0, "b")]), 0.1);
        assert_eq!(n, 1);
        assert_eq!(t.intervals[0].label, "");
        assert_eq!(t.intervals[1].label, "b");
    }

    #[test]
    fn exactly_min_duration_kept() {
        let (_, n) = filter_short_intervals(&tier(&[(0.0, 0.1, "a")]), 0.1);
        assert_eq!(n, 0);
    }

    #[test]
    fn empty_tier_unchanged() {
        let t = tier(&[(0.0, 0.05, ""), (0.05, 1.0, "")]);
        let (out, n) = filter_short_intervals(&t, 0.1);
        assert_eq!(n, 0);
        assert_eq!(out, t);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let clip = AudioClip::silence(1.0, 16000).unwrap();
        let utt = Utterance::new("u", clip, tier(&[(0.0, 1.0, "a")]), None, "s", "l").unwrap();
        assert!(matches!(
            Corpus::new("c", vec![utt.clone(), utt]),
            Err(Error::DuplicateUtterance(_))
        ));
    }

    #[test]
    fn words_split_on_whitespace() {
        let clip = AudioClip::silence(2.0, 16000).unwrap();
        let utt = Utterance::new(
            "u",
            clip,
            tier(&[(0.0, 1.0, "ngaju marri"), (1.0, 1.5, ""), (1.5, 2.0, "wa")]),
            None,
            "s",
            "l",
        )
        .unwrap();
        assert_eq!(utt.words(), vec!["ngaju", "marri", "wa"]);
    }
}
