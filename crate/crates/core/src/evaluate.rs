//! Boundary-placement evaluation against reference annotation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::am::Alignment;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::lexicon::{NaturalClassMap, OTHER_CLASS};
use crate::textgrid::Tier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Onset,
    FinalOffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPair {
    pub utterance_id: String,
    /// The phone starting at the boundary; for the final offset, the last phone.
    pub phone: String,
    /// The phone ending at the boundary, when it is adjacent.
    pub preceding: Option<String>,
    pub kind: BoundaryKind,
    pub reference: f64,
    pub hypothesis: f64,
}

/// Which phone a boundary is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Attribution {
    #[default]
    Onset,
    Offset,
}

pub fn is_silence_label(label: &str) -> bool {
    let l = label.trim();
    l.is_empty() || l == "sil" || l == "sp"
}

struct Seg<'a> {
    label: &'a str,
    start: f64,
    end: f64,
    adjacent_prev: Option<&'a str>,
}

fn phone_segments(tier: &Tier) -> Vec<Seg<'_>> {
    let mut out: Vec<Seg> = Vec::new();
    let mut prev: Option<(&str, f64)> = None;
    for iv in &tier.intervals {
        let label = iv.label.trim();
        if is_silence_label(label) {
            prev = None;
            continue;
        }
        let adjacent_prev = prev.filter(|(_, end)| (end - iv.start).abs() < 1e-9).map(|(l, _)| l);
        out.push(Seg {
            label,
            start: iv.start,
            end: iv.end,
            adjacent_prev,
        });
        prev = Some((label, iv.end));
    }
    out
}

/// Pair reference and hypothesis boundaries: every phone onset plus the final
/// offset. Silences are dropped from both tiers first; the remaining label
/// sequences must agree.
pub fn match_boundaries(utterance_id: &str, reference: &Tier, hypothesis: &Tier) -> Result<Vec<BoundaryPair>> {
    let r = phone_segments(reference);
    let h = phone_segments(hypothesis);
    for i in 0..r.len().max(h.len()) {
        let rl = r.get(i).map(|s| s.label);
        let hl = h.get(i).map(|s| s.label);
        if rl != hl {
            return Err(Error::LabelMismatch {
                position: i,
                reference: rl.unwrap_or("<end>").to_owned(),
                hypothesis: hl.unwrap_or("<end>").to_owned(),
            });
        }
    }
    let mut pairs: Vec<BoundaryPair> = r
        .iter()
        .zip(&h)
        .map(|(rs, hs)| BoundaryPair {
            utterance_id: utterance_id.to_owned(),
            phone: rs.label.to_owned(),
            preceding: rs.adjacent_prev.map(str::to_owned),
            kind: BoundaryKind::Onset,
            reference: rs.start,
            hypothesis: hs.start,
        })
        .collect();
    if let (Some(rs), Some(hs)) = (r.last(), h.last()) {
        pairs.push(BoundaryPair {
            utterance_id: utterance_id.to_owned(),
            phone: rs.label.to_owned(),
            preceding: None,
            kind: BoundaryKind::FinalOffset,
            reference: rs.end,
            hypothesis: hs.end,
        });
    }
    Ok(pairs)
}

/// Milliseconds; positive when the hypothesis is later.
pub fn signed_diff(pair: &BoundaryPair) -> f64 {
    (pair.hypothesis - pair.reference) * 1000.0
}

/// Pairs for every aligned utterance of `reference`. Utterances without a
/// reference phone tier are an error.
pub fn corpus_pairs(reference: &Corpus, alignments: &[Alignment]) -> Result<Vec<BoundaryPair>> {
    let by_id: BTreeMap<&str, &Alignment> = alignments.iter().map(|a| (a.utterance_id.as_str(), a)).collect();
    let per_utt: Vec<Result<Vec<BoundaryPair>>> = reference
        .utterances
        .par_iter()
        .filter_map(|u| by_id.get(u.id.as_str()).map(|a| (u, a)))
        .map(|(u, a)| {
            let ref_tier = u
                .phone_tier
                .as_ref()
                .ok_or_else(|| Error::Evaluation(format!("utterance {} has no reference phone tier", u.id)))?;
            let hyp = crate::am::alignment_tier(a)?;
            match_boundaries(&u.id, ref_tier, &hyp)
        })
        .collect();
    let mut out = Vec::new();
    for p in per_utt {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub mean_signed_ms: f64,
    pub mean_abs_ms: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    /// Every class of the map in its order; empty classes have count 0.
    pub classes: Vec<ClassStats>,
    pub overall_mean_signed_ms: f64,
    pub overall_mean_abs_ms: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassStats> {
        self.classes.iter().find(|c| c.class == name)
    }
}

/// Order-independent mean: values are sorted before summing.
fn stable_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn aggregate(
    pairs: &[BoundaryPair],
    class_map: &NaturalClassMap,
    attribution: Attribution,
    model: &str,
    dataset: &str,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("no boundary pairs to aggregate".into()));
    }
    let mut per_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut unknown: BTreeMap<&str, usize> = BTreeMap::new();
    for p in pairs {
        let phone = match (attribution, p.kind, &p.preceding) {
            (Attribution::Offset, BoundaryKind::Onset, Some(prev)) => prev.as_str(),
            _ => p.phone.as_str(),
        };
        let class = class_map.class_of(phone).unwrap_or_else(|| {
            *unknown.entry(phone).or_default() += 1;
            OTHER_CLASS
        });
        per_class.entry(class).or_default().push(signed_diff(p));
    }
    for (phone, n) in unknown {
        log::warn!("phone {phone:?} is not in the natural class map; {n} boundaries counted as {OTHER_CLASS}");
    }
    let mut classes: Vec<ClassStats> = class_map
        .classes()
        .iter()
        .map(|c| {
            let v = per_class.remove(c.as_str()).unwrap_or_default();
            ClassStats {
                class: c.clone(),
                count: v.len(),
                mean_abs_ms: stable_mean(v.iter().map(|x| x.abs()).collect()),
                mean_signed_ms: stable_mean(v),
            }
        })
        .collect();
    // Classes the map did not declare (only possible through a mapping to an undeclared name).
    for (c, v) in per_class {
        classes.push(ClassStats {
            class: c.to_owned(),
            count: v.len(),
            mean_abs_ms: stable_mean(v.iter().map(|x| x.abs()).collect()),
            mean_signed_ms: stable_mean(v),
        });
    }
    let all: Vec<f64> = pairs.iter().map(signed_diff).collect();
    Ok(EvalReport {
        model: model.to_owned(),
        dataset: dataset.to_owned(),
        classes,
        overall_mean_abs_ms: stable_mean(all.iter().map(|x| x.abs()).collect()),
        overall_mean_signed_ms: stable_mean(all),
        count: pairs.len(),
    })
}

/// Share of pairs whose absolute difference is at most `tolerance_ms`.
pub fn fraction_within(pairs: &[BoundaryPair], tolerance_ms: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|p| signed_diff(p).abs() <= tolerance_ms).count() as f64 / pairs.len() as f64
}

/// Ascending by overall mean absolute difference, ties by model label.
pub fn compare_models(reports: &[EvalReport]) -> Vec<EvalReport> {
    let mut out = reports.to_vec();
    out.sort_by(|a, b| {
        a.overall_mean_abs_ms
            .total_cmp(&b.overall_mean_abs_ms)
            .then_with(|| a.model.cmp(&b.model))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Table {
    Signed,
    Absolute,
}

impl Table {
    fn suffix(self) -> &'static str {
        match self {
            Table::Signed => "signed",
            Table::Absolute => "abs",
        }
    }
}

fn table(reports: &[EvalReport], which: Table) -> Result<(Vec<String>, Vec<(String, Vec<Option<f64>>)>)> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Evaluation("no reports for heatmap".into()))?;
    let classes: Vec<String> = first.classes.iter().map(|c| c.class.clone()).collect();
    let mut rows = Vec::new();
    for r in reports {
        let names: Vec<&str> = r.classes.iter().map(|c| c.class.as_str()).collect();
        if names != classes.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Evaluation(format!(
                "report {:?} has a different class set from {:?}",
                r.model, first.model
            )));
        }
        let mut values: Vec<Option<f64>> = r
            .classes
            .iter()
            .map(|c| {
                (c.count > 0).then_some(match which {
                    Table::Signed => c.mean_signed_ms,
                    Table::Absolute => c.mean_abs_ms,
                })
            })
            .collect();
        values.push(Some(match which {
            Table::Signed => r.overall_mean_signed_ms,
            Table::Absolute => r.overall_mean_abs_ms,
        }));
        rows.push((r.model.clone(), values));
    }
    let mut header = classes;
    header.push("overall".into());
    Ok((header, rows))
}

fn csv_text(header: &[String], rows: &[(String, Vec<Option<f64>>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut h = vec!["model".to_owned()];
    h.extend(header.iter().cloned());
    w.write_record(&h).map_err(|e| Error::Evaluation(e.to_string()))?;
    for (model, values) in rows {
        let mut rec = vec![model.clone()];
        rec.extend(values.iter().map(|v| v.map_or(String::new(), |x| format!("{x:.2}"))));
        w.write_record(&rec).map_err(|e| Error::Evaluation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Evaluation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Evaluation(e.to_string()))
}

/// Cell fill for a value. Signed tables are diverging around 0 (red for
/// later, blue for earlier); absolute tables run from white to dark red.
pub fn heatmap_color(value: f64, scale: f64, signed: bool) -> (u8, u8, u8) {
    let t = if scale > 0.0 { (value / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let mix = |a: f64, b: f64, t: f64| (a + (b - a) * t).round() as u8;
    if signed {
        if t >= 0.0 {
            (mix(255.0, 200.0, t), mix(255.0, 30.0, t), mix(255.0, 30.0, t))
        } else {
            (mix(255.0, 30.0, -t), mix(255.0, 80.0, -t), mix(255.0, 200.0, -t))
        }
    } else {
        let t = t.max(0.0);
        (mix(255.0, 140.0, t), mix(255.0, 20.0, t), mix(255.0, 30.0, t))
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_text(header: &[String], rows: &[(String, Vec<Option<f64>>)], signed: bool, title: &str) -> String {
    let scale = rows
        .iter()
        .flat_map(|(_, v)| v.iter().flatten())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let (cw, ch, label_w, top) = (72.0, 28.0, 180.0, 60.0);
    let width = label_w + cw * header.len() as f64 + 10.0;
    let height = top + ch * rows.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(s, "<text x=\"4\" y=\"16\" font-size=\"13\">{}</text>", xml_escape(title));
    for (j, h) in header.iter().enumerate() {
        let x = label_w + cw * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            top - 8.0,
            xml_escape(h)
        );
    }
    for (i, (model, values)) in rows.iter().enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            label_w - 6.0,
            y + ch * 0.65,
            xml_escape(model)
        );
        for (j, v) in values.iter().enumerate() {
            let x = label_w + cw * j as f64;
            let (fill, text) = match v {
                Some(v) => {
                    let (r, g, b) = heatmap_color(*v, scale, signed);
                    (format!("#{r:02x}{g:02x}{b:02x}"), format!("{v:.2}"))
                }
                None => ("#dddddd".to_owned(), String::new()),
            };
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{fill}\" stroke=\"#ffffff\"/>"
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{text}</text>",
                x + cw / 2.0,
                y + ch * 0.65
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `{prefix}_signed.csv`, `{prefix}_abs.csv` and the matching SVGs.
pub fn emit_heatmap(reports: &[EvalReport], prefix: &Path) -> Result<Vec<PathBuf>> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    let stem = prefix
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidParameter(format!("bad heatmap prefix {}", prefix.display())))?;
    let mut written = Vec::new();
    for which in [Table::Signed, Table::Absolute] {
        let (header, rows) = table(reports, which)?;
        let base = prefix.with_file_name(format!("{stem}_{}", which.suffix()));
        let csv_path = base.with_extension("csv");
        let title = match which {
            Table::Signed => "Mean signed boundary difference (ms)",
            Table::Absolute => "Mean absolute boundary difference (ms)",
        };
        for (path, text) in [
            (csv_path, csv_text(&header, &rows)?),
            (base.with_extension("svg"), svg_text(&header, &rows, which == Table::Signed, title)),
        ] {
            std::fs::write(&path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
            written.push(path);
        }
    }
    Ok(written)
}
