//! Praat TextGrid interval tiers.
//!
//! The reader accepts both the long ("key = value") and short (values only)
//! text layouts in UTF-8 or BOM-marked UTF-16. Both layouts carry the same
//! value sequence, so the reader tokenizes away keys and bracketed indices and
//! walks one value stream. The writer emits the long layout only.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

impl Interval {
    pub fn new(start: f64, end: f64, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Empty labels mark unannotated spans (pauses or removed material).
    pub fn is_empty(&self) -> bool {
        self.label.trim().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TierKind {
    Word,
    Phone,
    Other,
}

impl TierKind {
    pub fn from_name(name: &str) -> Self {
        let lower = name.to_lowercase();
        if lower.contains("word") {
            TierKind::Word
        } else if lower.contains("phon") || lower.contains("segment") {
            TierKind::Phone
        } else {
            TierKind::Other
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tier {
    pub name: String,
    pub kind: TierKind,
    pub intervals: Vec<Interval>,
}

impl Tier {
    /// Validates ordering and non-overlap.
    pub fn new(name: impl Into<String>, intervals: Vec<Interval>) -> Result<Self> {
        let name = name.into();
        let tier = Tier {
            kind: TierKind::from_name(&name),
            name,
            intervals,
        };
        tier.validate()?;
        Ok(tier)
    }

    pub fn with_kind(mut self, kind: TierKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::TierInvalid {
            tier: self.name.clone(),
            message,
        };
        for (i, iv) in self.intervals.iter().enumerate() {
            if !(iv.start.is_finite() && iv.end.is_finite()) {
                return Err(bad(format!("interval {} has non-finite time", i + 1)));
            }
            if iv.start < 0.0 || iv.start >= iv.end {
                return Err(bad(format!(
                    "interval {} [{}, {}] is empty or negative",
                    i + 1,
                    iv.start,
                    iv.end
                )));
            }
        }
        for (i, pair) in self.intervals.windows(2).enumerate() {
            if pair[0].end > pair[1].start {
                return Err(bad(format!(
                    "intervals {} and {} overlap ({} > {})",
                    i + 1,
                    i + 2,
                    pair[0].end,
                    pair[1].start
                )));
            }
        }
        Ok(())
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Interval> {
        self.intervals.iter().filter(|iv| !iv.is_empty())
    }

    pub fn end_time(&self) -> f64 {
        self.intervals.last().map_or(0.0, |iv| iv.end)
    }

    /// Cover `[0, duration]` completely, filling uncovered spans with empty intervals.
    pub fn gap_filled(&self, duration: f64) -> Tier {
        let mut out = Vec::with_capacity(self.intervals.len() * 2 + 1);
        let mut cursor = 0.0;
        for iv in &self.intervals {
            if iv.start > cursor {
                out.push(Interval::new(cursor, iv.start, ""));
            }
            out.push(iv.clone());
            cursor = iv.end;
        }
        if duration > cursor {
            out.push(Interval::new(cursor, duration, ""));
        }
        Tier {
            name: self.name.clone(),
            kind: self.kind,
            intervals: out,
        }
    }
}

/// A parsed grid: interval tiers plus the grid's `xmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextGrid {
    pub tiers: Vec<Tier>,
    pub duration: f64,
}

impl TextGrid {
    pub fn tier(&self, kind: TierKind) -> Option<&Tier> {
        self.tiers.iter().find(|t| t.kind == kind)
    }
}

/// Decode UTF-8 (optionally BOM-prefixed) or UTF-16 with a byte-order mark.
pub fn decode_text(bytes: &[u8]) -> Result<String> {
    let utf16 = |body: &[u8], little: bool| -> Result<String> {
        if body.len() % 2 != 0 {
            return Err(Error::TextGridSyntax {
                line: 0,
                message: "odd byte count in UTF-16 text".into(),
            });
        }
        let units: Vec<u16> = body
            .chunks_exact(2)
            .map(|c| {
                if little {
                    u16::from_le_bytes([c[0], c[1]])
                } else {
                    u16::from_be_bytes([c[0], c[1]])
                }
            })
            .collect();
        String::from_utf16(&units).map_err(|e| Error::TextGridSyntax {
            line: 0,
            message: format!("invalid UTF-16: {e}"),
        })
    };
    match bytes {
        [0xFF, 0xFE, rest @ ..] => utf16(rest, true),
        [0xFE, 0xFF, rest @ ..] => utf16(rest, false),
        [0xEF, 0xBB, 0xBF, rest @ ..] => std::str::from_utf8(rest)
            .map(str::to_owned)
            .map_err(|e| Error::TextGridSyntax {
                line: 0,
                message: format!("invalid UTF-8: {e}"),
            }),
        _ => std::str::from_utf8(bytes)
            .map(str::to_owned)
            .map_err(|e| Error::TextGridSyntax {
                line: 0,
                message: format!("invalid UTF-8: {e}"),
            }),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Text(String),
    Number(f64),
    Flag(bool),
}

#[derive(Debug)]
struct Token {
    value: Value,
    line: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    let mut line = 1;
    let mut bracket_depth = 0usize;
    while let Some(&(_, c)) = chars.peek() {
        match c {
            '\n' => {
                line += 1;
                chars.next();
            }
            '"' => {
                let start_line = line;
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        Some((_, '"')) => {
                            if matches!(chars.peek(), Some(&(_, '"'))) {
                                chars.next();
                                s.push('"');
                            } else {
                                break;
                            }
                        }
                        Some((_, ch)) => {
                            if ch == '\n' {
                                line += 1;
                            }
                            s.push(ch);
                        }
                        None => {
                            return Err(Error::TextGridSyntax {
                                line: start_line,
                                message: "unterminated string".into(),
                            })
                        }
                    }
                }
                tokens.push(Token {
                    value: Value::Text(s),
                    line: start_line,
                });
            }
            '[' => {
                bracket_depth += 1;
                chars.next();
            }
            ']' => {
                bracket_depth = bracket_depth.saturating_sub(1);
                chars.next();
            }
            '!' => {
                // Praat comment until end of line.
                while let Some(&(_, ch)) = chars.peek() {
                    if ch == '\n' {
                        break;
                    }
                    chars.next();
                }
            }
            '<' => {
                let mut word = String::new();
                chars.next();
                for (_, ch) in chars.by_ref() {
                    if ch == '>' {
                        break;
                    }
                    word.push(ch);
                }
                let flag = match word.as_str() {
                    "exists" => true,
                    "absent" => false,
                    other => {
                        return Err(Error::TextGridSyntax {
                            line,
                            message: format!("unknown flag <{other}>"),
                        })
                    }
                };
                tokens.push(Token {
                    value: Value::Flag(flag),
                    line,
                });
            }
            c if c.is_whitespace() || c == '=' || c == ':' => {
                chars.next();
            }
            _ => {
                let mut word = String::new();
                while let Some(&(_, ch)) = chars.peek() {
                    if ch.is_whitespace() || matches!(ch, '"' | '[' | ']' | '=' | '<' | '!') {
                        break;
                    }
                    word.push(ch);
                    chars.next();
                }
                let word = word.trim_end_matches(':');
                if bracket_depth > 0 {
                    continue;
                }
                if let Ok(n) = word.parse::<f64>() {
                    tokens.push(Token {
                        value: Value::Number(n),
                        line,
                    });
                }
                // Anything else is a key name ("xmin", "item", "tiers?") and carries no value.
            }
        }
    }
    Ok(tokens)
}

struct Cursor {
    tokens: Vec<Token>,
    pos: usize,
}

impl Cursor {
    fn line(&self) -> usize {
        self.tokens
            .get(self.pos)
            .or_else(|| self.tokens.last())
            .map_or(0, |t| t.line)
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::TextGridSyntax {
            line: self.line(),
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&Value> {
        let line = self.line();
        let tok = self.tokens.get(self.pos).ok_or_else(|| Error::TextGridSyntax {
            line,
            message: format!("unexpected end of file, expected {what}"),
        })?;
        self.pos += 1;
        Ok(&tok.value)
    }

    fn text(&mut self, what: &str) -> Result<String> {
        match self.next(what)? {
            Value::Text(s) => Ok(s.clone()),
            other => {
                let other = other.clone();
                self.pos -= 1;
                Err(self.err(format!("expected {what} string, found {other:?}")))
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<f64> {
        match self.next(what)? {
            Value::Number(n) => Ok(*n),
            other => {
                let other = other.clone();
                self.pos -= 1;
                Err(self.err(format!("expected {what} number, found {other:?}")))
            }
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.number(what)?;
        if n < 0.0 || n.fract() != 0.0 {
            self.pos -= 1;
            return Err(self.err(format!("{what} must be a non-negative integer, got {n}")));
        }
        Ok(n as usize)
    }
}

/// Parse a TextGrid from raw bytes (any supported encoding).
pub fn parse_textgrid_bytes(bytes: &[u8]) -> Result<TextGrid> {
    parse_textgrid(&decode_text(bytes)?)
}

pub fn parse_textgrid(text: &str) -> Result<TextGrid> {
    let mut cur = Cursor {
        tokens: tokenize(text)?,
        pos: 0,
    };
    let file_type = cur.text("file type")?;
    if file_type != "ooTextFile" {
        return Err(cur.err(format!("file type {file_type:?} is not ooTextFile")));
    }
    let class = cur.text("object class")?;
    if class != "TextGrid" {
        return Err(cur.err(format!("object class {class:?} is not TextGrid")));
    }
    let xmin = cur.number("xmin")?;
    let xmax = cur.number("xmax")?;
    if xmin != 0.0 {
        return Err(cur.err(format!("grid xmin {xmin} must be 0")));
    }
    if xmax <= xmin {
        return Err(cur.err(format!("grid xmax {xmax} must exceed xmin")));
    }
    let tier_count = match cur.next("tiers flag")? {
        Value::Flag(false) => 0,
        Value::Flag(true) => cur.count("tier count")?,
        _ => return Err(cur.err("expected <exists> or <absent>")),
    };

    let mut tiers = Vec::with_capacity(tier_count);
    for _ in 0..tier_count {
        let tier_class = cur.text("tier class")?;
        let name = cur.text("tier name")?;
        match tier_class.as_str() {
            "IntervalTier" => {}
            "TextTier" => return Err(Error::PointTier { tier: name }),
            other => return Err(cur.err(format!("unknown tier class {other:?}"))),
        }
        let _tier_min = cur.number("tier xmin")?;
        let tier_max = cur.number("tier xmax")?;
        if tier_max > xmax {
            return Err(Error::TierInvalid {
                tier: name,
                message: format!("tier xmax {tier_max} exceeds grid xmax {xmax}"),
            });
        }
        let n = cur.count("interval count")?;
        let mut intervals = Vec::with_capacity(n);
        for _ in 0..n {
            let start = cur.number("interval xmin")?;
            let end = cur.number("interval xmax")?;
            let label = cur.text("interval text")?;
            if end > xmax {
                return Err(Error::TierInvalid {
                    tier: name,
                    message: format!("interval end {end} exceeds grid xmax {xmax}"),
                });
            }
            intervals.push(Interval::new(start, end, label));
        }
        tiers.push(Tier::new(name, intervals)?);
    }
    if cur.pos != cur.tokens.len() {
        return Err(cur.err("trailing content after last tier"));
    }
    Ok(TextGrid {
        tiers,
        duration: xmax,
    })
}

/// At least six decimals, more when six would not round-trip exactly.
fn format_time(t: f64) -> String {
    let fixed = format!("{t:.6}");
    if fixed.parse::<f64>() == Ok(t) {
        fixed
    } else {
        let shortest = format!("{t}");
        if shortest.contains('.') || shortest.contains('e') {
            shortest
        } else {
            format!("{shortest}.0")
        }
    }
}

fn quote(label: &str) -> String {
    format!("\"{}\"", label.replace('"', "\"\""))
}

/// Long-format UTF-8 text. Gaps inside `[0, duration]` are filled with empty intervals.
pub fn serialize_textgrid(tiers: &[Tier], duration: f64) -> Result<String> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidParameter(format!("grid duration {duration}")));
    }
    for tier in tiers {
        tier.validate()?;
        if let Some(iv) = tier.intervals.iter().find(|iv| iv.end > duration) {
            return Err(Error::TierInvalid {
                tier: tier.name.clone(),
                message: format!("interval [{}, {}] outside [0, {duration}]", iv.start, iv.end),
            });
        }
    }

    let mut out = String::new();
    out.push_str("File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n");
    let _ = writeln!(out, "xmin = {}", format_time(0.0));
    let _ = writeln!(out, "xmax = {}", format_time(duration));
    if tiers.is_empty() {
        out.push_str("tiers? <absent>\n");
        return Ok(out);
    }
    out.push_str("tiers? <exists>\n");
    let _ = writeln!(out, "size = {}", tiers.len());
    out.push_str("item []:\n");
    for (i, tier) in tiers.iter().enumerate() {
        let filled = tier.gap_filled(duration);
        let _ = writeln!(out, "    item [{}]:", i + 1);
        out.push_str("        class = \"IntervalTier\"\n");
        let _ = writeln!(out, "        name = {}", quote(&tier.name));
        let _ = writeln!(out, "        xmin = {}", format_time(0.0));
        let _ = writeln!(out, "        xmax = {}", format_time(duration));
        let _ = writeln!(out, "        intervals: size = {}", filled.intervals.len());
        for (j, iv) in filled.intervals.iter().enumerate() {
            let _ = writeln!(out, "        intervals [{}]:", j + 1);
            let _ = writeln!(out, "            xmin = {}", format_time(iv.start));
            let _ = writeln!(out, "            xmax = {}", format_time(iv.end));
            let _ = writeln!(out, "            text = {}", quote(&iv.label));
        }
    }
    Ok(out)
}

/// Short ("values only") layout. Only used for interchange tests and tooling;
/// the crate always writes the long layout.
pub fn serialize_textgrid_short(tiers: &[Tier], duration: f64) -> Result<String> {
    let mut out = String::from("File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n");
    let _ = writeln!(out, "0\n{}", format_time(duration));
    if tiers.is_empty() {
        out.push_str("<absent>\n");
        return Ok(out);
    }
    let _ = writeln!(out, "<exists>\n{}", tiers.len());
    for tier in tiers {
        tier.validate()?;
        let filled = tier.gap_filled(duration);
        let _ = writeln!(out, "\"IntervalTier\"\n{}", quote(&tier.name));
        let _ = writeln!(out, "0\n{}\n{}", format_time(duration), filled.intervals.len());
        for iv in &filled.intervals {
            let _ = writeln!(
                out,
                "{}\n{}\n{}",
                format_time(iv.start),
                format_time(iv.end),
                quote(&iv.label)
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LONG: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 2
tiers? <exists>
size = 1
item []:
    item [1]:
        class = "IntervalTier"
        name = "words"
        xmin = 0
        xmax = 2
        intervals: size = 2
        intervals [1]:
            xmin = 0
            xmax = 1
            text = "ngaju"
        intervals [2]:
            xmin = 1
            xmax = 2
            text = ""
"#;

    const SHORT: &str = "File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n0\n2\n<exists>\n1\n\"IntervalTier\"\n\"words\"\n0\n2\n2\n0\n1\n\"ngaju\"\n1\n2\n\"\"\n";

    #[test]
    fn long_format() {
        let grid = parse_textgrid(LONG).unwrap();
        assert_eq!(grid.duration, 2.0);
        assert_eq!(grid.tiers.len(), 1);
        let tier = &grid.tiers[0];
        assert_eq!(tier.name, "words");
        assert_eq!(tier.kind, TierKind::Word);
        assert_eq!(
            tier.intervals,
            vec![Interval::new(0.0, 1.0, "ngaju"), Interval::new(1.0, 2.0, "")]
        );
    }

    #[test]
    fn short_format_matches_long() {
        assert_eq!(parse_textgrid(SHORT).unwrap(), parse_textgrid(LONG).unwrap());
    }

    #[test]
    fn utf16_with_bom() {
        for little in [true, false] {
            let mut bytes = if little { vec![0xFF, 0xFE] } else { vec![0xFE, 0xFF] };
            for unit in LONG.replace("ngaju", "ɖaːŋ").encode_utf16() {
                let b = if little { unit.to_le_bytes() } else { unit.to_be_bytes() };
                bytes.extend_from_slice(&b);
            }
            let grid = parse_textgrid_bytes(&bytes).unwrap();
            assert_eq!(grid.tiers[0].intervals[0].label, "ɖaːŋ");
        }
    }

    #[test]
    fn point_tier_rejected() {
        let text = "File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n0\n1\n<exists>\n1\n\"TextTier\"\n\"tones\"\n0\n1\n1\n0.5\n\"H\"\n";
        assert!(matches!(parse_textgrid(text), Err(Error::PointTier { tier }) if tier == "tones"));
    }

    #[test]
    fn overlap_rejected() {
        let text = LONG.replace("            xmin = 1\n            xmax = 2", "            xmin = 0.5\n            xmax = 2");
        assert!(matches!(parse_textgrid(&text), Err(Error::TierInvalid { .. })));
    }

    #[test]
    fn exceeding_xmax_rejected() {
        let text = LONG.replacen("xmax = 2\ntiers", "xmax = 1.5\ntiers", 1);
        assert!(matches!(parse_textgrid(&text), Err(Error::TierInvalid { .. })));
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = LONG.replace("            xmax = 1\n", "            xmax = \"one\"\n");
        match parse_textgrid(&text) {
            Err(Error::TextGridSyntax { line, .. }) => assert_eq!(line, 17),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_grid() {
        let text = serialize_textgrid(&[], 1.0).unwrap();
        let grid = parse_textgrid(&text).unwrap();
        assert!(grid.tiers.is_empty());
        assert_eq!(grid.duration, 1.0);
    }

    #[test]
    fn serializer_fills_gaps() {
        let tier = Tier::new(
            "phones",
            vec![Interval::new(0.0, 1.0, "a"), Interval::new(2.0, 3.0, "b")],
        )
        .unwrap();
        let grid = parse_textgrid(&serialize_textgrid(&[tier], 3.0).unwrap()).unwrap();
        let ivs = &grid.tiers[0].intervals;
        assert_eq!(ivs.len(), 3);
        assert_eq!(ivs[1], Interval::new(1.0, 2.0, ""));
        assert_eq!(ivs.first().unwrap().start, 0.0);
        assert_eq!(ivs.last().unwrap().end, 3.0);
    }

    #[test]
    fn quotes_are_escaped() {
        let tier = Tier::new("words", vec![Interval::new(0.0, 1.0, "say \"hi\"")]).unwrap();
        let grid = parse_textgrid(&serialize_textgrid(&[tier.clone()], 1.0).unwrap()).unwrap();
        assert_eq!(grid.tiers[0], tier);
    }

    #[test]
    fn times_have_six_decimals() {
        assert_eq!(format_time(1.0), "1.000000");
        assert_eq!(format_time(0.1234567891), "0.1234567891");
    }
}
