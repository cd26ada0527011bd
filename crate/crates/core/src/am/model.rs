//! Acoustic model types and the on-disk model format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::gmm::DiagGmm;
use super::graph::{Neighbor, Segment, SILENCE_PHONE};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMatrix, LdaTransform};
use crate::lexicon::{Phone, PhoneClassMap};

pub const PHONE_STATES: usize = 3;
pub const SILENCE_STATES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mono,
    Tri,
    Lda,
    Sat,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Mono, Stage::Tri, Stage::Lda, Stage::Sat];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mono => "mono",
            Stage::Tri => "tri",
            Stage::Lda => "lda",
            Stage::Sat => "sat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::ModelFormat(format!("unknown stage {s:?}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One side of a triphone context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ctx {
    UtteranceBoundary,
    WordBoundary,
    Class(usize),
}

impl Ctx {
    fn encode(self) -> String {
        match self {
            Ctx::UtteranceBoundary => "#u".into(),
            Ctx::WordBoundary => "#w".into(),
            Ctx::Class(c) => c.to_string(),
        }
    }

    fn decode(s: &str) -> Result<Self> {
        match s {
            "#u" => Ok(Ctx::UtteranceBoundary),
            "#w" => Ok(Ctx::WordBoundary),
            n => n
                .parse()
                .map(Ctx::Class)
                .map_err(|_| Error::ModelFormat(format!("bad context {n:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    pub left: Ctx,
    pub center: Phone,
    pub right: Ctx,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKey {
    Silence,
    Mono(Phone),
    Tri(ContextKey),
}

impl ModelKey {
    pub fn encode(&self) -> String {
        match self {
            ModelKey::Silence => SILENCE_PHONE.into(),
            ModelKey::Mono(p) => format!("mono:{p}"),
            ModelKey::Tri(k) => format!("tri:{}|{}|{}", k.left.encode(), k.center, k.right.encode()),
        }
    }

    pub fn decode(s: &str) -> Result<Self> {
        if s == SILENCE_PHONE {
            return Ok(ModelKey::Silence);
        }
        if let Some(p) = s.strip_prefix("mono:") {
            return Ok(ModelKey::Mono(p.to_owned()));
        }
        if let Some(rest) = s.strip_prefix("tri:") {
            let parts: Vec<&str> = rest.split('|').collect();
            if parts.len() == 3 {
                return Ok(ModelKey::Tri(ContextKey {
                    left: Ctx::decode(parts[0])?,
                    center: parts[1].to_owned(),
                    right: Ctx::decode(parts[2])?,
                }));
            }
        }
        Err(Error::ModelFormat(format!("bad model key {s:?}")))
    }

    pub fn center_phone(&self) -> &str {
        match self {
            ModelKey::Silence => SILENCE_PHONE,
            ModelKey::Mono(p) => p,
            ModelKey::Tri(k) => &k.center,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmState {
    pub gmm: DiagGmm,
    /// Self-loop probability; the forward transition takes the rest.
    pub self_loop: f64,
    /// Frames aligned to this state at the last update.
    pub occupancy: f64,
}

impl HmmState {
    pub fn self_loop_log(&self) -> f64 {
        self.self_loop.ln()
    }

    pub fn forward_log(&self) -> f64 {
        (1.0 - self.self_loop).ln()
    }
}

/// Left-to-right HMM: self-loop and forward arc per state.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmPhoneModel {
    pub states: Vec<HmmState>,
}

impl HmmPhoneModel {
    pub fn uniform(n_states: usize, gmm: DiagGmm) -> Self {
        Self {
            states: (0..n_states)
                .map(|_| HmmState {
                    gmm: gmm.clone(),
                    self_loop: 0.5,
                    occupancy: 0.0,
                })
                .collect(),
        }
    }

    pub fn gaussian_count(&self) -> usize {
        self.states.iter().map(|s| s.gmm.num_components()).sum()
    }
}

/// Per-dimension `y = scale * x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTransform {
    pub speaker_id: String,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl SpeakerTransform {
    pub fn identity(speaker_id: impl Into<String>, dims: usize) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            scale: vec![1.0; dims],
            offset: vec![0.0; dims],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.iter().all(|&a| a == 1.0) && self.offset.iter().all(|&b| b == 0.0)
    }

    /// Log Jacobian added to every frame's likelihood.
    pub fn log_det(&self) -> f64 {
        self.scale.iter().map(|a| a.ln()).sum()
    }

    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), a), b) in out.iter_mut().zip(x).zip(&self.scale).zip(&self.offset) {
            *o = a * v + b;
        }
    }

    pub fn apply(&self, fm: &FeatureMatrix) -> Result<FeatureMatrix> {
        if fm.dims() != self.scale.len() {
            return Err(Error::DimensionMismatch {
                expected: self.scale.len(),
                got: fm.dims(),
            });
        }
        let mut out = fm.clone();
        for t in 0..out.frames() {
            let row = fm.row(t);
            self.apply_row(row, out.row_mut(t));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub stage: Stage,
    pub feature_config: FeatureConfig,
    pub dims: usize,
    /// Phone inventory without the silence phone.
    pub inventory: Vec<Phone>,
    pub class_map: Option<PhoneClassMap>,
    pub hmms: BTreeMap<ModelKey, HmmPhoneModel>,
    pub lda: Option<LdaTransform>,
    pub speaker_transforms: BTreeMap<String, SpeakerTransform>,
    pub schedule_label: String,
}

impl AcousticModel {
    pub fn gaussian_count(&self) -> usize {
        self.hmms.values().map(HmmPhoneModel::gaussian_count).sum()
    }

    fn ctx(&self, n: &Neighbor) -> Result<Ctx> {
        Ok(match n {
            Neighbor::UtteranceEdge => Ctx::UtteranceBoundary,
            Neighbor::WordEdge => Ctx::WordBoundary,
            Neighbor::Phone(p) => {
                let map = self
                    .class_map
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter("triphone model without class map".into()))?;
                Ctx::Class(map.class_of(p).ok_or_else(|| {
                    Error::InvalidParameter(format!("phone {p:?} missing from class map {}", map.name))
                })?)
            }
        })
    }

    /// The key a segment would use if every context were seen.
    pub fn segment_key(&self, segment: &Segment) -> Result<ModelKey> {
        match segment {
            Segment::Silence { .. } => Ok(ModelKey::Silence),
            Segment::Phone { phone, left, right, .. } => {
                if self.stage == Stage::Mono {
                    Ok(ModelKey::Mono(phone.clone()))
                } else {
                    Ok(ModelKey::Tri(ContextKey {
                        left: self.ctx(left)?,
                        center: phone.clone(),
                        right: self.ctx(right)?,
                    }))
                }
            }
        }
    }

    /// Resolve a segment to a key present in the model, backing off from an
    /// unseen triphone context to the centre monophone.
    pub fn resolve(&self, segment: &Segment) -> Result<ModelKey> {
        let key = self.segment_key(segment)?;
        if self.hmms.contains_key(&key) {
            return Ok(key);
        }
        let mono = ModelKey::Mono(key.center_phone().to_owned());
        if self.hmms.contains_key(&mono) {
            return Ok(mono);
        }
        Err(Error::OutOfVocabulary(format!("no model for phone {:?}", key.center_phone())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let fc = &self.feature_config;
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        let mut kv = |k: &str, v: String| {
            header.push_str(k);
            header.push('=');
            header.push_str(&v);
            header.push('\n');
        };
        kv("stage", self.stage.to_string());
        kv("dims", self.dims.to_string());
        kv("inventory", self.inventory.join(" "));
        kv("schedule", self.schedule_label.clone());
        kv(
            "features",
            format!(
                "{} {} {} {} {} {} {} {}",
                fc.frame_length,
                fc.frame_hop,
                fc.pre_emphasis,
                fc.mel_filters,
                fc.cepstra,
                fc.delta_window,
                fc.sample_rate,
                fc.low_freq
            ),
        );
        kv("hmms", self.hmms.len().to_string());
        kv(
            "lda",
            self.lda
                .as_ref()
                .map_or("none".into(), |l| format!("{}x{}", l.out_dim(), l.in_dim())),
        );
        kv("speakers", self.speaker_transforms.len().to_string());
        match &self.class_map {
            Some(m) => {
                let text = m.to_text();
                kv("class_map", m.name.clone());
                kv("class_map_lines", text.lines().count().to_string());
                for line in text.lines() {
                    header.push_str(line);
                    header.push('\n');
                }
            }
            None => kv("class_map", "none".into()),
        }
        header.push_str(END_HEADER);
        header.push('\n');

        let mut w = BinWriter(header.into_bytes());
        for (key, hmm) in &self.hmms {
            w.str(&key.encode());
            w.u32(hmm.states.len());
            for s in &hmm.states {
                w.f64(s.self_loop);
                w.f64(s.occupancy);
                let (weights, means, vars) = s.gmm.raw_parts();
                w.u32(weights.len());
                w.f64s(weights);
                for m in means {
                    w.f64s(m);
                }
                for v in vars {
                    w.f64s(v);
                }
            }
        }
        if let Some(l) = &self.lda {
            w.u32(l.splice);
            for r in 0..l.out_dim() {
                for c in 0..l.in_dim() {
                    w.f64(l.matrix[(r, c)]);
                }
            }
            w.f64s(&l.eigenvalues);
        }
        for (spk, t) in &self.speaker_transforms {
            w.str(spk);
            w.u32(t.scale.len());
            w.f64s(&t.scale);
            w.f64s(&t.offset);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::ModelFormat(m);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("not an alignlab model (bad magic)".into()));
        }
        let mut fields = BTreeMap::new();
        let mut class_lines = Vec::new();
        loop {
            let line = next_line()?;
            if line == END_HEADER {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            fields.insert(k.to_owned(), v.to_owned());
            if k == "class_map_lines" {
                let n: usize = v.parse().map_err(|_| bad("class_map_lines".into()))?;
                for _ in 0..n {
                    class_lines.push(next_line()?.to_owned());
                }
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing header field {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let stage = Stage::parse(get("stage")?)?;
        let dims = num("dims")?;
        let inventory: Vec<Phone> = get("inventory")?.split_whitespace().map(str::to_owned).collect();
        let f: Vec<&str> = get("features")?.split_whitespace().collect();
        if f.len() != 8 {
            return Err(bad("bad features field".into()));
        }
        let pf = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| bad("bad features field".into())) };
        let feature_config = FeatureConfig {
            frame_length: pf(0)?,
            frame_hop: pf(1)?,
            pre_emphasis: pf(2)?,
            mel_filters: pf(3)? as usize,
            cepstra: pf(4)? as usize,
            delta_window: pf(5)? as usize,
            sample_rate: pf(6)? as u32,
            low_freq: pf(7)?,
        };
        let class_map = match get("class_map")?.as_str() {
            "none" => None,
            name => {
                let inv: BTreeSet<Phone> = inventory.iter().cloned().collect();
                Some(PhoneClassMap::parse(name, &class_lines.join("\n"), &inv)?)
            }
        };

        let mut r = BinReader { bytes, pos };
        let mut hmms = BTreeMap::new();
        for _ in 0..num("hmms")? {
            let key = ModelKey::decode(&r.str()?)?;
            let n_states = r.u32()?;
            let mut states = Vec::with_capacity(n_states);
            for _ in 0..n_states {
                let self_loop = r.f64()?;
                let occupancy = r.f64()?;
                let k = r.u32()?;
                let weights = r.f64s(k)?;
                let means = (0..k).map(|_| r.f64s(dims)).collect::<Result<Vec<_>>>()?;
                let vars = (0..k).map(|_| r.f64s(dims)).collect::<Result<Vec<_>>>()?;
                states.push(HmmState {
                    gmm: DiagGmm::new(weights, means, vars)?,
                    self_loop,
                    occupancy,
                });
            }
            hmms.insert(key, HmmPhoneModel { states });
        }
        let lda = match get("lda")?.as_str() {
            "none" => None,
            shape => {
                let (o, i) = shape.split_once('x').ok_or_else(|| bad("bad lda shape".into()))?;
                let o: usize = o.parse().map_err(|_| bad("bad lda shape".into()))?;
                let i: usize = i.parse().map_err(|_| bad("bad lda shape".into()))?;
                let splice = r.u32()?;
                let data = r.f64s(o * i)?;
                let eigenvalues = r.f64s(o)?;
                Some(LdaTransform {
                    matrix: DMatrix::from_row_slice(o, i, &data),
                    splice,
                    eigenvalues,
                })
            }
        };
        let mut speaker_transforms = BTreeMap::new();
        for _ in 0..num("speakers")? {
            let speaker_id = r.str()?;
            let d = r.u32()?;
            let scale = r.f64s(d)?;
            let offset = r.f64s(d)?;
            speaker_transforms.insert(
                speaker_id.clone(),
                SpeakerTransform {
                    speaker_id,
                    scale,
                    offset,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after parameter blocks".into()));
        }
        Ok(Self {
            stage,
            feature_config,
            dims,
            inventory,
            class_map,
            hmms,
            lda,
            speaker_transforms,
            schedule_label: get("schedule")?.clone(),
        })
    }
}

const MAGIC: &str = "ALIGNLAB-MODEL 1";
const END_HEADER: &str = "end_header";

struct BinWriter(Vec<u8>);

impl BinWriter {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct BinReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BinReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ModelFormat("truncated parameter block".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::ModelFormat("key is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_encoding_round_trip() {
        for k in [
            ModelKey::Silence,
            ModelKey::Mono("aː".into()),
            ModelKey::Tri(ContextKey {
                left: Ctx::UtteranceBoundary,
                center: "b".into(),
                right: Ctx::Class(3),
            }),
            ModelKey::Tri(ContextKey {
                left: Ctx::Class(0),
                center: "ɖ".into(),
                right: Ctx::WordBoundary,
            }),
        ] {
            assert_eq!(ModelKey::decode(&k.encode()).unwrap(), k);
        }
    }

    #[test]
    fn transform_jacobian() {
        let mut t = SpeakerTransform::identity("s", 2);
        assert!(t.is_identity());
        assert_eq!(t.log_det(), 0.0);
        t.scale = vec![2.0, 0.5];
        assert!(t.log_det().abs() < 1e-15);
    }
}
