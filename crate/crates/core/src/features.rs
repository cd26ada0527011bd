//! MFCC front end, per-speaker CMVN, splicing and LDA.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::AudioClip;
use crate::corpus::Corpus;
use crate::dsp::{hamming, resample_rate};
use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const LDA_RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub frame_length: f64,
    pub frame_hop: f64,
    pub pre_emphasis: f64,
    pub mel_filters: usize,
    pub cepstra: usize,
    pub delta_window: usize,
    pub sample_rate: u32,
    pub low_freq: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_length: 0.025,
            frame_hop: 0.010,
            pre_emphasis: 0.97,
            mel_filters: 23,
            cepstra: 13,
            delta_window: 2,
            sample_rate: 16_000,
            low_freq: 20.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_hop > 0.0 && self.frame_hop <= self.frame_length) {
            return Err(Error::InvalidParameter(format!(
                "frame hop {} must be in (0, frame length {}]",
                self.frame_hop, self.frame_length
            )));
        }
        if self.cepstra == 0 || self.cepstra > self.mel_filters {
            return Err(Error::InvalidParameter(format!(
                "cepstra {} must be in 1..={}",
                self.cepstra, self.mel_filters
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.frame_length * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.frame_hop * self.sample_rate as f64).round() as usize
    }

    /// Time of the boundary between frames `k - 1` and `k` is
    /// `origin + k * hop`: midway between the two frame centres.
    pub fn origin(&self) -> f64 {
        (self.frame_length - self.frame_hop) / 2.0
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        let w = self.window_samples();
        if samples < w {
            0
        } else {
            1 + (samples - w) / self.hop_samples()
        }
    }
}

/// Row-major frames × dims matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    dims: usize,
    pub hop: f64,
    pub origin: f64,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, frames: usize, dims: usize, hop: f64, origin: f64) -> Result<Self> {
        if data.len() != frames * dims {
            return Err(Error::DimensionMismatch {
                expected: frames * dims,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite feature at frame {} dim {}",
                i / dims.max(1),
                i % dims.max(1)
            )));
        }
        Ok(Self {
            data,
            frames,
            dims,
            hop,
            origin,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], hop: f64, origin: f64) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dims);
        for r in rows {
            if r.len() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, rows.len(), dims, hop, origin)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dims.max(1)).take(self.frames)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Boundary time before frame `k`.
    pub fn boundary_time(&self, k: usize) -> f64 {
        self.origin + k as f64 * self.hop
    }

    fn with_data(&self, data: Vec<f64>, dims: usize) -> Self {
        Self {
            frames: self.frames,
            dims,
            data,
            hop: self.hop,
            origin: self.origin,
        }
    }

    /// Column concatenation of two matrices with equal frame counts.
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<Self> {
        if self.frames != other.frames {
            return Err(Error::DimensionMismatch {
                expected: self.frames,
                got: other.frames,
            });
        }
        let dims = self.dims + other.dims;
        let mut data = Vec::with_capacity(self.frames * dims);
        for t in 0..self.frames {
            data.extend_from_slice(self.row(t));
            data.extend_from_slice(other.row(t));
        }
        Ok(self.with_data(data, dims))
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel axis; returns `(first_bin, weights)` per filter.
pub fn mel_filterbank(config: &FeatureConfig, fft_len: usize) -> Vec<(usize, Vec<f64>)> {
    let sr = config.sample_rate as f64;
    let lo = hz_to_mel(config.low_freq);
    let hi = hz_to_mel(sr / 2.0);
    let m = config.mel_filters;
    let edges: Vec<f64> = (0..m + 2).map(|i| lo + (hi - lo) * i as f64 / (m + 1) as f64).collect();
    (0..m)
        .map(|j| {
            let (left, centre, right) = (edges[j], edges[j + 1], edges[j + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..=fft_len / 2 {
                let mel = hz_to_mel(k as f64 * sr / fft_len as f64);
                let w = if mel > left && mel <= centre {
                    (mel - left) / (centre - left)
                } else if mel > centre && mel < right {
                    (right - mel) / (right - centre)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            (first.unwrap_or(0), weights)
        })
        .collect()
}

/// Centre frequency of mel filter `j` in Hz.
pub fn mel_centre_hz(config: &FeatureConfig, j: usize) -> f64 {
    let lo = hz_to_mel(config.low_freq);
    let hi = hz_to_mel(config.sample_rate as f64 / 2.0);
    mel_to_hz(lo + (hi - lo) * (j + 1) as f64 / (config.mel_filters + 1) as f64)
}

fn prepare_samples(clip: &AudioClip, config: &FeatureConfig) -> Vec<f64> {
    if clip.sample_rate() == config.sample_rate {
        clip.samples().to_vec()
    } else {
        resample_rate(clip.samples(), clip.sample_rate(), config.sample_rate)
    }
}

/// Log mel filterbank energies, one row per frame.
pub fn log_mel_energies(clip: &AudioClip, config: &FeatureConfig) -> Result<FeatureMatrix> {
    config.validate()?;
    let x = prepare_samples(clip, config);
    let win = config.window_samples();
    let hop = config.hop_samples();
    let frames = config.frame_count(x.len());
    if frames == 0 {
        return Err(Error::TooShort(format!(
            "{} samples is shorter than one {win}-sample frame",
            x.len()
        )));
    }
    let fft_len = win.next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(fft_len);
    let window = hamming(win);
    let bank = mel_filterbank(config, fft_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
    let mut power = vec![0.0; fft_len / 2 + 1];
    let mut data = Vec::with_capacity(frames * config.mel_filters);
    for f in 0..frames {
        let seg = &x[f * hop..f * hop + win];
        for b in buf.iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        for i in (0..win).rev() {
            let prev = if i == 0 { seg[0] } else { seg[i - 1] };
            buf[i] = Complex64::new((seg[i] - config.pre_emphasis * prev) * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (first, weights) in &bank {
            let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
            data.push(e.max(f64::EPSILON).ln());
        }
    }
    FeatureMatrix::new(
        data,
        frames,
        config.mel_filters,
        config.frame_hop,
        config.origin(),
    )
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(j, v)| v * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m).cos())
                .sum();
            s * if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() }
        })
        .collect()
}

/// Static cepstra only.
pub fn mfcc_static(clip: &AudioClip, config: &FeatureConfig) -> Result<FeatureMatrix> {
    let mel = log_mel_energies(clip, config)?;
    let mut data = Vec::with_capacity(mel.frames() * config.cepstra);
    for r in mel.rows() {
        data.extend(dct2(r, config.cepstra));
    }
    Ok(mel.with_data(data, config.cepstra))
}

/// Regression deltas over `±window` frames with edge replication.
pub fn deltas(fm: &FeatureMatrix, window: usize) -> FeatureMatrix {
    let n = fm.frames() as isize;
    let denom: f64 = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
    let clampi = |t: isize| t.clamp(0, n - 1) as usize;
    let mut data = Vec::with_capacity(fm.data.len());
    for t in 0..n {
        for d in 0..fm.dims() {
            let mut acc = 0.0;
            for k in 1..=window as isize {
                acc += k as f64 * (fm.row(clampi(t + k))[d] - fm.row(clampi(t - k))[d]);
            }
            data.push(acc / denom);
        }
    }
    fm.with_data(data, fm.dims())
}

/// Statics with deltas and delta-deltas appended.
pub fn add_deltas(statics: &FeatureMatrix, window: usize) -> FeatureMatrix {
    let d1 = deltas(statics, window);
    let d2 = deltas(&d1, window);
    statics
        .hstack(&d1)
        .and_then(|m| m.hstack(&d2))
        .expect("equal frame counts")
}

/// 39-dim MFCC (13 statics + deltas + delta-deltas with the default config).
pub fn mfcc(clip: &AudioClip, config: &FeatureConfig) -> Result<FeatureMatrix> {
    Ok(add_deltas(&mfcc_static(clip, config)?, config.delta_window))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStats {
    pub speaker_id: String,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

/// Per-speaker mean/variance normalization. Accumulation visits each
/// speaker's matrices in the given order, so callers pass a deterministic
/// (utterance-sorted) sequence.
pub fn cmvn(
    features: &[FeatureMatrix],
    speakers: &[String],
) -> Result<(Vec<FeatureMatrix>, BTreeMap<String, SpeakerStats>)> {
    if features.len() != speakers.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: speakers.len(),
        });
    }
    let dims = features.first().map_or(0, FeatureMatrix::dims);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (fm, s)) in features.iter().zip(speakers).enumerate() {
        if fm.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: fm.dims(),
            });
        }
        groups.entry(s.as_str()).or_default().push(i);
    }
    let mut stats = BTreeMap::new();
    for (speaker, idx) in &groups {
        let count: usize = idx.iter().map(|&i| features[i].frames()).sum();
        if count == 0 {
            return Err(Error::InvalidParameter(format!("speaker {speaker} has no frames")));
        }
        let mut mean = vec![0.0; dims];
        for &i in idx {
            for r in features[i].rows() {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; dims];
        for &i in idx {
            for r in features[i].rows() {
                for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        var.iter_mut()
            .for_each(|v| *v = (*v / count as f64).max(VARIANCE_FLOOR));
        stats.insert(
            speaker.to_string(),
            SpeakerStats {
                speaker_id: speaker.to_string(),
                mean,
                variance: var,
                count,
            },
        );
    }
    let normalized = features
        .iter()
        .zip(speakers)
        .map(|(fm, s)| {
            let st = &stats[s];
            let inv: Vec<f64> = st.variance.iter().map(|v| 1.0 / v.sqrt()).collect();
            let mut out = fm.clone();
            for t in 0..out.frames() {
                for ((x, m), k) in out.row_mut(t).iter_mut().zip(&st.mean).zip(&inv) {
                    *x = (*x - m) * k;
                }
            }
            out
        })
        .collect();
    Ok((normalized, stats))
}

/// Concatenate frames `t - context ..= t + context`, replicating edges.
pub fn splice(fm: &FeatureMatrix, context: usize) -> FeatureMatrix {
    let n = fm.frames() as isize;
    let dims = fm.dims() * (2 * context + 1);
    let mut data = Vec::with_capacity(fm.frames() * dims);
    for t in 0..n {
        for o in -(context as isize)..=context as isize {
            data.extend_from_slice(fm.row((t + o).clamp(0, n - 1) as usize));
        }
    }
    fm.with_data(data, dims)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaTransform {
    /// `out_dim × in_dim`.
    pub matrix: DMatrix<f64>,
    pub splice: usize,
    /// Generalized eigenvalues of the retained directions, descending.
    pub eigenvalues: Vec<f64>,
}

impl LdaTransform {
    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Fisher LDA on row vectors `x` with integer labels. The within-class
/// scatter gets `ridge * I` before whitening; projection rows are the top
/// generalized eigenvectors, orthonormal in the within-class metric.
pub fn estimate_lda(
    x: &[&[f64]],
    labels: &[usize],
    out_dim: usize,
    ridge: f64,
    splice_context: usize,
) -> Result<LdaTransform> {
    if x.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: labels.len(),
        });
    }
    let in_dim = x.first().map_or(0, |r| r.len());
    if x.len() <= in_dim {
        return Err(Error::Lda(format!(
            "{} frames is not more than the {in_dim} input dimensions",
            x.len()
        )));
    }
    let mut class_index: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = class_index.len();
        class_index.entry(l).or_insert(next);
    }
    let k = class_index.len();
    if k < 2 {
        return Err(Error::Lda(format!("need at least 2 classes, got {k}")));
    }
    let n = x.len() as f64;
    let mut sums = vec![DVector::<f64>::zeros(in_dim); k];
    let mut counts = vec![0usize; k];
    let mut total = DVector::<f64>::zeros(in_dim);
    for (row, l) in x.iter().zip(labels) {
        let c = class_index[l];
        let v = DVector::from_column_slice(row);
        sums[c] += &v;
        total += &v;
        counts[c] += 1;
    }
    let global = total / n;
    let means: Vec<DVector<f64>> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mut sw = DMatrix::<f64>::zeros(in_dim, in_dim);
    let mut diff = DVector::<f64>::zeros(in_dim);
    for (row, l) in x.iter().zip(labels) {
        let m = &means[class_index[l]];
        for d in 0..in_dim {
            diff[d] = row[d] - m[d];
        }
        sw.syger(1.0, &diff, &diff, 1.0);
    }
    sw /= n;
    let mut sb = DMatrix::<f64>::zeros(in_dim, in_dim);
    for (m, &c) in means.iter().zip(&counts) {
        let d = m - &global;
        sb.syger(c as f64 / n, &d, &d, 1.0);
    }
    // syger only fills the lower triangle.
    sw.fill_upper_triangle_with_lower_triangle();
    sb.fill_upper_triangle_with_lower_triangle();
    for d in 0..in_dim {
        sw[(d, d)] += ridge;
    }
    let chol = sw
        .cholesky()
        .ok_or_else(|| Error::Lda("within-class scatter is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Lda("singular Cholesky factor".into()))?;
    let mut m = &l_inv * &sb * l_inv.transpose();
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..in_dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let rank = (k - 1).min(in_dim);
    let mut out = out_dim.min(in_dim);
    if out_dim > in_dim {
        log::warn!("LDA output dimension {out_dim} reduced to input dimension {in_dim}");
    }
    if out > rank {
        log::warn!("LDA: only {k} classes, so at most {rank} discriminant directions carry information");
    }
    out = out.max(1);
    if eig.eigenvalues[order[0]] < 1e-10 {
        log::warn!("LDA: class means coincide; projection directions are arbitrary");
    }
    let mut matrix = DMatrix::<f64>::zeros(out, in_dim);
    let mut eigenvalues = Vec::with_capacity(out);
    for (r, &i) in order.iter().take(out).enumerate() {
        let v = eig.eigenvectors.column(i);
        // Deterministic sign: largest-magnitude component positive.
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let row = (v.transpose() * &l_inv) * sign;
        matrix.set_row(r, &row);
        eigenvalues.push(eig.eigenvalues[i]);
    }
    Ok(LdaTransform {
        matrix,
        splice: splice_context,
        eigenvalues,
    })
}

pub fn apply_transform(fm: &FeatureMatrix, matrix: &DMatrix<f64>) -> Result<FeatureMatrix> {
    if matrix.ncols() != fm.dims() {
        return Err(Error::DimensionMismatch {
            expected: matrix.ncols(),
            got: fm.dims(),
        });
    }
    let out = matrix.nrows();
    let mut data = Vec::with_capacity(fm.frames() * out);
    for r in fm.rows() {
        for i in 0..out {
            let mut acc = 0.0;
            for (j, v) in r.iter().enumerate() {
                acc += matrix[(i, j)] * v;
            }
            data.push(acc);
        }
    }
    Ok(fm.with_data(data, out))
}

/// Front-end output for one utterance: normalized statics (LDA input) and
/// the 39-dim delta features used by the monophone and triphone stages.
#[derive(Debug, Clone)]
pub struct UtteranceFeatures {
    pub id: String,
    pub speaker: String,
    pub statics: FeatureMatrix,
    pub full: FeatureMatrix,
}

/// Static MFCC per utterance, per-speaker CMVN over statics, then deltas.
/// Output order follows the corpus.
pub fn compute_corpus_features(corpus: &Corpus, config: &FeatureConfig) -> Result<Vec<UtteranceFeatures>> {
    config.validate()?;
    let statics: Vec<FeatureMatrix> = corpus
        .utterances
        .par_iter()
        .map(|u| {
            mfcc_static(&u.audio, config)
                .map_err(|e| Error::InvalidParameter(format!("utterance {}: {e}", u.id)))
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| corpus.utterances[a].id.cmp(&corpus.utterances[b].id));
    let sorted: Vec<FeatureMatrix> = order.iter().map(|&i| statics[i].clone()).collect();
    let speakers: Vec<String> = order
        .iter()
        .map(|&i| corpus.utterances[i].speaker_id.clone())
        .collect();
    let (normalized, _) = cmvn(&sorted, &speakers)?;
    let mut out: Vec<Option<UtteranceFeatures>> = vec![None; corpus.len()];
    for (&i, fm) in order.iter().zip(normalized) {
        let u = &corpus.utterances[i];
        out[i] = Some(UtteranceFeatures {
            id: u.id.clone(),
            speaker: u.speaker_id.clone(),
            full: add_deltas(&fm, config.delta_window),
            statics: fm,
        });
    }
    Ok(out.into_iter().map(|o| o.expect("every index filled")).collect())
}

const DUMP_MAGIC: &str = "ALIGNLAB-FEATS 1";

/// Debug dump: one text header line, then little-endian f64 rows.
pub fn write_feature_dump(path: &Path, id: &str, fm: &FeatureMatrix) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = format!(
        "{DUMP_MAGIC} id={id} frames={} dims={} hop={} origin={}\n",
        fm.frames(),
        fm.dims(),
        fm.hop,
        fm.origin
    );
    let mut bytes = header.into_bytes();
    for v in fm.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_feature_dump(path: &Path) -> Result<(String, FeatureMatrix)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |m: &str| Error::ModelFormat(format!("{}: {m}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header not UTF-8"))?;
    let rest = header.strip_prefix(DUMP_MAGIC).ok_or_else(|| bad("bad magic"))?;
    let fields: BTreeMap<&str, &str> = rest.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
    let frames: usize = get("frames")?.parse().map_err(|_| bad("frames"))?;
    let dims: usize = get("dims")?.parse().map_err(|_| bad("dims"))?;
    let hop: f64 = get("hop")?.parse().map_err(|_| bad("hop"))?;
    let origin: f64 = get("origin")?.parse().map_err(|_| bad("origin"))?;
    let body = &bytes[nl + 1..];
    if body.len() != frames * dims * 8 {
        return Err(bad("truncated body"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((get("id")?.to_owned(), FeatureMatrix::new(data, frames, dims, hop, origin)?))
}
