//! Audio and annotation transforms for building augmented training corpora.
//!
//! Annotation-neutral transforms (filters, resampling, pitch, gain, noise
//! gating, codec) leave tier times untouched. `shift` moves boundaries only;
//! `speed_change` rescales audio and annotation together.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{read_wav, write_wav, AudioClip};
use crate::corpus::{Corpus, Provenance, Utterance};
use crate::dsp::{butterworth_lowpass, filtfilt, hann, resample, resample_rate, Stft};
use crate::error::{Error, Result};
use crate::textgrid::{Interval, Tier};

pub const DEFAULT_SHELF_HZ: f64 = 250.0;
pub const CODEC_OUTPUT_RATE: u32 = 16_000;

/// Fraction of clamped samples above which a transform logs a warning.
pub const CLAMP_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub clip: AudioClip,
    pub clamped: usize,
}

fn finish(samples: Vec<f64>, sample_rate: u32, what: &str) -> Result<Transformed> {
    let raw = AudioClip::new(samples, sample_rate)?;
    let (clip, clamped) = raw.clamped();
    if clamped as f64 > CLAMP_WARN_FRACTION * clip.len().max(1) as f64 {
        log::warn!("{what}: clamped {clamped} of {} samples", clip.len());
    }
    Ok(Transformed { clip, clamped })
}

/// Low shelf: `x + (factor - 1) * lowpass(x)` with a zero-phase 2nd-order
/// Butterworth at `shelf_hz`, so the gain is `factor` well below the shelf
/// and unity well above it.
pub fn bass_boost(clip: &AudioClip, factor: f64, shelf_hz: f64) -> Result<Transformed> {
    if !(factor > 0.0) {
        return Err(Error::InvalidParameter(format!("bass boost factor {factor}")));
    }
    let nyquist = clip.sample_rate() as f64 / 2.0;
    if !(shelf_hz > 0.0 && shelf_hz < nyquist) {
        return Err(Error::InvalidParameter(format!("shelf {shelf_hz} Hz outside (0, {nyquist})")));
    }
    let x = clip.samples();
    let low = filtfilt(&butterworth_lowpass(2, shelf_hz, clip.sample_rate() as f64), x);
    let y = x.iter().zip(&low).map(|(a, l)| a + (factor - 1.0) * l).collect();
    finish(y, clip.sample_rate(), "bass_boost")
}

/// 4th-order Butterworth, applied forward and backward.
pub fn low_pass(clip: &AudioClip, cutoff_hz: f64) -> Result<Transformed> {
    let nyquist = clip.sample_rate() as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "cutoff {cutoff_hz} Hz must be below Nyquist {nyquist} Hz"
        )));
    }
    let y = filtfilt(&butterworth_lowpass(4, cutoff_hz, clip.sample_rate() as f64), clip.samples());
    finish(y, clip.sample_rate(), "low_pass")
}

pub fn downsample(clip: &AudioClip, target_rate: u32) -> Result<Transformed> {
    if target_rate == 0 || target_rate >= clip.sample_rate() {
        return Err(Error::InvalidParameter(format!(
            "target rate {target_rate} must be below source rate {}",
            clip.sample_rate()
        )));
    }
    let y = resample_rate(clip.samples(), clip.sample_rate(), target_rate);
    finish(y, target_rate, "downsample")
}

pub fn scale_intensity(clip: &AudioClip, factor: f64) -> Result<Transformed> {
    if !(factor > 0.0) {
        return Err(Error::InvalidParameter(format!("intensity factor {factor}")));
    }
    let y = clip.samples().iter().map(|s| s * factor).collect();
    finish(y, clip.sample_rate(), "scale_intensity")
}

/// Waveform-similarity overlap-add time stretch to exactly `n_out` samples.
fn wsola(x: &[f64], n_out: usize, sample_rate: u32) -> Vec<f64> {
    let frame = ((0.040 * sample_rate as f64) as usize).max(16) & !1;
    let hop_out = frame / 2;
    let tolerance = frame / 4;
    let alpha = n_out as f64 / x.len().max(1) as f64;
    let hop_in = hop_out as f64 / alpha;
    let window = hann(frame);

    // Input padded so every candidate read is in range.
    let lead = frame / 2 + tolerance;
    let mut padded = vec![0.0; lead];
    padded.extend_from_slice(x);
    padded.extend(std::iter::repeat(0.0).take(2 * frame + tolerance));
    let get = |start: usize, len: usize| &padded[start..(start + len).min(padded.len())];

    let frames = n_out / hop_out + 2;
    let mut out = vec![0.0; (frames + 1) * hop_out + frame];
    let mut prev: Option<usize> = None;
    for k in 0..frames {
        let nominal = (k as f64 * hop_in).round() as usize + tolerance;
        let start = match prev {
            None => nominal,
            Some(p) => {
                let target = get(p + hop_out, frame);
                let lo = nominal.saturating_sub(tolerance);
                let hi = (nominal + tolerance).min(padded.len().saturating_sub(frame));
                let mut best = (f64::NEG_INFINITY, nominal.min(hi));
                for cand in lo..=hi {
                    let seg = get(cand, frame);
                    let score: f64 = seg.iter().zip(target).step_by(2).map(|(a, b)| a * b).sum();
                    if score > best.0 {
                        best = (score, cand);
                    }
                }
                best.1
            }
        };
        let seg = get(start, frame);
        let at = k * hop_out;
        for (i, (&s, &w)) in seg.iter().zip(&window).enumerate() {
            out[at + i] += s * w;
        }
        prev = Some(start);
    }
    out[frame / 2..frame / 2 + n_out].to_vec()
}

/// Pitch scaled by `factor`, duration preserved: resample by `1/factor`,
/// then time-stretch back with WSOLA.
pub fn change_pitch(clip: &AudioClip, factor: f64) -> Result<Transformed> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(Error::InvalidParameter(format!("pitch factor {factor} outside [0.5, 2]")));
    }
    if factor == 1.0 {
        return Ok(Transformed {
            clip: clip.clone(),
            clamped: 0,
        });
    }
    let n = clip.len();
    let ratio = 1.0 / factor;
    let compressed = resample(clip.samples(), ratio, (n as f64 * ratio).round() as usize);
    let y = wsola(&compressed, n, clip.sample_rate());
    finish(y, clip.sample_rate(), "change_pitch")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGate {
    /// Bins below `threshold * floor` are attenuated.
    pub threshold: f64,
    pub attenuation_db: f64,
    /// Fraction of lowest-energy frames used to estimate the floor.
    pub quiet_fraction: f64,
    /// Median window across frequency applied to the floor, so narrowband
    /// tones present in quiet frames are not mistaken for noise.
    pub smoothing_bins: usize,
    pub fft_len: usize,
    pub hop: usize,
}

impl Default for NoiseGate {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            attenuation_db: 30.0,
            quiet_fraction: 0.1,
            smoothing_bins: 15,
            fft_len: 512,
            hop: 128,
        }
    }
}

fn median_smooth(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            let mut w: Vec<f64> = x[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            w[w.len() / 2]
        })
        .collect()
}

/// Stationary spectral gating.
pub fn reduce_noise(clip: &AudioClip, gate: &NoiseGate) -> Result<Transformed> {
    if clip.len() < gate.fft_len + gate.hop {
        return Err(Error::TooShort(format!(
            "noise reduction needs at least {} samples, got {}",
            gate.fft_len + gate.hop,
            clip.len()
        )));
    }
    let stft = Stft::new(gate.fft_len, gate.hop);
    let mut spec = stft.analyze(clip.samples());
    let bins = gate.fft_len / 2 + 1;

    let energy: Vec<f64> = spec
        .iter()
        .map(|f| f.iter().map(|c| c.norm_sqr()).sum())
        .collect();
    let mut order: Vec<usize> = (0..spec.len()).collect();
    order.sort_by(|&a, &b| energy[a].total_cmp(&energy[b]).then(a.cmp(&b)));
    let quiet = ((spec.len() as f64 * gate.quiet_fraction).ceil() as usize).clamp(1, spec.len());
    let mut floor = vec![0.0; bins];
    for &f in &order[..quiet] {
        for (acc, c) in floor.iter_mut().zip(&spec[f]) {
            *acc += c.norm();
        }
    }
    for v in &mut floor {
        *v /= quiet as f64;
    }
    let floor = median_smooth(&floor, gate.smoothing_bins.max(1));

    let atten = 10f64.powf(-gate.attenuation_db / 20.0);
    for frame in &mut spec {
        for (c, &fl) in frame.iter_mut().zip(&floor) {
            if c.norm() < gate.threshold * fl {
                *c *= atten;
            }
        }
    }
    let y = stft.synthesize(&spec, clip.len());
    finish(y, clip.sample_rate(), "reduce_noise")
}

/// External encode/decode command templates with `{in}` / `{out}` placeholders,
/// run through `sh -c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecHook {
    pub encode: String,
    pub decode: String,
    /// Extension of the intermediate compressed file.
    pub extension: String,
}

fn run_template(template: &str, input: &Path, output: &Path) -> Result<()> {
    let cmd = template
        .replace("{in}", &input.to_string_lossy())
        .replace("{out}", &output.to_string_lossy());
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::io(format!("spawn {cmd:?}"), e))?;
    if !out.status.success() {
        return Err(Error::CodecHook {
            status: out.status.to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_owned(),
        });
    }
    Ok(())
}

/// Spectral cutoff of the built-in lossy approximation; monotone in bitrate.
pub fn codec_cutoff_hz(bitrate_kbps: u32) -> f64 {
    (2000.0 + 40.0 * bitrate_kbps as f64).min(7600.0)
}

pub fn codec_roundtrip(
    clip: &AudioClip,
    bitrate_kbps: u32,
    hook: Option<&CodecHook>,
    seed: u64,
) -> Result<Transformed> {
    let expected = (clip.duration() * CODEC_OUTPUT_RATE as f64).round() as usize;
    let mut y = match hook {
        Some(hook) => {
            let dir = tempfile::tempdir().map_err(|e| Error::io("create temp dir", e))?;
            let wav_in = dir.path().join("in.wav");
            let packed = dir.path().join(format!("packed.{}", hook.extension));
            let wav_out = dir.path().join("out.wav");
            write_wav(clip, &wav_in)?;
            run_template(&hook.encode, &wav_in, &packed)?;
            run_template(&hook.decode, &packed, &wav_out)?;
            let decoded = read_wav(&wav_out)?;
            resample_rate(decoded.samples(), decoded.sample_rate(), CODEC_OUTPUT_RATE)
        }
        None => {
            let mut x = resample_rate(clip.samples(), clip.sample_rate(), CODEC_OUTPUT_RATE);
            let n = x.len();
            let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(n).process(&mut buf);
            let cutoff_bin =
                (codec_cutoff_hz(bitrate_kbps) / CODEC_OUTPUT_RATE as f64 * n as f64).floor() as usize;
            for k in 0..n {
                let freq_bin = k.min(n - k);
                if freq_bin > cutoff_bin {
                    buf[k] = Complex64::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lsb = 1.0 / 32768.0;
            for (v, c) in x.iter_mut().zip(&buf) {
                let tpdf: f64 = rng.gen::<f64>() - rng.gen::<f64>();
                *v = ((c.re / n as f64 + tpdf * lsb) / lsb).round() * lsb;
            }
            x
        }
    };
    // Codecs pad; keep the original duration.
    y.resize(expected, 0.0);
    finish(y, CODEC_OUTPUT_RATE, "codec_roundtrip")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftIssue {
    pub tier: String,
    pub label: String,
    pub start: f64,
    pub end: f64,
}

/// Move every interior boundary by `delta`; `0` and `duration` stay fixed.
/// Intervals collapsed to non-positive length are dropped and reported.
pub fn shift_boundaries(tiers: &[Tier], delta: f64, duration: f64) -> Result<(Vec<Tier>, Vec<ShiftIssue>)> {
    if !delta.is_finite() {
        return Err(Error::InvalidParameter(format!("shift {delta}")));
    }
    let move_time = |t: f64| {
        if t <= 0.0 || t >= duration {
            t
        } else {
            (t + delta).clamp(0.0, duration)
        }
    };
    let mut issues = Vec::new();
    let mut out = Vec::with_capacity(tiers.len());
    for tier in tiers {
        let mut intervals = Vec::with_capacity(tier.intervals.len());
        for iv in &tier.intervals {
            let (start, end) = (move_time(iv.start), move_time(iv.end));
            if end <= start {
                issues.push(ShiftIssue {
                    tier: tier.name.clone(),
                    label: iv.label.clone(),
                    start,
                    end,
                });
                continue;
            }
            intervals.push(Interval::new(start, end, iv.label.clone()));
        }
        out.push(Tier {
            name: tier.name.clone(),
            kind: tier.kind,
            intervals,
        });
    }
    for t in &out {
        t.validate()?;
    }
    Ok((out, issues))
}

/// Scale durations by `factor` (pitch co-varies); annotation times scale too.
pub fn change_speed(clip: &AudioClip, tiers: &[Tier], factor: f64) -> Result<(Transformed, Vec<Tier>)> {
    if !(factor > 0.25 && factor < 4.0) {
        return Err(Error::InvalidParameter(format!("speed factor {factor} outside (0.25, 4)")));
    }
    let n_out = (clip.len() as f64 * factor).round() as usize;
    let y = resample(clip.samples(), factor, n_out);
    let audio = finish(y, clip.sample_rate(), "change_speed")?;
    let new_duration = audio.clip.duration();
    let scaled = tiers
        .iter()
        .map(|t| Tier {
            name: t.name.clone(),
            kind: t.kind,
            intervals: t
                .intervals
                .iter()
                .map(|iv| {
                    Interval::new(
                        (iv.start * factor).min(new_duration),
                        (iv.end * factor).min(new_duration),
                        iv.label.clone(),
                    )
                })
                .filter(|iv| iv.end > iv.start)
                .collect(),
        })
        .collect();
    Ok((audio, scaled))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Default,
    BassBoost { factor: f64, shelf_hz: f64 },
    Downsample { rate: u32 },
    Pitch { factor: f64 },
    Intensity { factor: f64 },
    LowPass { cutoff_hz: f64 },
    NoiseReduce(NoiseGate),
    Codec { bitrate_kbps: u32, hook: Option<CodecHook> },
    Shift { delta: f64 },
    Speed { factor: f64 },
}

impl Transform {
    pub fn kind(&self) -> &'static str {
        match self {
            Transform::Default => "default",
            Transform::BassBoost { .. } => "bassboost",
            Transform::Downsample { .. } => "downsample",
            Transform::Pitch { factor } if *factor >= 1.0 => "f0_up",
            Transform::Pitch { .. } => "f0_down",
            Transform::Intensity { .. } => "intensity_halve",
            Transform::LowPass { .. } => "lowpass",
            Transform::NoiseReduce(_) => "noisereduce",
            Transform::Codec { .. } => "codec_roundtrip",
            Transform::Shift { .. } => "shift",
            Transform::Speed { .. } => "speed_change",
        }
    }

    /// Whether the transform leaves annotation times unchanged.
    pub fn annotation_neutral(&self) -> bool {
        !matches!(self, Transform::Shift { .. } | Transform::Speed { .. })
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match self {
            Transform::BassBoost { factor, shelf_hz } if !(*factor > 0.0 && *shelf_hz > 0.0) => {
                bad(format!("bassboost factor={factor} shelf_hz={shelf_hz}"))
            }
            Transform::Pitch { factor } if !(0.5..=2.0).contains(factor) => {
                bad(format!("pitch factor {factor}"))
            }
            Transform::Intensity { factor } if !(*factor > 0.0) => bad(format!("intensity {factor}")),
            Transform::LowPass { cutoff_hz } if !(*cutoff_hz > 0.0) => bad(format!("cutoff {cutoff_hz}")),
            Transform::Shift { delta } if !delta.is_finite() => bad(format!("shift {delta}")),
            Transform::Speed { factor } if !(*factor > 0.0 && *factor <= 4.0) => {
                bad(format!("speed factor {factor} outside (0, 4]"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Default => write!(f, "default"),
            Transform::BassBoost { factor, shelf_hz } => {
                write!(f, "bassboost factor={factor} shelf_hz={shelf_hz}")
            }
            Transform::Downsample { rate } => write!(f, "downsample rate={rate}"),
            Transform::Pitch { factor } => write!(f, "{} factor={factor}", self.kind()),
            Transform::Intensity { factor } => write!(f, "intensity_halve factor={factor}"),
            Transform::LowPass { cutoff_hz } => write!(f, "lowpass cutoff={cutoff_hz}"),
            Transform::NoiseReduce(g) => write!(
                f,
                "noisereduce threshold={} attenuation_db={}",
                g.threshold, g.attenuation_db
            ),
            Transform::Codec { bitrate_kbps, hook } => {
                write!(f, "codec_roundtrip bitrate={bitrate_kbps}k")?;
                if hook.is_some() {
                    write!(f, " (external)")?;
                }
                Ok(())
            }
            Transform::Shift { delta } => write!(f, "shift delta={delta}"),
            Transform::Speed { factor } => write!(f, "speed_change factor={factor}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub transform: Transform,
    pub tag: String,
    /// Dither seed for the built-in codec; mixed with the utterance id.
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn new(transform: Transform, tag: impl Into<String>) -> Result<Self> {
        transform.validate()?;
        Ok(Self {
            transform,
            tag: tag.into(),
            seed: 0,
        })
    }

    pub fn kind(&self) -> &'static str {
        self.transform.kind()
    }

    pub fn apply(&self, utt: &Utterance) -> Result<Utterance> {
        let clip = utt.audio.as_ref();
        let tiers: Vec<Tier> = std::iter::once(utt.word_tier.clone())
            .chain(utt.phone_tier.clone())
            .collect();
        let (audio, tiers) = match &self.transform {
            Transform::Default => (clip.clone(), tiers),
            Transform::BassBoost { factor, shelf_hz } => {
                (bass_boost(clip, *factor, *shelf_hz)?.clip, tiers)
            }
            Transform::Downsample { rate } => (downsample(clip, *rate)?.clip, tiers),
            Transform::Pitch { factor } => (change_pitch(clip, *factor)?.clip, tiers),
            Transform::Intensity { factor } => (scale_intensity(clip, *factor)?.clip, tiers),
            Transform::LowPass { cutoff_hz } => (low_pass(clip, *cutoff_hz)?.clip, tiers),
            Transform::NoiseReduce(gate) => (reduce_noise(clip, gate)?.clip, tiers),
            Transform::Codec { bitrate_kbps, hook } => {
                let seed = self.seed ^ stable_hash(&utt.id);
                (codec_roundtrip(clip, *bitrate_kbps, hook.as_ref(), seed)?.clip, tiers)
            }
            Transform::Shift { delta } => {
                let (tiers, issues) = shift_boundaries(&tiers, *delta, clip.duration())?;
                if !issues.is_empty() {
                    log::warn!("{}: shift merged {} interval(s)", utt.id, issues.len());
                }
                (clip.clone(), tiers)
            }
            Transform::Speed { factor } => {
                let (out, tiers) = change_speed(clip, &tiers, *factor)?;
                (out.clip, tiers)
            }
        };
        let mut tiers = tiers.into_iter();
        let word_tier = tiers.next().expect("word tier");
        let phone_tier = tiers.next();
        let mut out = Utterance::new(
            format!("{}__{}", utt.id, self.tag),
            audio,
            word_tier,
            phone_tier,
            utt.speaker_id.clone(),
            utt.language_id.clone(),
        )?;
        out.provenance = Some(Provenance {
            tag: self.tag.clone(),
            description: self.transform.to_string(),
        });
        Ok(out)
    }
}

pub(crate) fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// The four retained transforms: bass boost ×2, 4 kHz low-pass, 128k codec,
/// and a 20% slow-down (durations ×1.25).
pub fn retained_preset() -> Vec<AugmentationSpec> {
    vec![
        AugmentationSpec::new(
            Transform::BassBoost {
                factor: 2.0,
                shelf_hz: DEFAULT_SHELF_HZ,
            },
            "bassboost",
        ),
        AugmentationSpec::new(Transform::LowPass { cutoff_hz: 4000.0 }, "lowpass4000"),
        AugmentationSpec::new(
            Transform::Codec {
                bitrate_kbps: 128,
                hook: None,
            },
            "mp3_128k",
        ),
        AugmentationSpec::new(Transform::Speed { factor: 1.25 }, "slow125"),
    ]
    .into_iter()
    .collect::<Result<_>>()
    .expect("preset parameters are valid")
}

/// Every transform in the full manipulation table.
pub fn full_table_preset() -> Vec<AugmentationSpec> {
    let specs = [
        (Transform::Default, "default"),
        (
            Transform::BassBoost {
                factor: 2.0,
                shelf_hz: DEFAULT_SHELF_HZ,
            },
            "bassboost",
        ),
        (Transform::Downsample { rate: 8000 }, "downsample8k"),
        (Transform::Pitch { factor: 1.2 }, "f0up20"),
        (Transform::Pitch { factor: 0.8 }, "f0down20"),
        (Transform::Intensity { factor: 0.5 }, "intensityhalf"),
        (Transform::LowPass { cutoff_hz: 4000.0 }, "lowpass4000"),
        (Transform::NoiseReduce(NoiseGate::default()), "noisereduce"),
        (
            Transform::Codec {
                bitrate_kbps: 128,
                hook: None,
            },
            "mp3_128k",
        ),
        (
            Transform::Codec {
                bitrate_kbps: 64,
                hook: None,
            },
            "mp3_64k",
        ),
        (Transform::Shift { delta: 0.005 }, "shift5ms"),
        (Transform::Speed { factor: 0.8 }, "fast080"),
        (Transform::Speed { factor: 1.2 }, "slow120"),
    ];
    specs
        .into_iter()
        .map(|(t, tag)| AugmentationSpec::new(t, tag).expect("preset parameters are valid"))
        .collect()
}

pub fn preset(name: &str) -> Result<Vec<AugmentationSpec>> {
    match name {
        "retained" => Ok(retained_preset()),
        "full-table" => Ok(full_table_preset()),
        other => Err(Error::InvalidParameter(format!("unknown preset {other:?}"))),
    }
}

fn split_fields(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut any = false;
    for c in line.chars() {
        match c {
            '"' => {
                quoted = !quoted;
                any = true;
            }
            c if c.is_whitespace() && !quoted => {
                if any {
                    fields.push(std::mem::take(&mut cur));
                    any = false;
                }
            }
            c => {
                cur.push(c);
                any = true;
            }
        }
    }
    if quoted {
        return Err(Error::InvalidParameter(format!("unbalanced quote in {line:?}")));
    }
    if any {
        fields.push(cur);
    }
    Ok(fields)
}

/// Parse a spec file: one `kind key=value ...` line per transform. Values
/// containing spaces may be double-quoted (codec hook templates).
pub fn parse_spec_file(text: &str) -> Result<Vec<AugmentationSpec>> {
    let mut specs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = split_fields(line)?;
        let kind = fields[0].as_str();
        let mut params = std::collections::BTreeMap::new();
        for f in &fields[1..] {
            let (k, v) = f.split_once('=').ok_or_else(|| {
                Error::InvalidParameter(format!("line {}: expected key=value, got {f:?}", n + 1))
            })?;
            params.insert(k.to_owned(), v.to_owned());
        }
        let num = |key: &str, default: f64| -> Result<f64> {
            match params.get(key) {
                None => Ok(default),
                Some(v) => v.trim_end_matches(['k', 's']).parse::<f64>().map_err(|_| {
                    Error::InvalidParameter(format!("line {}: {key}={v:?} is not a number", n + 1))
                }),
            }
        };
        let transform = match kind {
            "default" => Transform::Default,
            "bassboost" => Transform::BassBoost {
                factor: num("factor", 2.0)?,
                shelf_hz: num("shelf_hz", DEFAULT_SHELF_HZ)?,
            },
            "downsample" => Transform::Downsample {
                rate: num("rate", 8000.0)? as u32,
            },
            "f0_up" => Transform::Pitch {
                factor: num("factor", 1.2)?,
            },
            "f0_down" => Transform::Pitch {
                factor: num("factor", 0.8)?,
            },
            "intensity_halve" | "intensity" => Transform::Intensity {
                factor: num("factor", 0.5)?,
            },
            "lowpass" => Transform::LowPass {
                cutoff_hz: num("cutoff", 4000.0)?,
            },
            "noisereduce" => {
                let d = NoiseGate::default();
                Transform::NoiseReduce(NoiseGate {
                    threshold: num("threshold", d.threshold)?,
                    attenuation_db: num("attenuation_db", d.attenuation_db)?,
                    ..d
                })
            }
            "codec_roundtrip" | "codec" => {
                let hook = match (params.get("encode"), params.get("decode")) {
                    (Some(e), Some(d)) => Some(CodecHook {
                        encode: e.clone(),
                        decode: d.clone(),
                        extension: params.get("ext").cloned().unwrap_or_else(|| "mp3".into()),
                    }),
                    (None, None) => None,
                    _ => {
                        return Err(Error::InvalidParameter(format!(
                            "line {}: codec hook needs both encode= and decode=",
                            n + 1
                        )))
                    }
                };
                Transform::Codec {
                    bitrate_kbps: num("bitrate", 128.0)? as u32,
                    hook,
                }
            }
            "shift" => Transform::Shift {
                delta: num("delta", 0.005)?,
            },
            "speed_change" | "speed" => Transform::Speed {
                factor: num("factor", 1.25)?,
            },
            other => {
                return Err(Error::InvalidParameter(format!(
                    "line {}: unknown augmentation kind {other:?}",
                    n + 1
                )))
            }
        };
        let tag = params
            .get("tag")
            .cloned()
            .unwrap_or_else(|| transform.kind().to_owned());
        let mut spec = AugmentationSpec::new(transform, tag)?;
        spec.seed = num("seed", 0.0)? as u64;
        specs.push(spec);
    }
    Ok(specs)
}

/// Originals plus one tagged copy of every utterance per spec, ordered by
/// utterance then spec.
pub fn build_augmented_dataset(corpus: &Corpus, specs: &[AugmentationSpec]) -> Result<Corpus> {
    if specs.is_empty() {
        return Err(Error::InvalidParameter("no augmentation specs given".into()));
    }
    let mut tags = HashSet::new();
    for s in specs {
        if !tags.insert(s.tag.as_str()) {
            return Err(Error::DuplicateTag(s.tag.clone()));
        }
    }
    let groups: Vec<Result<Vec<Utterance>>> = corpus
        .utterances
        .par_iter()
        .map(|utt| {
            let mut group = vec![utt.clone()];
            for spec in specs {
                group.push(spec.apply(utt)?);
            }
            Ok(group)
        })
        .collect();
    let mut utterances = Vec::with_capacity(corpus.len() * (specs.len() + 1));
    for g in groups {
        utterances.extend(g?);
    }
    Corpus::new(format!("Aug{}", corpus.name), utterances)
}

/// Shared handle type for clips that augmentation reuses unchanged.
pub type SharedClip = Arc<AudioClip>;

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, amp: f64, seconds: f64, rate: u32) -> AudioClip {
        let n = (seconds * rate as f64) as usize;
        AudioClip::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn intensity_halving() {
        let clip = AudioClip::new(vec![0.5, -0.2, 0.0], 16000).unwrap();
        let out = scale_intensity(&clip, 0.5).unwrap().clip;
        assert_eq!(out.samples(), &[0.25, -0.1, 0.0]);
        let silence = AudioClip::silence(0.1, 16000).unwrap();
        assert_eq!(scale_intensity(&silence, 0.5).unwrap().clip, silence);
    }

    #[test]
    fn bass_boost_identity_at_unity() {
        let clip = tone(300.0, 0.3, 0.5, 16000);
        let out = bass_boost(&clip, 1.0, 250.0).unwrap().clip;
        for (a, b) in clip.samples().iter().zip(out.samples()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn lowpass_rejects_cutoff_at_nyquist() {
        let clip = tone(100.0, 0.1, 0.1, 8000);
        assert!(low_pass(&clip, 4000.0).is_err());
        let silence = AudioClip::silence(0.2, 16000).unwrap();
        assert!(low_pass(&silence, 4000.0).unwrap().clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn downsample_length() {
        let clip = AudioClip::silence(1.0, 16000).unwrap();
        let out = downsample(&clip, 8000).unwrap().clip;
        assert_eq!(out.sample_rate(), 8000);
        assert!((out.len() as i64 - 8000).abs() <= 1);
        assert!(downsample(&clip, 16000).is_err());
    }

    #[test]
    fn speed_identity_and_scaling() {
        let clip = tone(440.0, 0.5, 1.0, 16000);
        let tier = Tier::new("phones", vec![Interval::new(0.25, 0.5, "a")]).unwrap();
        let (out, tiers) = change_speed(&clip, &[tier.clone()], 1.0).unwrap();
        assert_eq!(tiers[0], tier);
        for (a, b) in clip.samples().iter().zip(out.clip.samples()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let long = AudioClip::silence(10.0, 16000).unwrap();
        let (out, _) = change_speed(&long, &[], 1.25).unwrap();
        assert_eq!(out.clip.duration(), 12.5);
    }

    #[test]
    fn shift_examples() {
        let tier = Tier::new(
            "phones",
            vec![
                Interval::new(0.0, 1.0, "a"),
                Interval::new(1.0, 1.003, "b"),
                Interval::new(1.003, 2.0, "c"),
            ],
        )
        .unwrap();
        let (out, issues) = shift_boundaries(&[tier], 0.005, 2.0).unwrap();
        assert!(issues.is_empty());
        let ivs = &out[0].intervals;
        assert_eq!(ivs[0].start, 0.0);
        assert!((ivs[0].end - 1.005).abs() < 1e-12);
        assert!((ivs[1].end - 1.008).abs() < 1e-12);
        assert_eq!(ivs[2].end, 2.0);
    }

    #[test]
    fn shift_collapse_is_reported() {
        let tier = Tier::new(
            "phones",
            vec![Interval::new(0.0, 0.998, "a"), Interval::new(0.998, 1.0, "b")],
        )
        .unwrap();
        let (out, issues) = shift_boundaries(&[tier], 0.005, 1.0).unwrap();
        assert_eq!(issues.len(), 1);
        assert_eq!(out[0].intervals, vec![Interval::new(0.0, 1.0, "a")]);
    }

    #[test]
    fn codec_contract() {
        let clip = tone(500.0, 0.3, 10.0, 22050);
        let out = codec_roundtrip(&clip, 128, None, 1).unwrap().clip;
        assert_eq!(out.sample_rate(), 16000);
        assert!((out.duration() - 10.0).abs() <= 0.025);
        assert!(codec_cutoff_hz(64) < codec_cutoff_hz(128));
    }

    #[test]
    fn codec_hook_passthrough() {
        let clip = tone(500.0, 0.3, 0.5, 16000);
        let hook = CodecHook {
            encode: "cp {in} {out}".into(),
            decode: "cp {in} {out}".into(),
            extension: "wav".into(),
        };
        let out = codec_roundtrip(&clip, 128, Some(&hook), 0).unwrap().clip;
        assert_eq!(out.len(), clip.len());
        let failing = CodecHook {
            encode: "echo nope >&2; exit 3".into(),
            decode: "true".into(),
            extension: "mp3".into(),
        };
        match codec_roundtrip(&clip, 128, Some(&failing), 0) {
            Err(Error::CodecHook { stderr, .. }) => assert_eq!(stderr, "nope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noise_reduce_silence_and_short_clip() {
        let silence = AudioClip::silence(0.5, 16000).unwrap();
        let out = reduce_noise(&silence, &NoiseGate::default()).unwrap().clip;
        assert!(out.samples().iter().all(|&s| s == 0.0));
        let short = AudioClip::silence(0.01, 16000).unwrap();
        assert!(matches!(reduce_noise(&short, &NoiseGate::default()), Err(Error::TooShort(_))));
    }

    #[test]
    fn spec_file() {
        let text = "# retained four\nbassboost factor=2\nlowpass cutoff=4000\ncodec_roundtrip bitrate=128k tag=mp3\nspeed_change factor=1.25\ncodec bitrate=64k encode=\"lame -b 64 {in} {out}\" decode=\"lame --decode {in} {out}\" tag=real\n";
        let specs = parse_spec_file(text).unwrap();
        assert_eq!(specs.len(), 5);
        assert_eq!(specs[2].tag, "mp3");
        assert_eq!(specs[0].kind(), "bassboost");
        match &specs[4].transform {
            Transform::Codec { bitrate_kbps: 64, hook: Some(h) } => {
                assert_eq!(h.encode, "lame -b 64 {in} {out}")
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_spec_file("speed factor=9\n").is_err());
        assert!(parse_spec_file("wobble\n").is_err());
    }

    #[test]
    fn presets() {
        let p = retained_preset();
        let kinds: Vec<_> = p.iter().map(|s| s.kind()).collect();
        assert_eq!(kinds, vec!["bassboost", "lowpass", "codec_roundtrip", "speed_change"]);
        assert_eq!(full_table_preset().len(), 13);
    }
}
