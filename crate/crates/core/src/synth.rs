//! Synthetic annotated corpora with exact ground-truth boundaries.
//!
//! Eight "phones" are realized as distinct harmonic or band-noise timbres;
//! speakers differ in pitch, formant scale, spectral tilt and gain.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::AudioClip;
use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::lexicon::{compile_lexicon, GraphemeMap, Lexicon, NaturalClassMap, PhoneClassMap};
use crate::textgrid::{Interval, Tier, TierKind};

pub const SYNTH_LANGUAGE: &str = "syn";
pub const SYNTH_PHONES: [&str; 8] = ["a", "i", "u", "m", "n", "s", "f", "t"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub minutes: f64,
    pub speakers: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub min_phone: f64,
    pub max_phone: f64,
    pub vocabulary: usize,
    pub words_per_utterance: (usize, usize),
    pub pause_probability: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            minutes: 10.0,
            speakers: 4,
            seed: 0,
            sample_rate: 16_000,
            min_phone: 0.080,
            max_phone: 0.300,
            vocabulary: 40,
            words_per_utterance: (3, 8),
            pause_probability: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub grapheme_map: GraphemeMap,
    pub lexicon: Lexicon,
    pub natural_classes: NaturalClassMap,
}

impl SynthCorpus {
    pub fn identity_classes(&self) -> Result<PhoneClassMap> {
        crate::lexicon::default_identity_classes(self.lexicon.inventory())
    }
}

struct Speaker {
    f0: f64,
    formant_scale: f64,
    tilt: f64,
    gain: f64,
}

fn speaker(i: usize) -> Speaker {
    const F0: [f64; 4] = [110.0, 140.0, 190.0, 230.0];
    const FS: [f64; 4] = [0.92, 1.0, 1.06, 1.12];
    const TILT: [f64; 4] = [-0.5, -0.15, 0.2, 0.5];
    const GAIN: [f64; 4] = [0.8, 1.0, 1.2, 0.9];
    let k = i % 4;
    let round = (i / 4) as f64;
    Speaker {
        f0: F0[k] * (1.0 + 0.07 * round),
        formant_scale: FS[k],
        tilt: TILT[k],
        gain: GAIN[k],
    }
}

/// Harmonics of an f0 gliding linearly by `glide` (relative) over the
/// segment; harmonic amplitudes follow Lorentzian formant peaks at the mean f0.
fn harmonic(n: usize, sr: f64, f0: f64, glide: f64, formants: &[f64], bandwidth: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let top = (sr / 2.0 - 200.0).min(5000.0);
    let mut k = 1;
    while k as f64 * f0 * (1.0 + glide.abs()) < top {
        let f = k as f64 * f0;
        let amp: f64 = formants
            .iter()
            .map(|fm| 1.0 / (1.0 + ((f - fm) / bandwidth).powi(2)))
            .sum();
        let mut phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, o) in out.iter_mut().enumerate() {
            let rel = i as f64 / n.max(1) as f64 - 0.5;
            *o += amp * phase.sin();
            phase += std::f64::consts::TAU * f * (1.0 + glide * rel) / sr;
        }
        k += 1;
    }
    out
}

fn band_noise(n: usize, sr: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = n.next_power_of_two().max(2);
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * sr / len as f64;
        if f < lo || f > hi {
            *b = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf[..n].iter().map(|c| c.re / len as f64).collect()
}

fn normalize(x: &mut [f64], rms: f64) {
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if cur > 0.0 {
        for v in x.iter_mut() {
            *v *= rms / cur;
        }
    }
}

fn render_phone(phone: &str, n: usize, sr: f64, spk: &Speaker, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = spk.f0 * rng.gen_range(0.95..1.05);
    let glide = rng.gen_range(-0.1..0.1);
    let fs = spk.formant_scale;
    let voiced = |formants: &[f64], bw: f64, rng: &mut ChaCha8Rng| {
        let f: Vec<f64> = formants.iter().map(|x| x * fs).collect();
        harmonic(n, sr, f0, glide, &f, bw, rng)
    };
    let (mut x, level) = match phone {
        "a" => (voiced(&[700.0, 1200.0], 120.0, rng), 0.20),
        "i" => (voiced(&[300.0, 2300.0], 120.0, rng), 0.18),
        "u" => (voiced(&[350.0, 800.0], 100.0, rng), 0.18),
        "m" => (voiced(&[250.0], 60.0, rng), 0.08),
        "n" => (voiced(&[450.0, 2700.0], 80.0, rng), 0.07),
        "s" => (band_noise(n, sr, 4000.0, 7500.0, rng), 0.06),
        "f" => (band_noise(n, sr, 1500.0, 3500.0, rng), 0.05),
        "t" => (band_noise(n, sr, 300.0, 7000.0, rng), 0.09),
        _ => {
            let mut x = band_noise(n, sr, 50.0, 7900.0, rng);
            normalize(&mut x, 0.002);
            return x;
        }
    };
    // Slow amplitude modulation so that no phone is perfectly stationary.
    let (fm, depth, phase) = (rng.gen_range(3.0..8.0), rng.gen_range(0.2..0.4), rng.gen_range(0.0..std::f64::consts::TAU));
    for (i, v) in x.iter_mut().enumerate() {
        *v *= 1.0 + depth * (std::f64::consts::TAU * fm * i as f64 / sr + phase).sin();
    }
    normalize(&mut x, level * rng.gen_range(0.8..1.2));
    x
}

fn build_vocabulary(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<&'static str>> {
    let mut words: Vec<Vec<&'static str>> = Vec::new();
    while words.len() < cfg.vocabulary {
        let len = rng.gen_range(2..=4);
        let mut w: Vec<&'static str> = Vec::with_capacity(len);
        while w.len() < len {
            let p = *SYNTH_PHONES.choose(rng).expect("non-empty");
            if w.last() != Some(&p) {
                w.push(p);
            }
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// A corpus of roughly `minutes` of audio with word and phone tiers.
/// Pauses are unlabeled intervals in both tiers.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if !(cfg.minutes > 0.0) || cfg.speakers == 0 || !(cfg.min_phone > 0.0 && cfg.max_phone >= cfg.min_phone) {
        return Err(Error::InvalidParameter(format!("bad synthetic corpus config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = build_vocabulary(cfg, &mut rng);
    let sr = cfg.sample_rate as f64;
    let ramp = (0.004 * sr) as usize;
    let mut utterances = Vec::new();
    let mut total = 0.0;
    let mut index = 0;
    while total < cfg.minutes * 60.0 {
        let spk_index = index % cfg.speakers;
        let spk = speaker(spk_index);
        let mut samples: Vec<f64> = Vec::new();
        let mut words: Vec<Interval> = Vec::new();
        let mut phones: Vec<Interval> = Vec::new();
        let push = |samples: &mut Vec<f64>, seg: Vec<f64>| {
            let n = seg.len();
            let start = samples.len();
            for (i, v) in seg.into_iter().enumerate() {
                let env = if i < ramp {
                    (i as f64 + 0.5) / ramp as f64
                } else if n - i <= ramp {
                    (n - i) as f64 / ramp as f64
                } else {
                    1.0
                };
                samples.push(v * env);
            }
            (start as f64 / sr, samples.len() as f64 / sr)
        };
        let silence = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let n = (rng.gen_range(lo..hi) * sr) as usize;
            render_phone("", n, sr, &spk, rng)
        };
        let lead = silence(&mut rng, 0.15, 0.4);
        push(&mut samples, lead);
        let n_words = rng.gen_range(cfg.words_per_utterance.0..=cfg.words_per_utterance.1);
        let mut last: Option<&str> = None;
        for wi in 0..n_words {
            let pause = wi > 0 && rng.gen_bool(cfg.pause_probability);
            if pause {
                let p = silence(&mut rng, 0.08, 0.25);
                push(&mut samples, p);
                last = None;
            }
            let word = loop {
                let w = vocab.choose(&mut rng).expect("vocabulary");
                if last != Some(w[0]) {
                    break w;
                }
            };
            let word_start = samples.len() as f64 / sr;
            for p in word {
                let n = (rng.gen_range(cfg.min_phone..=cfg.max_phone) * sr) as usize;
                let seg = render_phone(p, n, sr, &spk, &mut rng);
                let (s, e) = push(&mut samples, seg);
                phones.push(Interval::new(s, e, *p));
            }
            words.push(Interval::new(word_start, samples.len() as f64 / sr, word.concat()));
            last = word.last().copied();
        }
        let tail = silence(&mut rng, 0.15, 0.4);
        push(&mut samples, tail);

        // Spectral tilt, gain, and a faint noise floor shared by all segments.
        let mut prev = 0.0;
        for v in samples.iter_mut() {
            let x = *v;
            *v = spk.gain * (x + spk.tilt * prev) + 0.0005 * rng.sample::<f64, _>(StandardNormal);
            prev = x;
        }
        let clip = AudioClip::new(samples, cfg.sample_rate)?;
        let duration = clip.duration();
        let word_tier = Tier::new("words", words)?.with_kind(TierKind::Word).gap_filled(duration);
        let phone_tier = Tier::new("phones", phones)?.with_kind(TierKind::Phone).gap_filled(duration);
        total += duration;
        utterances.push(Utterance::new(
            format!("syn_s{spk_index}_{index:04}"),
            clip,
            word_tier,
            Some(phone_tier),
            format!("spk{spk_index}"),
            SYNTH_LANGUAGE,
        )?);
        index += 1;
    }
    let corpus = Corpus::new("Synthetic", utterances)?;
    let grapheme_map = GraphemeMap::new(
        SYNTH_LANGUAGE,
        SYNTH_PHONES.iter().map(|p| (p.to_string(), vec![p.to_string()])).collect(),
    )?;
    let maps: HashMap<String, GraphemeMap> = [(SYNTH_LANGUAGE.to_owned(), grapheme_map.clone())].into();
    let lexicon = compile_lexicon(std::slice::from_ref(&corpus), &maps)?;
    let natural_classes = NaturalClassMap::parse("vowel: a i u\nnasal: m n\nfricative: s f\nstop: t\n")?;
    Ok(SynthCorpus {
        corpus,
        grapheme_map,
        lexicon,
        natural_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus_is_consistent() {
        let cfg = SynthConfig {
            minutes: 0.3,
            ..Default::default()
        };
        let s = synthesize_corpus(&cfg).unwrap();
        assert!(s.corpus.total_minutes() >= 0.3);
        assert_eq!(s.corpus.speakers().len(), 4);
        for u in &s.corpus.utterances {
            let phones = u.phone_tier.as_ref().unwrap();
            for iv in phones.labeled() {
                let d = iv.duration();
                assert!(d >= 0.079 && d <= 0.301, "{d}");
            }
            for w in u.words() {
                assert!(s.lexicon.get(&w).is_some());
            }
        }
        let again = synthesize_corpus(&cfg).unwrap();
        assert_eq!(again.corpus.utterances[0].audio, s.corpus.utterances[0].audio);
    }
}
