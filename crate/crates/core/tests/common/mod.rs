#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use alignlab::am::{compile_training_graph, AcousticModel, HmmPhoneModel, HmmState, ModelKey, Segment, Stage};
use alignlab::am::gmm::DiagGmm;
use alignlab::audio::AudioClip;
use alignlab::features::{estimate_lda, log_mel_energies, FeatureConfig, FeatureMatrix, LDA_RIDGE};
use alignlab::lexicon::Lexicon;
use alignlab::textgrid::{Interval, TextGrid, Tier};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub fn sine(freq: f64, amplitude: f64, seconds: f64, sample_rate: u32) -> AudioClip {
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let samples = (0..n).map(|i| amplitude * (2.0 * PI * freq * i as f64 / sr).sin()).collect();
    AudioClip::new(samples, sample_rate).unwrap()
}

/// Amplitude of the `freq` component, measured by direct correlation over
/// the middle half of the signal so filter edge transients do not count.
pub fn tone_amplitude(x: &[f64], sample_rate: u32, freq: f64) -> f64 {
    let (lo, hi) = (x.len() / 4, 3 * x.len() / 4);
    let w = 2.0 * PI * freq / sample_rate as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate().take(hi).skip(lo) {
        re += v * (w * n as f64).cos();
        im -= v * (w * n as f64).sin();
    }
    2.0 * (re * re + im * im).sqrt() / (hi - lo) as f64
}

/// Naive DFT magnitudes of `x` for bins `0..=n/2`.
pub fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let w = 2.0 * PI * k as f64 / n as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                re += v * (w * i as f64).cos();
                im -= v * (w * i as f64).sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// Frequency of the largest DFT bin over a 4096-sample window taken from
/// the middle of the signal, and the bin width.
pub fn dominant_frequency(x: &[f64], sample_rate: u32) -> (f64, f64) {
    let n = 4096.min(x.len());
    let start = (x.len() - n) / 2;
    let window: Vec<f64> = x[start..start + n]
        .iter()
        .enumerate()
        .map(|(i, v)| v * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()))
        .collect();
    let mags = dft_magnitudes(&window);
    let k = (1..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
    let bin = sample_rate as f64 / n as f64;
    (k as f64 * bin, bin)
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn db(ratio: f64) -> f64 {
    20.0 * ratio.log10()
}

fn random_gmm<R: Rng>(rng: &mut R, dims: usize) -> DiagGmm {
    let k = rng.gen_range(1..=2);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let normal = Normal::new(0.0, 1.5).unwrap();
    DiagGmm::new(
        raw.iter().map(|w| w / total).collect(),
        (0..k).map(|_| (0..dims).map(|_| normal.sample(rng)).collect()).collect(),
        (0..k).map(|_| (0..dims).map(|_| rng.gen_range(0.3..2.0)).collect()).collect(),
    )
    .unwrap()
}

fn random_hmm<R: Rng>(rng: &mut R, states: usize, dims: usize) -> HmmPhoneModel {
    HmmPhoneModel {
        states: (0..states)
            .map(|_| HmmState {
                gmm: random_gmm(rng, dims),
                self_loop: rng.gen_range(0.1..0.9),
                occupancy: 0.0,
            })
            .collect(),
    }
}

/// Monophone model over `phones` with random emissions and transitions.
pub fn random_model<R: Rng>(rng: &mut R, phones: &[&str], dims: usize) -> AcousticModel {
    let mut hmms = BTreeMap::new();
    hmms.insert(ModelKey::Silence, random_hmm(rng, 5, dims));
    for p in phones {
        hmms.insert(ModelKey::Mono(p.to_string()), random_hmm(rng, 3, dims));
    }
    AcousticModel {
        stage: Stage::Mono,
        feature_config: FeatureConfig::default(),
        dims,
        inventory: phones.iter().map(|p| p.to_string()).collect(),
        class_map: None,
        hmms,
        lda: None,
        speaker_transforms: BTreeMap::new(),
        schedule_label: "toy".into(),
    }
}

/// Diagonal Gaussian mixture density written out from its definition.
pub fn gmm_log_density(gmm: &DiagGmm, x: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..gmm.num_components())
        .map(|c| {
            let mut l = gmm.weights()[c].ln();
            for ((v, m), s2) in x.iter().zip(&gmm.means()[c]).zip(&gmm.vars()[c]) {
                l -= 0.5 * ((2.0 * PI * s2).ln() + (v - m) * (v - m) / s2);
            }
            l
        })
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// One segment of an enumerated path: label, first frame, frame count.
pub type Span = (String, usize, usize);

/// Best path by exhaustive enumeration: every subset of optional silences
/// and every split of the frames over the chosen states, each state taking
/// at least one frame. Each optional silence costs ln 0.5 whether taken or
/// skipped.
pub fn exhaustive_best(model: &AcousticModel, segments: &[Segment], feats: &FeatureMatrix) -> Option<(f64, Vec<Span>)> {
    let optional: Vec<usize> = (0..segments.len()).filter(|&i| segments[i].is_optional()).collect();
    let frames = feats.frames();
    let mut best: Option<(f64, Vec<Span>)> = None;
    for mask in 0..(1u32 << optional.len()) {
        let chosen: Vec<usize> = (0..segments.len())
            .filter(|i| match optional.iter().position(|o| o == i) {
                Some(bit) => mask & (1 << bit) != 0,
                None => true,
            })
            .collect();
        // (segment, hmm state)
        let mut states: Vec<(usize, &HmmState)> = Vec::new();
        for &s in &chosen {
            let key = match &segments[s] {
                Segment::Silence { .. } => ModelKey::Silence,
                Segment::Phone { phone, .. } => ModelKey::Mono(phone.clone()),
            };
            for st in &model.hmms[&key].states {
                states.push((s, st));
            }
        }
        if states.len() > frames {
            continue;
        }
        let fixed = -LN_2 * optional.len() as f64;
        let mut durations = vec![1usize; states.len()];
        enumerate_durations(&mut durations, 0, frames - states.len(), &mut |d| {
            let mut score = fixed;
            let mut t = 0;
            for (i, (&(_, st), &n)) in states.iter().zip(d.iter()).enumerate() {
                if i > 0 {
                    score += (1.0 - states[i - 1].1.self_loop).ln();
                }
                for k in 0..n {
                    if k > 0 {
                        score += st.self_loop.ln();
                    }
                    score += gmm_log_density(&st.gmm, feats.row(t));
                    t += 1;
                }
            }
            if best.as_ref().is_none_or(|b| score > b.0) {
                // (segment, first frame, frames)
                let mut runs: Vec<(usize, usize, usize)> = Vec::new();
                let mut t = 0;
                for (&(s, _), &n) in states.iter().zip(d.iter()) {
                    match runs.last_mut() {
                        Some(last) if last.0 == s => last.2 += n,
                        _ => runs.push((s, t, n)),
                    }
                    t += n;
                }
                let spans = runs
                    .into_iter()
                    .map(|(s, first, n)| (segments[s].label().to_owned(), first, n))
                    .collect();
                best = Some((score, spans));
            }
        });
    }
    best
}

fn enumerate_durations(d: &mut Vec<usize>, i: usize, spare: usize, f: &mut dyn FnMut(&[usize])) {
    if i + 1 == d.len() {
        d[i] += spare;
        f(d);
        d[i] -= spare;
        return;
    }
    for extra in 0..=spare {
        d[i] += extra;
        enumerate_durations(d, i + 1, spare - extra, f);
        d[i] -= extra;
    }
}

/// A random one- or two-word utterance over at most three phones, with a
/// lexicon that covers it.
pub fn random_words<R: Rng>(rng: &mut R, phones: &[&str]) -> (Vec<String>, Lexicon) {
    let total = rng.gen_range(1..=3);
    let pron: Vec<String> = (0..total).map(|_| phones[rng.gen_range(0..phones.len())].to_string()).collect();
    let mut lexicon = Lexicon::default();
    if total > 1 && rng.gen_bool(0.5) {
        let cut = rng.gen_range(1..total);
        lexicon.insert("w0", pron[..cut].to_vec());
        lexicon.insert("w1", pron[cut..].to_vec());
        (vec!["w0".into(), "w1".into()], lexicon)
    } else {
        lexicon.insert("w0", pron);
        (vec!["w0".into()], lexicon)
    }
}

pub fn random_features<R: Rng>(rng: &mut R, frames: usize, dims: usize) -> FeatureMatrix {
    let normal = Normal::new(0.0, 1.5).unwrap();
    let data = (0..frames * dims).map(|_| normal.sample(rng)).collect();
    FeatureMatrix::new(data, frames, dims, 0.01, 0.0075).unwrap()
}

pub fn graph_for(words: &[String], lexicon: &Lexicon) -> alignlab::am::TrainingGraph {
    compile_training_graph(words, lexicon).unwrap()
}


/// Frames counted by sliding the window until it no longer fits.
pub fn enumerated_frames(n: usize, window: usize, hop: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    while start + window <= n {
        count += 1;
        start += hop;
    }
    count
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// For a 1 kHz sine: the filter with the highest mean log energy, and the
/// filter whose triangle puts the most weight on 1 kHz.
pub fn mel_peak_for_1k() -> (usize, usize) {
    let cfg = FeatureConfig::default();
    let energies = log_mel_energies(&sine(1000.0, 0.5, 1.0, 16_000), &cfg).unwrap();
    let mut mean = vec![0.0; cfg.mel_filters];
    for row in energies.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let got = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();

    let (lo, hi) = (hz_to_mel(cfg.low_freq), hz_to_mel(8000.0));
    let edge = |i: usize| lo + (hi - lo) * i as f64 / (cfg.mel_filters + 1) as f64;
    let m = hz_to_mel(1000.0);
    let weight = |j: usize| {
        let (l, c, r) = (edge(j), edge(j + 1), edge(j + 2));
        if m > l && m <= c {
            (m - l) / (c - l)
        } else if m > c && m < r {
            (r - m) / (r - c)
        } else {
            0.0
        }
    };
    let want = (0..cfg.mel_filters).max_by(|&a, &b| weight(a).total_cmp(&weight(b))).unwrap();
    (got, want)
}

/// Closed-form Fisher direction `Sw^-1 (mu1 - mu0)` for 2-D data.
pub fn fisher_direction(a: &[[f64; 2]], b: &[[f64; 2]]) -> [f64; 2] {
    let mean = |x: &[[f64; 2]]| {
        let n = x.len() as f64;
        [x.iter().map(|v| v[0]).sum::<f64>() / n, x.iter().map(|v| v[1]).sum::<f64>() / n]
    };
    let (ma, mb) = (mean(a), mean(b));
    let mut s = [[0.0; 2]; 2];
    for (x, m) in a.iter().map(|v| (v, ma)).chain(b.iter().map(|v| (v, mb))) {
        let d = [x[0] - m[0], x[1] - m[1]];
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += d[i] * d[j];
            }
        }
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let dm = [mb[0] - ma[0], mb[1] - ma[1]];
    [inv[0][0] * dm[0] + inv[0][1] * dm[1], inv[1][0] * dm[0] + inv[1][1] * dm[1]]
}

pub fn cosine(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] * b[0] + a[1] * b[1]) / ((a[0].hypot(a[1])) * (b[0].hypot(b[1])))
}

pub fn lda_direction(a: &[[f64; 2]], b: &[[f64; 2]]) -> [f64; 2] {
    let rows: Vec<&[f64]> = a.iter().chain(b).map(|v| v.as_slice()).collect();
    let labels: Vec<usize> = a.iter().map(|_| 0).chain(b.iter().map(|_| 1)).collect();
    let t = estimate_lda(&rows, &labels, 1, LDA_RIDGE, 0).unwrap();
    [t.matrix[(0, 0)], t.matrix[(0, 1)]]
}

/// Cosine between the estimated LDA direction and the Fisher direction on
/// `count` random two-class problems with a shared correlated covariance.
pub fn lda_fisher_cosines(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-2.0f64, 2.0);
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..count)
        .map(|_| {
            let (l00, l10, l11) = (u.sample(&mut rng).abs() + 0.5, u.sample(&mut rng), u.sample(&mut rng).abs() + 0.5);
            let shift = [u.sample(&mut rng) * 2.0, u.sample(&mut rng) * 2.0];
            let mut draw = |offset: [f64; 2]| -> Vec<[f64; 2]> {
                (0..400)
                    .map(|_| {
                        let (z0, z1) = (n.sample(&mut rng), n.sample(&mut rng));
                        [offset[0] + l00 * z0, offset[1] + l10 * z0 + l11 * z1]
                    })
                    .collect()
            };
            let a = draw([0.0, 0.0]);
            let b = draw(shift);
            cosine(lda_direction(&a, &b), fisher_direction(&a, &b)).abs()
        })
        .collect()
}

pub fn random_label() -> impl Strategy<Value = String> {
    prop_oneof![
        Just(String::new()),
        "[a-zŋɲɖʎ]{1,6}",
        "[a-z]{1,3}\"[a-z]{0,2}",
        "[A-Za-z ]{1,8}",
    ]
}

/// Gap-free interval tier over `[0, duration]` with microsecond-grid times.
pub fn random_tier(duration_us: u64) -> impl Strategy<Value = Tier> {
    (
        prop::collection::btree_set(1..duration_us, 0..12),
        prop::collection::vec(random_label(), 13),
        prop::sample::select(vec!["words", "phones", "notes"]),
    )
        .prop_map(move |(cuts, labels, name)| {
            let mut edges = vec![0];
            edges.extend(cuts);
            edges.push(duration_us);
            let intervals = edges
                .windows(2)
                .zip(labels)
                .map(|(w, l)| Interval::new(w[0] as f64 / 1e6, w[1] as f64 / 1e6, l))
                .collect();
            Tier::new(name, intervals).unwrap()
        })
}

pub fn random_grid() -> impl Strategy<Value = TextGrid> {
    (1_000u64..20_000_000).prop_flat_map(|d| {
        prop::collection::vec(random_tier(d), 0..4).prop_map(move |tiers| TextGrid {
            tiers,
            duration: d as f64 / 1e6,
        })
    })
}

pub fn utf16le(text: &str) -> Vec<u8> {
    let mut bytes = vec![0xFF, 0xFE];
    for u in text.encode_utf16() {
        bytes.extend_from_slice(&u.to_le_bytes());
    }
    bytes
}
