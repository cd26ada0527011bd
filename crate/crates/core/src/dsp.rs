//! Signal-processing primitives shared by augmentation and the front end:
//! biquad cascades, Butterworth design, zero-phase filtering, band-limited
//! resampling and a short-time Fourier transform pair.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Direct-form-I biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// RBJ low-pass section with the given quality factor.
    pub fn lowpass(cutoff_hz: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b1 = (1.0 - cos) / a0;
        Biquad {
            b: [b1 / 2.0, b1, b1 / 2.0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2
                    - self.a[0] * y1
                    - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, sample_rate: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / sample_rate);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }
}

/// Butterworth low-pass of even `order` as a cascade of second-order sections.
pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, sample_rate: f64) -> Vec<Biquad> {
    assert!(order >= 2 && order % 2 == 0, "order must be even");
    (1..=order / 2)
        .map(|k| {
            let theta = (2 * k - 1) as f64 * PI / (2 * order) as f64;
            Biquad::lowpass(cutoff_hz, 1.0 / (2.0 * theta.cos()), sample_rate)
        })
        .collect()
}

pub fn cascade(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    sections.iter().fold(x.to_vec(), |acc, s| s.run(&acc))
}

/// Forward-backward filtering with odd-reflection padding; zero phase,
/// squared magnitude response.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (n - 1).min(2048);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let mut y = cascade(sections, &ext);
    y.reverse();
    let mut y = cascade(sections, &y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const SINC_ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;

/// Band-limited resampling. `ratio` is output samples per input sample; the
/// output has `n_out` samples, output sample `j` sits at input position
/// `j / ratio`. When downsampling the kernel cutoff drops to `0.95 * ratio`
/// of the input Nyquist. A ratio of exactly 1 reproduces the input.
pub fn resample(x: &[f64], ratio: f64, n_out: usize) -> Vec<f64> {
    assert!(ratio > 0.0 && ratio.is_finite());
    if ratio == 1.0 && n_out == x.len() {
        return x.to_vec();
    }
    let cutoff = if ratio < 1.0 { 0.95 * ratio } else { 1.0 };
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let n = x.len() as isize;
    (0..n_out)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as isize;
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let d = t - k as f64;
                let arg = PI * cutoff * d;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                let r = d / half_width;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                acc += x[k as usize] * cutoff * sinc * w;
            }
            acc
        })
        .collect()
}

/// Resample between sample rates, preserving duration.
pub fn resample_rate(x: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if from_hz == to_hz {
        return x.to_vec();
    }
    let ratio = to_hz as f64 / from_hz as f64;
    let n_out = (x.len() as f64 * ratio).round() as usize;
    resample(x, ratio, n_out)
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Centered STFT with a periodic Hann window; frames hold `fft_len / 2 + 1` bins.
pub struct Stft {
    pub fft_len: usize,
    pub hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(fft_len: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft_len,
            hop,
            window: hann(fft_len),
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        }
    }

    pub fn frame_count(&self, n: usize) -> usize {
        n / self.hop + 1
    }

    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let pad = self.fft_len / 2;
        let frames = self.frame_count(x.len());
        let at = |i: isize| -> f64 {
            if i < 0 || i as usize >= x.len() {
                0.0
            } else {
                x[i as usize]
            }
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        (0..frames)
            .map(|f| {
                let start = (f * self.hop) as isize - pad as isize;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(at(start + i as isize) * self.window[i], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.fft_len / 2 + 1].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`], trimmed to `n` samples.
    pub fn synthesize(&self, frames: &[Vec<Complex64>], n: usize) -> Vec<f64> {
        let pad = self.fft_len / 2;
        let total = frames.len() * self.hop + self.fft_len;
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        for (f, spec) in frames.iter().enumerate() {
            let half = self.fft_len / 2;
            for k in 0..=half {
                buf[k] = spec[k];
            }
            for k in 1..half {
                buf[self.fft_len - k] = spec[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.fft_len {
                let w = self.window[i];
                out[start + i] += buf[i].re / self.fft_len as f64 * w;
                norm[start + i] += w * w;
            }
        }
        (0..n)
            .map(|i| {
                let j = i + pad;
                if norm[j] > 1e-10 {
                    out[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}
