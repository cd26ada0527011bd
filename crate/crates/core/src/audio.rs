//! Mono audio clips and WAV I/O.
//!
//! Everything downstream works on a single channel of `f64` samples in
//! `[-1, 1]`; stereo input is averaged on ingest and output is always
//! 16-bit PCM.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Result<Self> {
        let n = (seconds * sample_rate as f64).round() as usize;
        Self::new(vec![0.0; n], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Clamp to `[-1, 1]`, returning the clipped clip and how many samples were touched.
    pub fn clamped(&self) -> (AudioClip, usize) {
        let mut count = 0;
        let samples = self
            .samples
            .iter()
            .map(|&s| {
                if s > 1.0 || s < -1.0 {
                    count += 1;
                    s.clamp(-1.0, 1.0)
                } else {
                    s
                }
            })
            .collect();
        (
            AudioClip {
                samples,
                sample_rate: self.sample_rate,
            },
            count,
        )
    }
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let wav_err = |message: String| Error::Wav {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    // Once the file is open, every reader failure is a format problem.
    let mut reader = WavReader::new(std::io::BufReader::new(file)).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(wav_err(format!("{channels} channels; expected mono or stereo")));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(e.to_string()))?
        }
        (fmt, bits) => {
            return Err(wav_err(format!("unsupported codec: {fmt:?} {bits}-bit")));
        }
    };
    if interleaved.is_empty() {
        return Err(wav_err("zero-length audio".into()));
    }

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|pair| 0.5 * (pair[0] + pair[1]))
            .collect()
    };
    AudioClip::new(samples, spec.sample_rate)
}

/// Write 16-bit PCM mono. Returns the number of samples clamped to full scale.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<usize> {
    if clip.is_empty() {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: "refusing to write an empty clip".into(),
        });
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let hound_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(format!("write {}", path.display()), io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(hound_err)?;
    let mut clamped = 0;
    for &s in &clip.samples {
        let q = (s * 32768.0).round();
        let v = if q > 32767.0 {
            clamped += usize::from(s > 1.0);
            32767
        } else if q < -32768.0 {
            clamped += 1;
            -32768
        } else {
            q as i16
        };
        writer.write_sample(v).map_err(hound_err)?;
    }
    writer.finalize().map_err(hound_err)?;
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} sample(s)", path.display());
    }
    Ok(clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_positive_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(32767i16).unwrap();
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.samples(), &[32767.0 / 32768.0]);
    }

    #[test]
    fn silence_reads_back_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        write_wav(&AudioClip::silence(1.0, 16000).unwrap(), &path).unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.len(), 16000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0.5f32).unwrap();
            w.write_sample(-0.5f32).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.len(), 100);
        assert_eq!(clip.sample_rate(), 8000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn eight_and_twenty_four_bit_pcm() {
        let dir = tempfile::tempdir().unwrap();
        for bits in [8u16, 24] {
            let path = dir.path().join(format!("b{bits}.wav"));
            let spec = WavSpec {
                channels: 1,
                sample_rate: 16000,
                bits_per_sample: bits,
                sample_format: SampleFormat::Int,
            };
            let mut w = WavWriter::create(&path, spec).unwrap();
            let half = 1i32 << (bits - 2);
            w.write_sample(half).unwrap();
            w.write_sample(-half).unwrap();
            w.finalize().unwrap();
            let clip = read_wav(&path).unwrap();
            assert_eq!(clip.samples(), &[0.5, -0.5], "{bits}-bit");
        }
    }

    #[test]
    fn clamp_counter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let clip = AudioClip::new(vec![0.0, 1.5, -0.25], 16000).unwrap();
        assert_eq!(write_wav(&clip, &path).unwrap(), 1);
        let back = read_wav(&path).unwrap();
        assert!((back.samples()[1] - 32767.0 / 32768.0).abs() < 1e-12);
    }

    #[test]
    fn empty_clip_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let clip = AudioClip::new(vec![], 16000).unwrap();
        assert!(write_wav(&clip, &dir.path().join("e.wav")).is_err());
    }

    #[test]
    fn malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF1234WAVEjunk").unwrap();
        let r = read_wav(&path);
        assert!(matches!(r, Err(Error::Wav { .. })), "{r:?}");
    }

    #[test]
    fn sine_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let samples: Vec<f64> = (0..16000)
            .map(|i| 0.8 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
            .collect();
        let clip = AudioClip::new(samples, 16000).unwrap();
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        let max_err = clip
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 32768.0, "max error {max_err}");
    }
}
