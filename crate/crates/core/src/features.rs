//! Audio I/O and the log-mel front end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 40;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;

const PCM_SCALE: f64 = 32768.0;
const CACHE_MAGIC: &[u8; 8] = b"VADFEAT1";

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

/// Number of analysis frames for `n` samples (0 when shorter than a window).
pub fn frame_count(n: usize) -> usize {
    if n < WINDOW {
        0
    } else {
        (n - WINDOW) / HOP + 1
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::format(path, other.to_string()),
    }
}

/// Reads a PCM16 mono 16 kHz WAV file, scaling samples by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let check = |field: &'static str, expected: String, found: String| {
        if expected == found {
            Ok(())
        } else {
            Err(Error::WavFormat { field, expected, found })
        }
    };
    check("sample format", "Int".into(), format!("{:?}", spec.sample_format))?;
    check("bits per sample", "16".into(), spec.bits_per_sample.to_string())?;
    check("channels", "1".into(), spec.channels.to_string())?;
    check("sample rate", SAMPLE_RATE.to_string(), spec.sample_rate.to_string())?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok(AudioClip::new(samples))
}

/// Quantizes a sample in [-1, 1] to PCM16 (rounding, saturating).
pub fn to_pcm16(s: f64) -> i16 {
    (s * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        writer.write_sample(to_pcm16(s)).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Reusable log-mel extractor (FFT plan, window and filterbank built once).
pub struct LogMel {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// n_mels rows of N_FFT/2+1 weights.
    filters: Vec<Vec<f64>>,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new(N_MELS)
    }
}

impl LogMel {
    pub fn new(n_mels: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let window = (0..WINDOW)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (WINDOW - 1) as f64).cos())
            .collect();
        Self {
            fft,
            window,
            filters: mel_filterbank(n_mels),
        }
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    /// T×n_mels natural-log mel energies.
    pub fn compute(&self, clip: &AudioClip) -> Result<Tensor> {
        if clip.sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "sample rate {} (expected {SAMPLE_RATE})",
                clip.sample_rate
            )));
        }
        let frames = frame_count(clip.len());
        if frames == 0 {
            return Err(Error::invalid(format!(
                "clip of {} samples is shorter than one {WINDOW}-sample window",
                clip.len()
            )));
        }
        let n_mels = self.n_mels();
        let mut out = Vec::with_capacity(frames * n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = vec![0.0; N_FFT / 2 + 1];
        for t in 0..frames {
            let frame = &clip.samples[t * HOP..t * HOP + WINDOW];
            for (i, slot) in buf.iter_mut().enumerate() {
                let re = if i < WINDOW { frame[i] * self.window[i] } else { 0.0 };
                *slot = Complex::new(re, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push(e.max(LOG_FLOOR).ln());
            }
        }
        Tensor::new(&[frames, n_mels], out)
    }
}

/// Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist.
fn mel_filterbank(n_mels: usize) -> Vec<Vec<f64>> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=N_FFT / 2)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// 40-dim log-mel features with the default extractor.
pub fn logmel(clip: &AudioClip) -> Result<Tensor> {
    LogMel::default().compute(clip)
}

/// Per-dimension standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Zero mean, unit std: leaves features unchanged.
    pub fn identity(dims: usize) -> Self {
        Self {
            mean: vec![0.0; dims],
            std: vec![1.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

/// Global mean and population std over every frame of every matrix.
pub fn fit_norm<'a>(matrices: impl IntoIterator<Item = &'a Tensor>) -> Result<NormStats> {
    let mut dims = None;
    let mut count = 0usize;
    let mut sum = Vec::new();
    let mut sq = Vec::new();
    let matrices: Vec<&Tensor> = matrices.into_iter().collect();
    for m in &matrices {
        let &[_, d] = m.shape() else {
            return Err(Error::shape("fit_norm", m.shape(), &[0, 0]));
        };
        match dims {
            None => {
                dims = Some(d);
                sum = vec![0.0; d];
            }
            Some(prev) if prev != d => return Err(Error::shape("fit_norm", &[prev], &[d])),
            _ => {}
        }
        for row in m.data().chunks(d) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            count += 1;
        }
    }
    let d = dims.ok_or_else(|| Error::invalid("fit_norm needs at least one frame"))?;
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    sq.resize(d, 0.0);
    for m in &matrices {
        for row in m.data().chunks(d) {
            for ((acc, v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats { mean, std })
}

pub fn apply_norm(stats: &NormStats, features: &Tensor) -> Result<Tensor> {
    let d = stats.dims();
    if features.ndim() != 2 || features.shape()[1] != d {
        return Err(Error::shape("apply_norm", features.shape(), &[0, d]));
    }
    let data = features
        .data()
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(&stats.mean)
                .zip(&stats.std)
                .map(|((v, m), s)| (v - m) / s)
        })
        .collect();
    Tensor::new(features.shape(), data)
}

/// Writes a T×D matrix as magic, T and D (u64 LE), then row-major f64 LE.
pub fn write_feature_cache(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let &[t, d] = features.shape() else {
        return Err(Error::shape("feature cache", features.shape(), &[0, 0]));
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CACHE_MAGIC)?;
    write(&(t as u64).to_le_bytes())?;
    write(&(d as u64).to_le_bytes())?;
    for v in features.data() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
        return Err(Error::format(path, "not a feature cache file"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (t, d) = (word(8), word(16));
    let body = &bytes[24..];
    if t == 0 || d == 0 || body.len() != t * d * 8 {
        return Err(Error::format(
            path,
            format!("header says {t}x{d} but body holds {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&[t, d], data)
}
