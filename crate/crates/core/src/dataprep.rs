//! Dataset construction: SNR mixing, silence padding, endpoint trimming,
//! frame labels and the synthetic corpus generator.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, frame_count, AudioClip, HOP, SAMPLE_RATE, WINDOW};
use crate::rng;

/// Frames per second on the 10 ms grid.
pub const FRAME_RATE: usize = SAMPLE_RATE as usize / HOP;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImbalanceCondition {
    Epd,
    NoPad,
    Pad1s,
    Pad2s,
    Pad3s,
}

impl ImbalanceCondition {
    pub const ALL: [Self; 5] = [Self::Epd, Self::NoPad, Self::Pad1s, Self::Pad2s, Self::Pad3s];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Epd => "epd",
            Self::NoPad => "nopad",
            Self::Pad1s => "pad1",
            Self::Pad2s => "pad2",
            Self::Pad3s => "pad3",
        }
    }

    /// Silence inserted on each side, in seconds (0 for EPD and NoPad).
    pub fn pad_seconds(self) -> f64 {
        match self {
            Self::Epd | Self::NoPad => 0.0,
            Self::Pad1s => 1.0,
            Self::Pad2s => 2.0,
            Self::Pad3s => 3.0,
        }
    }

    /// Applies the condition to a clean utterance and its labels.
    pub fn apply(self, clip: &AudioClip, labels: &[u8]) -> Result<(AudioClip, Vec<u8>)> {
        match self {
            Self::Epd => epd_trim(clip, labels),
            _ => Ok(pad_silence(clip, labels, self.pad_seconds())),
        }
    }
}

impl fmt::Display for ImbalanceCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImbalanceCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown condition '{s}' (expected epd, nopad, pad1, pad2 or pad3)"
            ))
        })
    }
}

/// Result of [`mix_at_snr`].
#[derive(Clone, Debug)]
pub struct Mixed {
    pub clip: AudioClip,
    pub alpha: f64,
    /// Start of the noise segment within the noise clip.
    pub offset: usize,
    /// Fraction of output samples clipped to ±1.
    pub clipped: f64,
}

/// Adds a randomly placed noise segment scaled so that the speech-to-noise
/// power ratio over the whole clip equals `snr_db`.
pub fn mix_at_snr(speech: &AudioClip, noise: &AudioClip, snr_db: f64, rng: &mut impl Rng) -> Result<Mixed> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR must be finite, got {snr_db}")));
    }
    if noise.len() < speech.len() {
        return Err(Error::invalid(format!(
            "noise ({} samples) is shorter than speech ({} samples)",
            noise.len(),
            speech.len()
        )));
    }
    let offset = rng.random_range(0..=noise.len() - speech.len());
    let segment = &noise.samples[offset..offset + speech.len()];
    let p_s = speech.power();
    let p_n = segment.iter().map(|v| v * v).sum::<f64>() / segment.len().max(1) as f64;
    if p_s == 0.0 {
        return Err(Error::Data("speech clip is digitally silent; SNR is undefined".into()));
    }
    if p_n == 0.0 {
        return Err(Error::Data(
            "noise segment is digitally silent; SNR is undefined".into(),
        ));
    }
    let alpha = (p_s / (p_n * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut n_clipped = 0usize;
    let samples = speech
        .samples
        .iter()
        .zip(segment)
        .map(|(s, n)| {
            let v = s + alpha * n;
            if v.abs() > 1.0 {
                n_clipped += 1;
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();
    let clipped = n_clipped as f64 / speech.len() as f64;
    if n_clipped > 0 {
        log::warn!("mix at {snr_db} dB clipped {:.3}% of samples", 100.0 * clipped);
    }
    Ok(Mixed {
        clip: AudioClip {
            samples,
            sample_rate: speech.sample_rate,
        },
        alpha,
        offset,
        clipped,
    })
}

/// Frames of padding for `seconds`, rounded to the 10 ms grid.
pub fn pad_frames(seconds: f64) -> usize {
    (seconds * FRAME_RATE as f64).round() as usize
}

/// Prepends and appends silence. The padding length is rounded to whole
/// hops so labels stay aligned with the feature frames.
pub fn pad_silence(clip: &AudioClip, labels: &[u8], seconds: f64) -> (AudioClip, Vec<u8>) {
    let frames = pad_frames(seconds.max(0.0));
    let n = frames * HOP;
    let mut samples = vec![0.0; n];
    samples.extend_from_slice(&clip.samples);
    samples.resize(samples.len() + n, 0.0);
    let mut out = vec![0u8; frames];
    out.extend_from_slice(labels);
    out.resize(out.len() + frames, 0);
    (
        AudioClip {
            samples,
            sample_rate: clip.sample_rate,
        },
        out,
    )
}

/// Removes everything before the first and after the last speech frame.
/// The clip keeps exactly the samples spanned by the retained frames.
pub fn epd_trim(clip: &AudioClip, labels: &[u8]) -> Result<(AudioClip, Vec<u8>)> {
    let first = labels
        .iter()
        .position(|&l| l == 1)
        .ok_or_else(|| Error::Data("cannot trim an utterance without speech frames".into()))?;
    let last = labels.iter().rposition(|&l| l == 1).expect("has a speech frame");
    let end = (last * HOP + WINDOW).min(clip.len());
    Ok((
        AudioClip {
            samples: clip.samples[first * HOP..end].to_vec(),
            sample_rate: clip.sample_rate,
        },
        labels[first..=last].to_vec(),
    ))
}

/// Speech and non-speech percentages over all frames.
pub fn class_ratio<'a>(tracks: impl IntoIterator<Item = &'a [u8]>) -> Result<(f64, f64)> {
    let (mut speech, mut total) = (0usize, 0usize);
    for t in tracks {
        speech += t.iter().filter(|&&l| l == 1).count();
        total += t.len();
    }
    if total == 0 {
        return Err(Error::invalid("class_ratio needs at least one frame"));
    }
    let s = 100.0 * speech as f64 / total as f64;
    Ok((s, 100.0 - s))
}

/// Energy threshold above the noise floor, in dB.
pub const LABEL_MARGIN_DB: f64 = 6.0;
/// Speech runs shorter than this are erased.
pub const MIN_SPEECH_FRAMES: usize = 3;
/// Gaps shorter than this between speech runs are filled.
pub const MIN_GAP_FRAMES: usize = 5;

/// Per-frame energy labels for a clean clip.
///
/// Frame energy is the mean squared amplitude of the 400-sample window in
/// dB (floored at −100 dB). Frames more than 6 dB above the 10th
/// percentile energy are speech. Gaps under 5 frames are then filled, and
/// finally speech runs under 3 frames are erased.
pub fn energy_label(clip: &AudioClip) -> Vec<u8> {
    let t = frame_count(clip.len());
    let energies: Vec<f64> = (0..t)
        .map(|i| {
            let w = &clip.samples[i * HOP..i * HOP + WINDOW];
            let p = w.iter().map(|v| v * v).sum::<f64>() / WINDOW as f64;
            10.0 * p.max(1e-10).log10()
        })
        .collect();
    if energies.is_empty() {
        return Vec::new();
    }
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let floor = sorted[(sorted.len() - 1) / 10];
    let threshold = floor + LABEL_MARGIN_DB;
    let mut labels: Vec<u8> = energies.iter().map(|&e| u8::from(e > threshold)).collect();
    fill_gaps(&mut labels, MIN_GAP_FRAMES);
    erase_short_runs(&mut labels, MIN_SPEECH_FRAMES);
    labels
}

/// Maximal runs of `value` as (start, len).
fn runs(labels: &[u8], value: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == value {
            let start = i;
            while i < labels.len() && labels[i] == value {
                i += 1;
            }
            out.push((start, i - start));
        } else {
            i += 1;
        }
    }
    out
}

/// Fills interior zero runs shorter than `min_gap` (runs touching either
/// end are left alone).
fn fill_gaps(labels: &mut [u8], min_gap: usize) {
    for (start, len) in runs(labels, 0) {
        if start > 0 && start + len < labels.len() && len < min_gap {
            labels[start..start + len].fill(1);
        }
    }
}

fn erase_short_runs(labels: &mut [u8], min_len: usize) {
    for (start, len) in runs(labels, 1) {
        if len < min_len {
            labels[start..start + len].fill(0);
        }
    }
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut text: String = labels.iter().map(|&l| if l == 1 { '1' } else { '0' }).collect();
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.trim_end_matches(['\n', '\r'])
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(Error::format(path, format!("unexpected label character {other:?}"))),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// One manifest row. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub wav_path: String,
    pub label_path: String,
    pub split: Split,
    pub noise_type: String,
    pub snr_db: f64,
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let entries = csv::Reader::from_reader(file)
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseType {
    White,
    Pink,
    Babble,
    Modulated,
}

impl NoiseType {
    pub const ALL: [Self; 4] = [Self::White, Self::Pink, Self::Babble, Self::Modulated];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Pink => "pink",
            Self::Babble => "babble",
            Self::Modulated => "modulated",
        }
    }

    /// Unit-variance noise of `n` samples.
    pub fn generate(self, n: usize, rng: &mut impl Rng) -> AudioClip {
        let mut out: Vec<f64> = match self {
            Self::White => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            Self::Pink => pink_noise(n, rng),
            Self::Babble => {
                let mut acc = vec![0.0; n];
                for _ in 0..6 {
                    let voice = continuous_voice(n, rng);
                    acc.iter_mut().zip(&voice).for_each(|(a, v)| *a += v);
                }
                acc
            }
            Self::Modulated => {
                let rate = rng.random_range(0.5..4.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let mut lp = 0.0;
                (0..n)
                    .map(|i| {
                        let w: f64 = rng.sample(StandardNormal);
                        lp = 0.9 * lp + 0.1 * w;
                        let t = i as f64 / SAMPLE_RATE as f64;
                        lp * (0.55 + 0.45 * (2.0 * PI * rate * t + phase).sin())
                    })
                    .collect()
            }
        };
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
        if rms > 0.0 {
            out.iter_mut().for_each(|v| *v /= rms);
        }
        AudioClip::new(out)
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown noise type '{s}'")))
    }
}

/// Pink noise via Paul Kellet's economy filter.
fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

/// A speech-like voiced segment of `n` samples with unit RMS: a harmonic
/// complex with jittered pitch, three formant resonances, breath noise and
/// a syllable-rate amplitude envelope.
pub fn speech_segment(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let f0 = rng.random_range(90.0..250.0);
    let formants = [
        (rng.random_range(300.0..900.0), rng.random_range(60.0..120.0)),
        (rng.random_range(900.0..2500.0), rng.random_range(90.0..200.0)),
        (rng.random_range(2000.0..3500.0), rng.random_range(120.0..250.0)),
    ];
    let vibrato_rate = rng.random_range(3.0..7.0);
    let vibrato_depth = rng.random_range(0.01..0.06);
    let syllable_rate = rng.random_range(2.5..6.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let n_harm = (3800.0 / f0) as usize;
    let harmonics: Vec<(f64, f64)> = (1..=n_harm)
        .map(|k| {
            let f = k as f64 * f0;
            let gain: f64 = formants
                .iter()
                .map(|&(c, bw)| 1.0 / (1.0 + ((f - c) / bw).powi(2)))
                .sum();
            (gain / (k as f64).sqrt(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let fade = (0.01 * sr) as usize;
    let mut phase = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let pitch = f0 * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t).sin());
            phase += 2.0 * PI * pitch / sr;
            let voiced: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(k, &(a, ph))| a * ((k + 1) as f64 * phase + ph).sin())
                .sum();
            let breath: f64 = 0.08 * rng.sample::<f64, _>(StandardNormal);
            let env = 0.3 + 0.7 * (0.5 - 0.5 * (2.0 * PI * syllable_rate * t + syllable_phase).cos());
            let edge = (i.min(n - 1 - i) as f64 / fade as f64).min(1.0);
            (voiced + breath) * env * edge
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Back-to-back voiced segments without pauses (a babble voice).
fn continuous_voice(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(4_000..16_000).min(n - out.len()).max(1);
        out.extend(speech_segment(len, rng));
    }
    out
}

/// A clean synthetic utterance with labels that follow from construction.
#[derive(Clone, Debug)]
pub struct CleanUtterance {
    pub clip: AudioClip,
    pub labels: Vec<u8>,
    /// Sample spans [start, end) of the speech segments.
    pub segments: Vec<(usize, usize)>,
}

/// Frame labels for speech spans: a frame is speech when its center
/// sample falls inside a span.
pub fn labels_from_segments(n_samples: usize, segments: &[(usize, usize)]) -> Vec<u8> {
    (0..frame_count(n_samples))
        .map(|t| {
            let center = t * HOP + WINDOW / 2;
            u8::from(segments.iter().any(|&(s, e)| (s..e).contains(&center)))
        })
        .collect()
}

/// Builds a clean utterance of roughly `seconds`: leading silence, then
/// alternating speech segments and pauses, then trailing silence. All
/// boundaries sit on the 10 ms grid.
pub fn synth_utterance(seconds: f64, rng: &mut impl Rng) -> CleanUtterance {
    let hops = |s: f64| ((s * FRAME_RATE as f64).round() as usize).max(1) * HOP;
    let total = hops(seconds.max(0.5));
    let level = rng.random_range(0.03..0.1);
    let mut samples = vec![0.0; total];
    let mut segments = Vec::new();
    let mut pos = hops(rng.random_range(0.1..0.4));
    let tail = hops(rng.random_range(0.1..0.4));
    while pos + hops(0.3) + tail <= total {
        let max_len = (total - tail - pos).min(hops(1.2));
        let len = (rng.random_range(hops(0.3)..=max_len) / HOP) * HOP;
        let seg = speech_segment(len, rng);
        let gain = level * rng.random_range(0.6..1.4);
        for (dst, v) in samples[pos..pos + len].iter_mut().zip(seg) {
            *dst = gain * v;
        }
        segments.push((pos, pos + len));
        pos += len + hops(rng.random_range(0.15..0.6));
    }
    if segments.is_empty() {
        // Too short for the layout: one segment in the middle.
        let (start, end) = (
            HOP * (total / HOP / 4),
            HOP * (3 * total / HOP / 4).max(total / HOP / 4 + 1),
        );
        let seg = speech_segment(end - start, rng);
        for (dst, v) in samples[start..end].iter_mut().zip(seg) {
            *dst = level * v;
        }
        segments.push((start, end));
    }
    let clip = AudioClip::new(samples);
    let labels = labels_from_segments(clip.len(), &segments);
    CleanUtterance { clip, labels, segments }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Clean utterance duration range in seconds.
    pub dur_range: (f64, f64),
    pub snr_set: Vec<f64>,
    pub noise_types: Vec<NoiseType>,
    pub condition: ImbalanceCondition,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 25,
            n_test: 50,
            dur_range: (2.0, 4.0),
            snr_set: vec![-5.0, 0.0, 5.0],
            noise_types: NoiseType::ALL.to_vec(),
            condition: ImbalanceCondition::NoPad,
        }
    }
}

impl SynthConfig {
    pub fn n_utts(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.dur_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("bad duration range {lo}..{hi}")));
        }
        if self.snr_set.is_empty() || self.snr_set.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("snr_set must hold finite values"));
        }
        if self.noise_types.is_empty() {
            return Err(Error::invalid("noise_types must not be empty"));
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.n_train {
            Split::Train
        } else if index < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// One processed utterance held in memory.
#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub entry: ManifestEntry,
    pub clip: AudioClip,
    pub labels: Vec<u8>,
    /// Speech spans of the clean utterance before the condition was applied.
    pub clean_segments: Vec<(usize, usize)>,
}

/// Generates utterance `index` of a corpus. The clean base utterance and
/// the noise depend only on (seed, index), so different conditions share
/// base utterances. Noise type and SNR cycle through their sets within
/// each split so every (noise, SNR) cell is populated evenly.
pub fn synth_one(seed: u64, config: &SynthConfig, index: usize) -> Result<SynthUtterance> {
    config.validate()?;
    let mut base_rng = rng::seeded(rng::derive_seed(seed, 2 * index as u64));
    let mut mix_rng = rng::seeded(rng::derive_seed(seed, 2 * index as u64 + 1));
    let (lo, hi) = config.dur_range;
    let seconds = if lo == hi { lo } else { base_rng.random_range(lo..hi) };
    let clean = synth_utterance(seconds, &mut base_rng);

    let split = config.split_of(index);
    let pos = match split {
        Split::Train => index,
        Split::Val => index - config.n_train,
        Split::Test => index - config.n_train - config.n_val,
    };
    let noise_type = config.noise_types[pos % config.noise_types.len()];
    let snr = config.snr_set[(pos / config.noise_types.len()) % config.snr_set.len()];

    let (clip, labels) = config.condition.apply(&clean.clip, &clean.labels)?;
    let noise = noise_type.generate(clip.len() + SAMPLE_RATE as usize / 2, &mut mix_rng);
    let mixed = mix_at_snr(&clip, &noise, snr, &mut mix_rng)?;
    let utt_id = format!("utt{index:05}");
    Ok(SynthUtterance {
        entry: ManifestEntry {
            wav_path: format!("wav/{utt_id}.wav"),
            label_path: format!("labels/{utt_id}.lab"),
            utt_id,
            split,
            noise_type: noise_type.to_string(),
            snr_db: snr,
            condition: config.condition.to_string(),
        },
        clip: mixed.clip,
        labels,
        clean_segments: clean.segments,
    })
}

/// Generates the whole corpus into `out_dir` (wav/, labels/,
/// manifest.csv) and returns the manifest.
pub fn synth_corpus(seed: u64, config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    for sub in ["wav", "labels"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(config.n_utts());
    for i in 0..config.n_utts() {
        let utt = synth_one(seed, config, i)?;
        features::write_wav(out_dir.join(&utt.entry.wav_path), &utt.clip)?;
        write_labels(out_dir.join(&utt.entry.label_path), &utt.labels)?;
        entries.push(utt.entry);
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
