//! Featurized utterances loaded from a manifest.

use crate::dataprep::{read_labels, Manifest, ManifestEntry, Split, SynthUtterance};
use crate::error::{Error, Result};
use crate::features::{apply_norm, fit_norm, read_wav, AudioClip, LogMel, NormStats};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Utterance {
    pub entry: ManifestEntry,
    /// Raw (unnormalized) T×40 log-mel features.
    pub features: Tensor,
    pub labels: Vec<u8>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn from_clip(entry: ManifestEntry, clip: &AudioClip, labels: Vec<u8>, front: &LogMel) -> Result<Self> {
        let features = front.compute(clip)?;
        if features.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{}: {} label frames but {} feature frames",
                entry.utt_id,
                labels.len(),
                features.shape()[0]
            )));
        }
        Ok(Self {
            entry,
            features,
            labels,
        })
    }
}

/// Loads and featurizes every manifest entry in `splits`, in manifest order.
pub fn load(manifest: &Manifest, splits: &[Split]) -> Result<Vec<Utterance>> {
    let front = LogMel::default();
    manifest
        .entries
        .iter()
        .filter(|e| splits.contains(&e.split))
        .map(|e| {
            let clip = read_wav(manifest.resolve(&e.wav_path))?;
            let labels = read_labels(manifest.resolve(&e.label_path))?;
            Utterance::from_clip(e.clone(), &clip, labels, &front)
        })
        .collect()
}

/// Featurizes in-memory synthetic utterances.
pub fn from_synth(utts: &[SynthUtterance]) -> Result<Vec<Utterance>> {
    let front = LogMel::default();
    utts.iter()
        .map(|u| Utterance::from_clip(u.entry.clone(), &u.clip, u.labels.clone(), &front))
        .collect()
}

/// Normalization statistics over the given utterances.
pub fn fit(utts: &[Utterance]) -> Result<NormStats> {
    fit_norm(utts.iter().map(|u| &u.features))
}

/// Returns copies of the utterances with normalized features.
pub fn normalized(stats: &NormStats, utts: &[Utterance]) -> Result<Vec<Utterance>> {
    utts.iter()
        .map(|u| {
            Ok(Utterance {
                entry: u.entry.clone(),
                features: apply_norm(stats, &u.features)?,
                labels: u.labels.clone(),
            })
        })
        .collect()
}

pub fn of_split(utts: &[Utterance], split: Split) -> Vec<Utterance> {
    utts.iter().filter(|u| u.entry.split == split).cloned().collect()
}
