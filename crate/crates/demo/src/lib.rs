//! WebAssembly bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

use vad_core::attention::AttentionKind;
use vad_core::dataprep::{mix_at_snr, synth_utterance, NoiseType};
use vad_core::features::{apply_norm, fit_norm, logmel, N_MELS};
use vad_core::loss::LossKind;
use vad_core::model::{Model, ModelConfig};
use vad_core::{rng, Tensor};

fn js_err(e: vad_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Focal loss of a frame whose true class receives probability `y_t`, on
/// `points` evenly spaced values of `y_t` in [0.01, 1]. `gamma = 0` is
/// cross entropy.
#[wasm_bindgen]
pub fn focal_loss_curve(gamma: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let kind = LossKind::from_gamma(gamma).map_err(js_err)?;
    Ok(y_t_grid(points).into_iter().map(|p| kind.frame(p, 1)).collect())
}

/// The `y_t` values used by [`focal_loss_curve`].
#[wasm_bindgen]
pub fn y_t_grid(points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n).map(|i| 0.01 + 0.99 * i as f64 / (n - 1) as f64).collect()
}

/// One noisy synthetic utterance with its log-mel features and labels.
#[wasm_bindgen]
pub struct Example {
    frames: usize,
    log_mel: Tensor,
    labels: Vec<u8>,
    clip: Vec<f64>,
}

#[wasm_bindgen]
impl Example {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, seconds: f64, snr_db: f64, noise: &str) -> Result<Example, JsError> {
        let noise: NoiseType = noise.parse().map_err(js_err)?;
        let mut r = rng::seeded(u64::from(seed));
        let clean = synth_utterance(seconds, &mut r);
        let n = noise.generate(clean.clip.len(), &mut r);
        let mixed = mix_at_snr(&clean.clip, &n, snr_db, &mut r).map_err(js_err)?;
        let log_mel = logmel(&mixed.clip).map_err(js_err)?;
        Ok(Example {
            frames: log_mel.shape()[0],
            log_mel,
            labels: clean.labels,
            clip: mixed.clip.samples,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn bands(&self) -> usize {
        N_MELS
    }

    /// Frame-major log-mel values (frames × bands).
    pub fn log_mel(&self) -> Vec<f64> {
        self.log_mel.data().to_vec()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }

    pub fn samples(&self) -> Vec<f64> {
        self.clip.clone()
    }

    /// Gate map σ(G) = H′ − H of the last LSTM layer (frames × `hidden`)
    /// for a randomly initialized model with the given attention module.
    pub fn attention_gate(&self, kind: &str, hidden: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        let kind: AttentionKind = kind.parse().map_err(js_err)?;
        let model = Model::build(ModelConfig::lstm(hidden, kind), u64::from(seed)).map_err(js_err)?;
        let stats = fit_norm([&self.log_mel]).map_err(js_err)?;
        let features = apply_norm(&stats, &self.log_mel).map_err(js_err)?;
        let pass = model.run_eval(&features).map_err(js_err)?;
        Ok(pass
            .last_refined
            .data()
            .iter()
            .zip(pass.last_hidden.data())
            .map(|(r, h)| r - h)
            .collect())
    }
}
