//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vad_core::attention::AttentionKind;
use vad_core::dataprep::{ImbalanceCondition, NoiseType, SynthConfig};
use vad_core::loss::LossKind;
use vad_core::model::ModelConfig;
use vad_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// Manifest to train/evaluate on; empty means an in-memory synthetic
    /// corpus built from the synth keys below.
    pub data: String,
    pub attention: AttentionKind,
    pub hidden: usize,
    pub layers: usize,
    pub t_train: usize,
    /// `ce` or `fl`; `fl` uses `gamma`.
    pub loss: String,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub patience: usize,
    pub bptt: usize,
    pub jobs: usize,
    pub condition: ImbalanceCondition,
    pub snr_set: Vec<f64>,
    pub noise_types: Vec<NoiseType>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dur_min: f64,
    pub dur_max: f64,
    /// Sweep grid: focusing parameters (0 is the CE row) and conditions.
    pub gammas: Vec<f64>,
    pub conditions: Vec<ImbalanceCondition>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let model = ModelConfig::lstm(64, AttentionKind::None);
        Self {
            name: "run".into(),
            seed: 0,
            data: String::new(),
            attention: model.attention,
            hidden: model.hidden,
            layers: model.layers,
            t_train: model.t_train,
            loss: "ce".into(),
            gamma: 2.0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.initial_lr,
            lr_decay: train.lr_decay,
            lr_floor: train.lr_floor,
            patience: train.patience,
            bptt: train.bptt_t,
            jobs: 1,
            condition: synth.condition,
            snr_set: synth.snr_set,
            noise_types: synth.noise_types,
            n_train: synth.n_train,
            n_val: synth.n_val,
            n_test: synth.n_test,
            dur_min: synth.dur_range.0,
            dur_max: synth.dur_range.1,
            gammas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 3.0],
            conditions: ImbalanceCondition::ALL.to_vec(),
        }
    }
}

fn list<T>(value: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("expected a comma-separated list".into());
    }
    Ok(items)
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse '{value}'"))
}

fn via_core<T: std::str::FromStr<Err = vad_core::Error>>(value: &str) -> Result<T, String> {
    value.parse().map_err(|e: vad_core::Error| e.to_string())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 27] = [
        "name",
        "seed",
        "data",
        "attention",
        "hidden",
        "layers",
        "t_train",
        "loss",
        "gamma",
        "epochs",
        "batch_size",
        "lr",
        "lr_decay",
        "lr_floor",
        "patience",
        "bptt",
        "jobs",
        "condition",
        "snr_set",
        "noise_types",
        "n_train",
        "n_val",
        "n_test",
        "dur_min",
        "dur_max",
        "gammas",
        "conditions",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        let r: Result<(), String> = (|| {
            match key {
                "name" => self.name = value.to_string(),
                "seed" => self.seed = num(value)?,
                "data" => self.data = value.to_string(),
                "attention" => self.attention = via_core(value)?,
                "hidden" => self.hidden = num(value)?,
                "layers" => self.layers = num(value)?,
                "t_train" => self.t_train = num(value)?,
                "loss" => {
                    if value != "ce" && value != "fl" {
                        return Err(format!("expected ce or fl, got '{value}'"));
                    }
                    self.loss = value.to_string();
                }
                "gamma" => self.gamma = num(value)?,
                "epochs" => self.epochs = num(value)?,
                "batch_size" => self.batch_size = num(value)?,
                "lr" => self.lr = num(value)?,
                "lr_decay" => self.lr_decay = num(value)?,
                "lr_floor" => self.lr_floor = num(value)?,
                "patience" => self.patience = num(value)?,
                "bptt" => self.bptt = num(value)?,
                "jobs" => self.jobs = num(value)?,
                "condition" => self.condition = via_core(value)?,
                "snr_set" => self.snr_set = list(value, num)?,
                "noise_types" => self.noise_types = list(value, via_core)?,
                "n_train" => self.n_train = num(value)?,
                "n_val" => self.n_val = num(value)?,
                "n_test" => self.n_test = num(value)?,
                "dur_min" => self.dur_min = num(value)?,
                "dur_max" => self.dur_max = num(value)?,
                "gammas" => self.gammas = list(value, num)?,
                "conditions" => self.conditions = list(value, via_core)?,
                _ => return Err("unknown key".into()),
            }
            Ok(())
        })();
        r.map_err(|msg| CliError::Usage(format!("config key '{key}': {msg}")))
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", origin.display(), n + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Every key with its effective value, in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let value = match key {
                "name" => self.name.clone(),
                "seed" => self.seed.to_string(),
                "data" => self.data.clone(),
                "attention" => self.attention.to_string(),
                "hidden" => self.hidden.to_string(),
                "layers" => self.layers.to_string(),
                "t_train" => self.t_train.to_string(),
                "loss" => self.loss.clone(),
                "gamma" => self.gamma.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.lr.to_string(),
                "lr_decay" => self.lr_decay.to_string(),
                "lr_floor" => self.lr_floor.to_string(),
                "patience" => self.patience.to_string(),
                "bptt" => self.bptt.to_string(),
                "jobs" => self.jobs.to_string(),
                "condition" => self.condition.to_string(),
                "snr_set" => join(&self.snr_set),
                "noise_types" => join(&self.noise_types),
                "n_train" => self.n_train.to_string(),
                "n_val" => self.n_val.to_string(),
                "n_test" => self.n_test.to_string(),
                "dur_min" => self.dur_min.to_string(),
                "dur_max" => self.dur_max.to_string(),
                "gammas" => join(&self.gammas),
                "conditions" => join(&self.conditions),
                _ => unreachable!("key list and match arms diverge"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("config");
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn loss_kind(&self) -> Result<LossKind, CliError> {
        let kind = match self.loss.as_str() {
            "fl" => LossKind::focal(self.gamma),
            _ => Ok(LossKind::CrossEntropy),
        };
        kind.map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            t_train: self.t_train,
            ..ModelConfig::lstm(self.hidden, self.attention)
        }
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            initial_lr: self.lr,
            lr_decay: self.lr_decay,
            lr_floor: self.lr_floor,
            epochs: self.epochs,
            batch_size: self.batch_size,
            bptt_t: self.bptt,
            loss: self.loss_kind()?,
            seed: self.seed,
            patience: self.patience,
        })
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            dur_range: (self.dur_min, self.dur_max),
            snr_set: self.snr_set.clone(),
            noise_types: self.noise_types.clone(),
            condition: self.condition,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("attention", "da2").unwrap();
        cfg.set("snr_set", "-5, 0,5").unwrap();
        cfg.set("conditions", "epd,pad3").unwrap();
        let back = RunConfig::parse(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let p = Path::new("cfg");
        assert!(matches!(RunConfig::parse("colour = blue", p), Err(CliError::Usage(_))));
        assert!(RunConfig::parse("hidden 64", p).is_err());
        assert!(RunConfig::parse("hidden = many", p).is_err());
        assert!(RunConfig::parse("loss = mse", p).is_err());
        let ok = RunConfig::parse("# comment\nhidden = 96  # wider\n\n", p).unwrap();
        assert_eq!(ok.hidden, 96);
    }
}
