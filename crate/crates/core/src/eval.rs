//! ROC/AUC scoring, per-condition reports and hidden-map dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::model::{Model, ParamBreakdown};
use crate::tensor::Tensor;

/// ROC points from the strictest to the loosest threshold, including
/// (0, 0) and (1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc", &[scores.len()], &[labels.len()]));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::Data("AUC undefined: no positive (speech) frames".into()));
    }
    if neg == 0 {
        return Err(Error::Data("AUC undefined: no negative (non-speech) frames".into()));
    }
    Ok((pos, neg))
}

/// Sweeps every distinct score as a threshold (`score >= threshold` is
/// positive). Tied scores move together, which yields half credit for ties
/// under the trapezoid rule.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve { points })
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.area())
}

/// Relative improvement of `auc` over `base`: the share of the remaining
/// headroom that was closed. Inputs are fractions in [0, 1]; the result is
/// the same as with percentages.
pub fn relative_improvement(auc: f64, base: f64) -> f64 {
    (auc - base) / (1.0 - base)
}

/// Per-frame probabilities for every utterance, in input order. Features
/// must already be normalized. Work is spread over up to `jobs` threads.
pub fn score_all(model: &Model, utts: &[Utterance], jobs: usize) -> Result<Vec<Vec<f64>>> {
    let jobs = jobs.clamp(1, utts.len().max(1));
    let per = utts.len().div_ceil(jobs);
    if jobs == 1 {
        return utts.iter().map(|u| model.predict(&u.features)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = utts
            .chunks(per.max(1))
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|u| model.predict(&u.features))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(utts.len());
        for h in handles {
            out.extend(h.join().expect("scoring thread panicked")?);
        }
        Ok(out)
    })
}

/// Pooled AUC over all frames of all utterances.
pub fn pooled_auc(scores: &[Vec<f64>], utts: &[Utterance]) -> Result<f64> {
    let s: Vec<f64> = scores.iter().flatten().copied().collect();
    let l: Vec<u8> = utts.iter().flat_map(|u| u.labels.iter().copied()).collect();
    roc_auc(&s, &l)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub noise: String,
    pub snr_db: f64,
    /// `None` when the cell's frames hold a single class.
    pub auc: Option<f64>,
    pub n_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by noise name, then SNR.
    pub cells: Vec<CellResult>,
    /// (SNR, mean AUC over that SNR's defined cells), ascending SNR.
    pub snr_means: Vec<(f64, f64)>,
    /// Mean over all defined cells.
    pub overall: f64,
    /// AUC over all frames pooled together.
    pub pooled: f64,
    /// Cells that could not be scored, with the reason.
    pub missing: Vec<String>,
    pub params: Option<ParamBreakdown>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores every utterance full-length in eval mode and aggregates per
/// (noise, SNR) cell by pooling frames across utterances.
pub fn evaluate(model: &Model, utts: &[Utterance], jobs: usize) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Data("nothing to evaluate: no utterances".into()));
    }
    let scores = score_all(model, utts, jobs)?;
    let mut report = report_from_scores(&scores, utts)?;
    report.params = Some(model.count_params());
    Ok(report)
}

/// Aggregation half of [`evaluate`].
pub fn report_from_scores(scores: &[Vec<f64>], utts: &[Utterance]) -> Result<EvalReport> {
    type Key = (String, u64);
    let key = |u: &Utterance| (u.entry.noise_type.clone(), u.entry.snr_db.to_bits());
    let mut cells: BTreeMap<Key, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for (s, u) in scores.iter().zip(utts) {
        let cell = cells.entry(key(u)).or_default();
        cell.0.extend_from_slice(s);
        cell.1.extend_from_slice(&u.labels);
    }
    let noises: Vec<String> = {
        let mut n: Vec<String> = cells.keys().map(|k| k.0.clone()).collect();
        n.dedup();
        n
    };
    let mut snrs: Vec<f64> = cells.keys().map(|k| f64::from_bits(k.1)).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();

    let mut out = Vec::new();
    let mut missing = Vec::new();
    for noise in &noises {
        for &snr in &snrs {
            match cells.get(&(noise.clone(), snr.to_bits())) {
                None => missing.push(format!("{noise} @ {snr} dB: no utterances")),
                Some((s, l)) => {
                    let auc = match roc_auc(s, l) {
                        Ok(a) => Some(a),
                        Err(Error::Data(msg)) => {
                            missing.push(format!("{noise} @ {snr} dB: {msg}"));
                            None
                        }
                        Err(e) => return Err(e),
                    };
                    out.push(CellResult {
                        noise: noise.clone(),
                        snr_db: snr,
                        auc,
                        n_frames: l.len(),
                    });
                }
            }
        }
    }
    let snr_means: Vec<(f64, f64)> = snrs
        .iter()
        .filter_map(|&snr| {
            let row: Vec<f64> = out.iter().filter(|c| c.snr_db == snr).filter_map(|c| c.auc).collect();
            (!row.is_empty()).then(|| (snr, mean(&row)))
        })
        .collect();
    let defined: Vec<f64> = out.iter().filter_map(|c| c.auc).collect();
    if defined.is_empty() {
        return Err(Error::Data(format!("no scorable cells: {}", missing.join("; "))));
    }
    Ok(EvalReport {
        overall: mean(&defined),
        pooled: pooled_auc(scores, utts)?,
        cells: out,
        snr_means,
        missing,
        params: None,
    })
}

impl EvalReport {
    /// CSV with columns noise, snr_db, auc, n_frames. Undefined AUCs are
    /// left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("noise,snr_db,auc,n_frames\n");
        for c in &self.cells {
            let auc = c.auc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", c.noise, c.snr_db, auc, c.n_frames);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (snr, auc) in &self.snr_means {
            let _ = writeln!(s, "snr {snr:>6} dB  mean AUC {:.2}%", 100.0 * auc);
        }
        let _ = writeln!(s, "overall mean AUC {:.2}%", 100.0 * self.overall);
        let _ = writeln!(s, "pooled AUC {:.2}%", 100.0 * self.pooled);
        if let Some(p) = &self.params {
            let _ = writeln!(
                s,
                "parameters {} (attention {}, {:.2}% of baseline)",
                p.total(),
                p.attention,
                p.overhead_percent()
            );
        }
        for m in &self.missing {
            let _ = writeln!(s, "missing: {m}");
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.csv", self.to_csv()), ("summary.txt", self.summary())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Last-layer hidden maps over a frame range.
#[derive(Clone, Debug)]
pub struct HiddenDump {
    pub start: usize,
    /// (range)×D maps before and after refinement.
    pub hidden: Tensor,
    pub refined: Tensor,
    pub truth: Vec<u8>,
    pub probs: Vec<f64>,
}

/// Runs the full utterance (normalized features) and keeps frames
/// `start..end` of the last layer's maps.
pub fn dump_hidden_maps(
    model: &Model,
    features: &Tensor,
    labels: &[u8],
    start: usize,
    end: usize,
) -> Result<HiddenDump> {
    let t = features.shape()[0];
    if start >= end || end > t || labels.len() != t {
        return Err(Error::invalid(format!(
            "frame range {start}..{end} is not within the utterance's {t} frames"
        )));
    }
    let pass = model.run_eval(features)?;
    let d = model.config.hidden;
    let rows = |m: &Tensor| Tensor::new(&[end - start, d], m.data()[start * d..end * d].to_vec());
    Ok(HiddenDump {
        start,
        hidden: rows(&pass.last_hidden)?,
        refined: rows(&pass.last_refined)?,
        truth: labels[start..end].to_vec(),
        probs: pass.probs[start..end].to_vec(),
    })
}

fn matrix_csv(m: &Tensor) -> String {
    let d = m.shape()[1];
    m.data()
        .chunks(d)
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

impl HiddenDump {
    /// Writes hidden.csv, refined.csv (one row per frame, D columns) and
    /// labels.csv (frame, truth, prob, pred at 0.5).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut labels = String::from("frame,truth,prob,pred\n");
        for (i, (t, p)) in self.truth.iter().zip(&self.probs).enumerate() {
            let _ = writeln!(labels, "{},{},{},{}", self.start + i, t, p, u8::from(*p >= 0.5));
        }
        for (name, body) in [
            ("hidden.csv", matrix_csv(&self.hidden)),
            ("refined.csv", matrix_csv(&self.refined)),
            ("labels.csv", labels),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Mean and population standard deviation of overall AUCs across
/// imbalance conditions.
pub fn summarize_imbalance(aucs: &[f64]) -> Result<(f64, f64)> {
    if aucs.len() < 2 {
        return Err(Error::invalid("summarize_imbalance needs at least two reports"));
    }
    let m = mean(aucs);
    let var = aucs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / aucs.len() as f64;
    Ok((m, var.sqrt()))
}
