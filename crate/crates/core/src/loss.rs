//! Frame-level binary cross-entropy and focal loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Probabilities are clamped to `[EPS_P, 1 - EPS_P]` before the log.
pub const EPS_P: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    /// Focal loss with focusing parameter γ ≥ 0.
    Focal(f64),
}

impl LossKind {
    pub fn focal(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::invalid(format!(
                "focal gamma must be finite and >= 0, got {gamma}"
            )));
        }
        Ok(Self::Focal(gamma))
    }

    /// CE for γ = 0, focal otherwise.
    pub fn from_gamma(gamma: f64) -> Result<Self> {
        if gamma == 0.0 {
            Ok(Self::CrossEntropy)
        } else {
            Self::focal(gamma)
        }
    }

    pub fn gamma(self) -> f64 {
        match self {
            Self::CrossEntropy => 0.0,
            Self::Focal(g) => g,
        }
    }

    /// Loss for one frame with predicted speech probability `p`.
    pub fn frame(self, p: f64, label: u8) -> f64 {
        let yt = y_t(p, label);
        match self {
            Self::CrossEntropy => -yt.ln(),
            Self::Focal(g) => -(1.0 - yt).powf(g) * yt.ln(),
        }
    }

    /// Mean loss over a batch of probabilities `probs` (any shape) and
    /// matching 0/1 `targets`, recorded on the tape.
    pub fn batch(self, tape: &mut Tape, probs: Var, targets: Var) -> Result<Var> {
        if tape.shape(probs) != tape.shape(targets) {
            return Err(Error::shape("loss", tape.shape(probs), tape.shape(targets)));
        }
        let p = tape.clamp(probs, EPS_P, 1.0 - EPS_P);
        // y_t = y·p + (1 − y)(1 − p) = (1 − y) + (2y − 1)·p
        let sign = tape.affine(targets, 2.0, -1.0);
        let scaled = tape.mul(sign, p)?;
        let offset = tape.affine(targets, -1.0, 1.0);
        let yt = tape.add(scaled, offset)?;
        let log_yt = tape.log(yt);
        let per_frame = match self {
            Self::CrossEntropy => log_yt,
            Self::Focal(g) => {
                let miss = tape.affine(yt, -1.0, 1.0);
                let weight = tape.pow(miss, g);
                tape.mul(weight, log_yt)?
            }
        };
        let mean = tape.mean(per_frame, None)?;
        Ok(tape.affine(mean, -1.0, 0.0))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CrossEntropy => f.write_str("ce"),
            Self::Focal(g) => write!(f, "fl{g}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Accepts `ce` or `fl` (γ = 2) and `fl<γ>`, e.g. `fl0.5`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::CrossEntropy),
            "fl" => Self::focal(2.0),
            _ => {
                let g = s
                    .strip_prefix("fl")
                    .and_then(|g| g.parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown loss '{s}' (expected ce, fl or fl<gamma>)")))?;
                Self::focal(g)
            }
        }
    }
}

/// Mean per-frame loss over plain slices.
pub fn batch_loss(kind: LossKind, probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("batch_loss", &[probs.len()], &[labels.len()]));
    }
    if probs.is_empty() {
        return Err(Error::invalid("batch_loss needs at least one frame"));
    }
    Ok(probs.iter().zip(labels).map(|(&p, &l)| kind.frame(p, l)).sum::<f64>() / probs.len() as f64)
}

/// Probability assigned to the true class, after clamping.
pub fn y_t(p: f64, label: u8) -> f64 {
    let p = p.clamp(EPS_P, 1.0 - EPS_P);
    if label == 1 {
        p
    } else {
        1.0 - p
    }
}
