//! Checkpoint container.
//!
//! Layout: a UTF-8 header of `key=value` lines terminated by a line
//! `end`, then for every parameter array in model order:
//! name length (u32 LE), name bytes, rank (u32 LE), each dim (u64 LE),
//! and the row-major values as f64 LE. Floats in the header use Rust's
//! shortest round-trip formatting, so save → load is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "vad-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm: NormStats,
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.model.config;
        let mut header = format!("{MAGIC} {FORMAT_VERSION}\n");
        header += &format!("input_dim={}\n", cfg.input_dim);
        header += &format!("layers={}\n", cfg.layers);
        header += &format!("hidden={}\n", cfg.hidden);
        header += &format!("attention={}\n", cfg.attention);
        header += &format!("t_train={}\n", cfg.t_train);
        header += &format!("norm_mean={}\n", join(&self.norm.mean));
        header += &format!("norm_std={}\n", join(&self.norm.std));
        header += &format!("arrays={}\n", self.model.params.len());
        header += "end\n";

        let mut out = header.into_bytes();
        for (name, value, _) in self.model.params.iter() {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in value.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let mut cursor = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[cursor..];
            let len = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            cursor += len + 1;
            std::str::from_utf8(&rest[..len]).map_err(|_| bad("header is not UTF-8".into()))
        };

        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut fields = BTreeMap::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line '{line}'")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing header field '{k}'")));
        let count = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| bad(format!("header field '{k}' is not a count")))
        };
        let floats = |k: &str| -> Result<Vec<f64>> {
            field(k)?
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad(format!("bad float '{s}' in '{k}'"))))
                .collect()
        };
        let attention: AttentionKind = field("attention")?.parse()?;
        let config = ModelConfig {
            input_dim: count("input_dim")?,
            layers: count("layers")?,
            hidden: count("hidden")?,
            attention,
            t_train: count("t_train")?,
        };
        let norm = NormStats {
            mean: floats("norm_mean")?,
            std: floats("norm_std")?,
        };
        if norm.mean.len() != config.input_dim || norm.std.len() != config.input_dim {
            return Err(bad("normalization stats do not match input_dim".into()));
        }
        let n_arrays = count("arrays")?;

        let mut body = &bytes[cursor..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if body.len() < n {
                return Err(bad("truncated parameter data".into()));
            }
            let (head, tail) = body.split_at(n);
            body = tail;
            Ok(head)
        };
        let mut params = ParamSet::new();
        for _ in 0..n_arrays {
            let name_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let data = take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| bad(format!("array '{name}': {e}")))?;
            params.add(name, tensor, true);
        }
        if !body.is_empty() {
            return Err(bad(format!("{} trailing bytes after parameter data", body.len())));
        }
        let model = Model::from_params(config, params).map_err(|e| bad(e.to_string()))?;
        Ok(Self { model, norm })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
