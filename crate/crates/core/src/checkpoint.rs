//! Checkpoint container: a text manifest followed by raw little-endian f32 data.
//!
//! ```text
//! LENREG-CKPT 1
//! model.hidden_size 64
//! ...
//! meta.<key> <value>          free-form annotations, optional
//! step 120                    present when optimizer state is stored
//! tensors 86
//! t embeddings.word 133x64 0
//! t embeddings.position 128x64 34048
//! ...
//! end
//! <tensor data, in manifest order; offsets are bytes from the first data byte>
//! ```
//!
//! Optimizer moments are stored as extra tensors named `optim.m.<name>` and
//! `optim.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::encoder::{EncoderError, ModelConfig, ModelParams, Tensor};
use crate::trainer::OptimState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "LENREG-CKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error(transparent)]
    Config(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optim: Option<OptimState<f32>>,
    pub meta: BTreeMap<String, String>,
}

fn config_lines(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("hidden_size", c.hidden_size.to_string()),
        ("num_layers", c.num_layers.to_string()),
        ("num_heads", c.num_heads.to_string()),
        ("ffn_size", c.ffn_size.to_string()),
        ("maxlen", c.maxlen.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("dropout_p", c.dropout_p.to_string()),
        ("layernorm_eps", c.layernorm_eps.to_string()),
        ("seed", c.seed.to_string()),
    ]
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CheckpointError> {
    v.parse()
        .map_err(|_| CheckpointError::Format(format!("bad value `{v}` for {key}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, _, t)| (n, t))
            .collect();
        if let Some(o) = &self.optim {
            for (prefix, moments) in [("optim.m.", &o.m), ("optim.v.", &o.v)] {
                tensors.extend(
                    moments
                        .tensors()
                        .into_iter()
                        .map(|(n, _, t)| (format!("{prefix}{n}"), t)),
                );
            }
        }
        let mut head = format!("{MAGIC} {FORMAT_VERSION}\n");
        for (k, v) in config_lines(&self.params.config) {
            head.push_str(&format!("model.{k} {v}\n"));
        }
        for (k, v) in &self.meta {
            head.push_str(&format!("meta.{k} {}\n", v.replace('\n', " ")));
        }
        if let Some(o) = &self.optim {
            head.push_str(&format!("step {}\n", o.step));
        }
        head.push_str(&format!("tensors {}\n", tensors.len()));
        let mut offset = 0usize;
        for (name, t) in &tensors {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("t {name} {} {offset}\n", shape.join("x")));
            offset += 4 * t.len();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in &tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let end_marker = b"\nend\n";
        let split = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| CheckpointError::Format("manifest terminator not found".into()))?;
        let manifest = std::str::from_utf8(&bytes[..split])
            .map_err(|_| CheckpointError::Format("manifest is not UTF-8".into()))?;
        let data = &bytes[split + end_marker.len()..];
        let mut lines = manifest.lines();
        let first = lines.next().unwrap_or_default();
        let version = match first.split_once(' ') {
            Some((MAGIC, v)) => parse::<u32>("format version", v)?,
            _ => return Err(CheckpointError::Format("missing magic line".into())),
        };
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }

        let mut model: BTreeMap<String, String> = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut step = None;
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut declared = None;
        for line in lines {
            let (key, rest) = line
                .split_once(' ')
                .ok_or_else(|| CheckpointError::Format(format!("bad manifest line `{line}`")))?;
            if let Some(k) = key.strip_prefix("model.") {
                model.insert(k.to_string(), rest.to_string());
            } else if let Some(k) = key.strip_prefix("meta.") {
                meta.insert(k.to_string(), rest.to_string());
            } else if key == "step" {
                step = Some(parse::<u64>("step", rest)?);
            } else if key == "tensors" {
                declared = Some(parse::<usize>("tensors", rest)?);
            } else if key == "t" {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(CheckpointError::Format(format!("bad tensor line `{line}`")));
                }
                let shape = parts[1]
                    .split('x')
                    .map(|d| parse::<usize>("shape", d))
                    .collect::<Result<Vec<_>, _>>()?;
                entries.push((parts[0].to_string(), shape, parse("offset", parts[2])?));
            } else {
                return Err(CheckpointError::Format(format!("unknown manifest key `{key}`")));
            }
        }
        if declared != Some(entries.len()) {
            return Err(CheckpointError::Format("tensor count does not match table".into()));
        }
        let get = |k: &str| {
            model
                .get(k)
                .ok_or_else(|| CheckpointError::Format(format!("missing model.{k}")))
        };
        let config = ModelConfig {
            hidden_size: parse("hidden_size", get("hidden_size")?)?,
            num_layers: parse("num_layers", get("num_layers")?)?,
            num_heads: parse("num_heads", get("num_heads")?)?,
            ffn_size: parse("ffn_size", get("ffn_size")?)?,
            maxlen: parse("maxlen", get("maxlen")?)?,
            vocab_size: parse("vocab_size", get("vocab_size")?)?,
            dropout_p: parse("dropout_p", get("dropout_p")?)?,
            layernorm_eps: parse("layernorm_eps", get("layernorm_eps")?)?,
            seed: parse("seed", get("seed")?)?,
        };
        config.validate()?;

        let table: BTreeMap<&str, (&[usize], usize)> = entries
            .iter()
            .map(|(n, s, o)| (n.as_str(), (s.as_slice(), *o)))
            .collect();
        let fill = |name: &str, dst: &mut Tensor<f32>| -> Result<(), CheckpointError> {
            let (shape, off) = table
                .get(name)
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))?;
            if *shape != dst.shape.as_slice() {
                return Err(CheckpointError::Format(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    dst.shape
                )));
            }
            let bytes = data
                .get(*off..off + 4 * dst.len())
                .ok_or_else(|| CheckpointError::Format(format!("tensor {name} truncated")))?;
            for (x, b) in dst.data.iter_mut().zip(bytes.chunks_exact(4)) {
                *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            Ok(())
        };

        let mut params = ModelParams::<f32>::zeros(&config);
        let mut expected = 0;
        for (name, _, t) in params.tensors_mut() {
            fill(&name, t)?;
            expected += 1;
        }
        let optim = match step {
            Some(step) => {
                let mut st = OptimState::new(&params);
                st.step = step;
                for (prefix, moments) in [("optim.m.", &mut st.m), ("optim.v.", &mut st.v)] {
                    for (name, _, t) in moments.tensors_mut() {
                        fill(&format!("{prefix}{name}"), t)?;
                        expected += 1;
                    }
                }
                Some(st)
            }
            None => None,
        };
        if expected != entries.len() {
            return Err(CheckpointError::Format("checkpoint holds unexpected tensors".into()));
        }
        Ok(Self {
            params,
            optim,
            meta,
        })
    }

    /// Writes to a sibling temporary file, then renames into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
