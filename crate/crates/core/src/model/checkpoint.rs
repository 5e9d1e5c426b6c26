//! Checkpoint files.
//!
//! Layout: the magic line, a line holding the byte length of a TOML header,
//! the header itself (format version, model configuration, parameter names
//! and shapes in storage order), then every parameter as little-endian `f32`
//! in that order. Writing the same model twice yields identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "SAMBD-CHECKPOINT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn take_line<'a>(bytes: &mut &'a [u8]) -> Result<&'a str> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err("truncated checkpoint header"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| format_err("checkpoint header is not UTF-8"))?;
    *bytes = &bytes[end + 1..];
    Ok(line)
}

impl<T: Real> Model<T> {
    /// Serialises the model; values are stored as `f32`.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let params = self
            .params
            .ids()
            .map(|id| Entry {
                name: self.params.name(id).to_string(),
                shape: self.params.value(id).shape().to_vec(),
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params,
        };
        let text = toml::to_string(&header).map_err(|e| format_err(e.to_string()))?;
        let mut out = format!("{CHECKPOINT_MAGIC} {FORMAT_VERSION}\n{}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.reserve(4 * self.params.numel());
        for id in self.params.ids() {
            for v in self.params.value(id).data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(mut bytes: &[u8]) -> Result<Self> {
        let magic = take_line(&mut bytes)?;
        if magic != format!("{CHECKPOINT_MAGIC} {FORMAT_VERSION}") {
            return Err(format_err(format!("not a version {FORMAT_VERSION} checkpoint: {magic:?}")));
        }
        let len: usize = take_line(&mut bytes)?
            .parse()
            .map_err(|_| format_err("bad checkpoint header length"))?;
        if bytes.len() < len {
            return Err(format_err("truncated checkpoint header"));
        }
        let text = std::str::from_utf8(&bytes[..len]).map_err(|_| format_err("checkpoint header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| format_err(format!("checkpoint header: {e}")))?;
        bytes = &bytes[len..];
        header.config.validate()?;

        // the stored parameter table must be exactly what the config builds
        let reference = Model::<f32>::build(header.config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = reference
            .params
            .ids()
            .map(|id| (reference.params.name(id), reference.params.value(id).shape()))
            .collect();
        let stored: Vec<(&str, &[usize])> = header.params.iter().map(|e| (e.name.as_str(), e.shape.as_slice())).collect();
        if expected != stored {
            return Err(format_err("checkpoint parameters do not match its configuration"));
        }

        let total: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if bytes.len() != 4 * total {
            return Err(format_err(format!(
                "checkpoint payload has {} bytes, expected {}",
                bytes.len(),
                4 * total
            )));
        }
        let mut params = ParamStore::new();
        let mut chunks = bytes.chunks_exact(4);
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let data = chunks
                .by_ref()
                .take(n)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            params.insert(e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok(Model::from_parts(header.config, params))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
