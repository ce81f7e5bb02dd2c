//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SCVEC001"
//! header_len   u32
//! header       header_len bytes of UTF-8 TOML: version, num_speakers,
//!              [model] dims, [pooling] config, [state] progress
//! count        u32      number of tensors
//! per tensor:  name_len u32, name bytes, rows u32, cols u32,
//!              rows*cols f64 values, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::PoolingConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{EmbeddingModel, ModelDims};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCVEC001";
const FORMAT_VERSION: u32 = 1;

/// Training progress stored with the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub total_steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    num_speakers: usize,
    model: ModelDims,
    pooling: PoolingConfig,
    state: Progress,
}

/// Model weights plus optional named auxiliary tensors (optimizer state).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: EmbeddingModel<T>,
    pub progress: Progress,
    pub aux: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: EmbeddingModel<T>) -> Self {
        Self {
            model,
            progress: Progress::default(),
            aux: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            num_speakers: self.model.num_speakers(),
            model: self.model.dims.clone(),
            pooling: self.model.pooling,
            state: self.progress,
        };
        let text = toml::to_string(&header)
            .map_err(|e| Error::Format(format!("cannot render checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        let params = self.model.named_params();
        put_u32(&mut out, params.len() + self.aux.len())?;
        for (name, t) in params.iter().map(|(n, t)| (n.as_str(), *t)).chain(
            self.aux.iter().map(|(n, t)| (n.as_str(), t)),
        ) {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows())?;
            put_u32(&mut out, t.cols())?;
            for &v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let len = r.u32("header length")? as usize;
        let text = std::str::from_utf8(r.take(len, "checkpoint header")?)
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let header: Header =
            toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let mut model = EmbeddingModel::init(&header.model, &header.pooling, header.num_speakers, 0)
            .map_err(|e| Error::Format(format!("checkpoint describes an invalid model: {e}")))?;

        let count = r.u32("tensor count")? as usize;
        let mut loaded = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32("tensor rows")? as usize;
            let cols = r.u32("tensor cols")? as usize;
            let payload = r.take(rows * cols * 8, &format!("tensor `{name}`"))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            loaded.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }

        for (name, slot) in model.named_params_mut() {
            let idx = loaded
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
            let (_, t) = loaded.swap_remove(idx);
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        loaded.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            model,
            progress: header.state,
            aux: loaded,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                what: what.to_string(),
                expected: n,
                actual: available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4-byte slice")))
    }
}
