//! Checkpoint file: `u64` LE header length, JSON header, then all parameters as LE `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{ModelConfig, ModelParams};

const FORMAT: &str = "gise-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

pub fn checkpoint_bytes(model: &ModelParams) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut offset = 0;
    model.visit(&mut |name, t| {
        params.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    });
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        params,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let fmt = |m: String| Error::Format(m);
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| fmt("checkpoint shorter than its length prefix".into()))?
        .try_into()
        .unwrap();
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| fmt(format!("header length {hlen} exceeds file size")))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(fmt(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let blob = &bytes[8 + hlen..];
    let mut model = ModelParams::init(&header.config, 0)?;
    let expected = model.named_shapes();
    if expected.len() != header.params.len() {
        return Err(fmt(format!("{} parameters in file, config needs {}", header.params.len(), expected.len())));
    }
    let mut end = 0;
    for ((name, shape), e) in expected.iter().zip(&header.params) {
        if *name != e.name || *shape != e.shape || e.offset != end {
            return Err(fmt(format!("registry entry {} {:?} @{} does not match {name} {shape:?}", e.name, e.shape, e.offset)));
        }
        end += shape.iter().product::<usize>() * 8;
    }
    if blob.len() != end {
        return Err(fmt(format!("blob has {} bytes, registry needs {end}", blob.len())));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().unwrap();
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("checkpoint parameter".into()));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let m = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        let b = checkpoint_bytes(&m).unwrap();
        let back = checkpoint_from_bytes(&b).unwrap();
        assert_eq!(checkpoint_bytes(&back).unwrap(), b);
        assert!(matches!(checkpoint_from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
        assert!(checkpoint_from_bytes(&b[..4]).is_err());
    }
}
