//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "YORO1" (5 bytes)
//! u32    header length
//! bytes  header JSON { config, vocab }
//! u32    parameter count
//! per parameter:
//!   u32      name length, then the UTF-8 name
//!   u32      rank, then rank u32 extents
//!   f64 LE   row-major values
//! ```
//!
//! Values are written bit-exactly; a save/load round trip reproduces
//! every parameter.

use crate::config::ModelConfig;
use crate::data::Vocabulary;
use crate::model::Model;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"YORO1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn save(path: &Path, model: &Model, vocab: &Vocabulary) -> Result<()> {
    let header = Header { config: model.config.clone(), vocab: vocab.words().to_vec() };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, header_json.len());
    out.extend_from_slice(&header_json);
    push_u32(&mut out, model.store.len());
    for p in model.store.iter() {
        push_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        push_u32(&mut out, p.shape.len());
        for &d in &p.shape {
            push_u32(&mut out, d);
        }
        for &v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format("truncated checkpoint".into()));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<(Model, Vocabulary)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(5)? != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let header_len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let vocab = Vocabulary::from_words(header.vocab)?;

    let mut model = Model::new(header.config, 0)?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("non-UTF-8 parameter name".into()))?
            .to_string();
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let numel: usize = shape.iter().product();
        let values = r.f64s(numel)?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
        let param = model.store.get_mut(id);
        if param.shape != shape {
            return Err(Error::Format(format!(
                "parameter {name:?}: shape {shape:?} vs expected {:?}",
                param.shape
            )));
        }
        param.value = values;
    }
    if r.at != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok((model, vocab))
}
