//! Binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "DCCNCKPT"  u32 version  u64 header_len  header (JSON: config + vocabularies)
//! u64 n_params
//! n_params x { u32 name_len  name  u8 trainable  u32 rank  u64 dims[rank]  f64 data[prod(dims)] }
//! ```
//!
//! Every load error reports the byte offset at which parsing failed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DCCNCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    src_vocab: Vec<String>,
    tgt_vocab: Vec<String>,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = Header {
        model: model.config.clone(),
        src_vocab: model.src_vocab.tokens().to_vec(),
        tgt_vocab: model.tgt_vocab.tokens().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for id in model.store.ids() {
        let name = model.store.name(id).as_bytes();
        let t = model.store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(model.store.is_trainable(id) as u8);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(format!("truncated {what}"), self.pos as u64));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)", 0));
    }
    let at = r.pos as u64;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}"), at));
    }
    let at = r.pos as u64;
    let header_len = r.u64("header length")? as usize;
    if header_len > r.remaining() {
        return Err(Error::format(format!("header length {header_len} exceeds file"), at));
    }
    let at = r.pos as u64;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::format(format!("bad header: {e}"), at))?;
    let mut model = Model::new(header.model, Vocab::from_tokens(header.src_vocab), Vocab::from_tokens(header.tgt_vocab))
        .map_err(|e| Error::format(format!("header describes an invalid model: {e}"), at))?;

    let at = r.pos as u64;
    let count = r.u64("parameter count")? as usize;
    if count != model.store.len() {
        return Err(Error::format(format!("{count} parameters stored, model has {}", model.store.len()), at));
    }
    let mut seen = vec![false; model.store.len()];
    for _ in 0..count {
        let at = r.pos as u64;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::format("parameter name is not UTF-8", at + 4))?
            .to_string();
        let id = model
            .store
            .lookup(&name)
            .ok_or_else(|| Error::format(format!("unknown parameter `{name}`"), at))?;
        let slot = id.index();
        if seen[slot] {
            return Err(Error::format(format!("parameter `{name}` repeated"), at));
        }
        seen[slot] = true;
        let at = r.pos as u64;
        let trainable = r.u8("trainable flag")?;
        if trainable > 1 || (trainable == 1) != model.store.is_trainable(id) {
            return Err(Error::format(format!("trainable flag of `{name}` does not match the model"), at));
        }
        let at = r.pos as u64;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        if dims != model.store.get(id).shape() {
            return Err(Error::format(
                format!("`{name}` has shape {dims:?}, model expects {:?}", model.store.get(id).shape()),
                at,
            ));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8, "parameter data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        *model.store.get_mut(id) = Tensor::new(dims, data)?;
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes", r.remaining()), r.pos as u64));
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
