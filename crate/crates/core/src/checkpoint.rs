//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"DACTCKPT"  u32 version
//! u32 n  n bytes of UTF-8 header, one `key=value` per line
//! u32 records
//! per record: u32 name length, name, u32 rank, u64 dims.., f64 values..
//! ```
//!
//! The header carries the config (one line per key, JSON values) and the
//! vocabulary and label map as JSON arrays.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::LabelMap;
use crate::error::{Error, Result};
use crate::model::{Model, TrainConfig};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"DACTCKPT";
pub const VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn header_text(model: &Model) -> Result<String> {
    let mut lines = Vec::new();
    let config = serde_json::to_value(&model.config)?;
    for (k, v) in config.as_object().expect("config serializes to an object") {
        lines.push(format!("config.{k}={v}"));
    }
    // reserved entries are implied
    lines.push(format!("vocab={}", serde_json::to_string(&model.vocab.tokens()[2..])?));
    lines.push(format!("labels={}", serde_json::to_string(model.labels.names())?));
    Ok(lines.join("\n"))
}

pub fn write_checkpoint<W: Write>(out: &mut W, model: &Model) -> Result<()> {
    out.write_all(MAGIC)?;
    write_u32(out, VERSION)?;
    let header = header_text(model)?;
    write_u32(out, header.len() as u32)?;
    out.write_all(header.as_bytes())?;
    let params = model.named_params();
    write_u32(out, params.len() as u32)?;
    for (name, t) in params {
        write_u32(out, name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        write_u32(out, t.shape().len() as u32)?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut out, model)?;
    out.flush()?;
    Ok(())
}

/// Contents of a checkpoint before they are fitted to a model.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub labels: LabelMap,
    pub params: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} more bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_header(text: &str) -> Result<(TrainConfig, Vocab, LabelMap)> {
    let mut config = serde_json::Map::new();
    let mut vocab = None;
    let mut labels = None;
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("header line without '=': {line:?}")))?;
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("header value for {k}: {e}"));
        let value: serde_json::Value = serde_json::from_str(v).map_err(bad)?;
        if let Some(key) = k.strip_prefix("config.") {
            config.insert(key.to_string(), value);
        } else if k == "vocab" {
            vocab = Some(serde_json::from_value::<Vec<String>>(value).map_err(bad)?);
        } else if k == "labels" {
            labels = Some(serde_json::from_value::<Vec<String>>(value).map_err(bad)?);
        } else {
            return Err(Error::Checkpoint(format!("unknown header key {k:?}")));
        }
    }
    let config: TrainConfig =
        serde_json::from_value(config.into()).map_err(|e| Error::Checkpoint(format!("header config: {e}")))?;
    let vocab = Vocab::from_tokens(vocab.ok_or_else(|| Error::Checkpoint("header lacks vocab".into()))?)?;
    let labels = LabelMap::new(labels.ok_or_else(|| Error::Checkpoint("header lacks labels".into()))?)?;
    Ok((config, vocab, labels))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let n = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(n, "header")?).map_err(|e| Error::Checkpoint(format!("header is not UTF-8: {e}")))?;
    let (config, vocab, labels) = parse_header(header)?;
    let count = r.u32("record count")?;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "record name")?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?;
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 8, &format!("values of {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Checkpoint(format!("record {name}: {e}")))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    Ok(RawCheckpoint {
        version,
        config,
        vocab,
        labels,
        params,
    })
}

/// Copies checkpoint records into `model`, requiring every parameter of
/// the model to be present with the same shape.
pub fn load_into(model: &mut Model, params: &[(String, Tensor)]) -> Result<()> {
    let mut by_name: BTreeMap<&str, &Tensor> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, slot) in model.named_params_mut() {
        let t = by_name
            .remove(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::ParamShape {
                name,
                expected: slot.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("checkpoint has unexpected parameter {extra}")));
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Model> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let raw = parse_checkpoint(&bytes)?;
    let mut model = Model::zeros(raw.config, raw.vocab, raw.labels)?;
    load_into(&mut model, &raw.params)?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&mut std::fs::File::open(path)?)
}
