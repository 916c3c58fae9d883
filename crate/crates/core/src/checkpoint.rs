//! "AMDT" v1 checkpoint format.
//!
//! Layout, all integers little-endian:
//!   magic "AMDT" | u32 version | config record | tensor table
//! Config record: u32 pair count, then (u32 len, name bytes, u32 len,
//! value bytes) per pair. Core config fields come first in fixed order;
//! free-form metadata rides behind them as "meta."-prefixed pairs.
//! Tensor table: u32 count, then per tensor (u32 len, name bytes,
//! u8 dtype tag, u32 rank, u32 extents..., f64 payload). Round trips are
//! bit-exact.

use crate::encoder::{EncoderConfig, EncoderModel, MaskMode, Pooling};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AMDT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn config_pairs(config: &EncoderConfig) -> Vec<(String, String)> {
    vec![
        ("vocab_size".into(), config.vocab_size.to_string()),
        ("d_model".into(), config.d_model.to_string()),
        ("n_layers".into(), config.n_layers.to_string()),
        ("n_heads".into(), config.n_heads.to_string()),
        ("max_len".into(), config.max_len.to_string()),
        (
            "mask".into(),
            match config.mask {
                MaskMode::Causal => "causal".into(),
                MaskMode::Bidirectional => "bidirectional".into(),
            },
        ),
        (
            "pooling".into(),
            match config.pooling {
                Pooling::EosToken => "eos_token".into(),
                Pooling::Mean => "mean".into(),
            },
        ),
    ]
}

fn write_str(out: &mut impl Write, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

pub fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;

    let mut pairs = config_pairs(&model.config);
    for (k, v) in &model.metadata {
        pairs.push((format!("meta.{k}"), v.clone()));
    }
    buf.write_all(&(pairs.len() as u32).to_le_bytes())?;
    for (k, v) in &pairs {
        write_str(&mut buf, k)?;
        write_str(&mut buf, v)?;
    }

    let tensors = model.named_tensors();
    buf.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        write_str(&mut buf, &name)?;
        buf.push(DTYPE_F64);
        buf.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            buf.write_all(&(e as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            buf.write_all(&x.to_le_bytes())?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupted(format!(
                "wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corrupted("non-UTF8 name".into()))
    }

    fn f64_payload(&mut self, count: usize) -> Result<Vec<f64>> {
        let b = self.take(count * 8)?;
        let mut out = Vec::with_capacity(count);
        for chunk in b.chunks_exact(8) {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(chunk);
            out.push(f64::from_le_bytes(raw));
        }
        Ok(out)
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| Error::Format(format!("bad {key} value {value:?}")))
}

pub fn load_model(path: &Path) -> Result<EncoderModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(4).map_err(|_| Error::Format("file shorter than magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }

    let pair_count = r.u32()? as usize;
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for _ in 0..pair_count {
        let k = r.string()?;
        let v = r.string()?;
        if let Some(meta_key) = k.strip_prefix("meta.") {
            metadata.insert(meta_key.to_string(), v);
        } else {
            fields.insert(k, v);
        }
    }
    let get = |k: &str| -> Result<&String> {
        fields.get(k).ok_or_else(|| Error::Format(format!("missing config field {k}")))
    };
    let config = EncoderConfig {
        vocab_size: parse_usize("vocab_size", get("vocab_size")?)?,
        d_model: parse_usize("d_model", get("d_model")?)?,
        n_layers: parse_usize("n_layers", get("n_layers")?)?,
        n_heads: parse_usize("n_heads", get("n_heads")?)?,
        max_len: parse_usize("max_len", get("max_len")?)?,
        mask: match get("mask")?.as_str() {
            "causal" => MaskMode::Causal,
            "bidirectional" => MaskMode::Bidirectional,
            other => return Err(Error::Format(format!("unknown mask mode {other:?}"))),
        },
        pooling: match get("pooling")?.as_str() {
            "eos_token" => Pooling::EosToken,
            "mean" => Pooling::Mean,
            other => return Err(Error::Format(format!("unknown pooling {other:?}"))),
        },
    };
    config.validate().map_err(|e| Error::Format(format!("invalid config: {e}")))?;

    let tensor_count = r.u32()? as usize;
    let mut table: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..tensor_count {
        let name = r.string()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unknown dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_payload(numel)?;
        table.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupted(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = EncoderModel::init(config, 0)?;
    model.metadata = metadata;
    for (name, slot) in model.named_tensors_mut() {
        let loaded = table
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if loaded.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded;
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}
