//! Binary model file: magic "SNMT", format version, a UTF-8 metadata block
//! with the model configuration, a tensor table (little-endian f32,
//! row-major), and optional named bitset blocks holding prune masks and
//! frozen-row sets. Save -> load -> save is byte-identical.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{FeatureSpec, ModelConfig, NmtModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SNMT";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(self.pos + n - self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::ModelFile("non-UTF-8 string".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn feature_list(specs: &[FeatureSpec]) -> String {
    specs
        .iter()
        .map(|f| format!("{}:{}", f.name, f.n_values))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_features(s: &str) -> Result<Vec<FeatureSpec>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|f| {
            let (name, n) = f
                .split_once(':')
                .ok_or_else(|| Error::ModelFile(format!("bad feature spec: {f}")))?;
            Ok(FeatureSpec {
                name: name.to_string(),
                n_values: n
                    .parse()
                    .map_err(|_| Error::ModelFile(format!("bad feature count: {f}")))?,
            })
        })
        .collect()
}

fn metadata_text(m: &NmtModel<f32>) -> String {
    let c = &m.config;
    format!(
        "src_vocab={}\ntgt_vocab={}\nembed_size={}\nrnn_size={}\nnum_layers={}\n\
         bidirectional={}\ndropout={}\nmax_len={}\nsrc_features={}\ntgt_features={}\n\
         masks={}\nfrozen={}\n",
        c.src_vocab,
        c.tgt_vocab,
        c.embed_size,
        c.rnn_size,
        c.num_layers,
        c.bidirectional,
        c.dropout,
        c.max_len,
        feature_list(&c.src_features),
        feature_list(&c.tgt_features),
        m.masks.len(),
        m.frozen_rows.len(),
    )
}

fn parse_metadata(text: &str) -> Result<ModelConfig> {
    let mut kv = IndexMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::ModelFile(format!("bad metadata line: {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::ModelFile(format!("missing metadata key: {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::ModelFile(format!("bad metadata value for {k}")))
    };
    Ok(ModelConfig {
        src_vocab: num("src_vocab")?,
        tgt_vocab: num("tgt_vocab")?,
        embed_size: num("embed_size")?,
        rnn_size: num("rnn_size")?,
        num_layers: num("num_layers")?,
        bidirectional: get("bidirectional")? == "true",
        dropout: get("dropout")?
            .parse()
            .map_err(|_| Error::ModelFile("bad dropout".into()))?,
        max_len: num("max_len")?,
        src_features: parse_features(get("src_features")?)?,
        tgt_features: parse_features(get("tgt_features")?)?,
    })
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

/// Serialize a model to bytes. Tensors and bitsets are written in their map
/// order, which `NmtModel::new` and the pruner keep deterministic, so equal
/// models produce equal bytes.
pub fn save_model(model: &NmtModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_string(&mut out, &metadata_text(model));
    put_u32(&mut out, model.params.len() as u32);
    for (name, t) in &model.params {
        put_string(&mut out, name);
        put_u32(&mut out, t.dims.len() as u32);
        for &d in &t.dims {
            put_u32(&mut out, d as u32);
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bitsets: Vec<(String, &Vec<bool>)> = model
        .masks
        .iter()
        .map(|(k, v)| (format!("mask.{k}"), v))
        .chain(
            model
                .frozen_rows
                .iter()
                .map(|(k, v)| (format!("frozen.{k}"), v)),
        )
        .collect();
    put_u32(&mut out, bitsets.len() as u32);
    for (name, bits) in bitsets {
        put_string(&mut out, &name);
        put_u32(&mut out, bits.len() as u32);
        out.extend_from_slice(&pack_bits(bits));
    }
    out
}

pub fn load_model(bytes: &[u8]) -> Result<NmtModel<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let config = parse_metadata(&r.string()?)?;
    let n_tensors = r.u32()? as usize;
    let mut params = IndexMap::new();
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| Error::ModelFile(format!("tensor {name}: {e}")))?;
        params.insert(name, t);
    }
    let n_bitsets = r.u32()? as usize;
    let mut masks = IndexMap::new();
    let mut frozen_rows = IndexMap::new();
    for _ in 0..n_bitsets {
        let name = r.string()?;
        let n = r.u32()? as usize;
        let bytes = r.take(n.div_ceil(8))?;
        let bits = unpack_bits(bytes, n);
        if let Some(k) = name.strip_prefix("mask.") {
            masks.insert(k.to_string(), bits);
        } else if let Some(k) = name.strip_prefix("frozen.") {
            frozen_rows.insert(k.to_string(), bits);
        } else {
            return Err(Error::ModelFile(format!("unknown bitset kind: {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFile(format!(
            "{} trailing bytes after model data",
            bytes.len() - r.pos
        )));
    }
    Ok(NmtModel {
        config,
        params,
        masks,
        frozen_rows,
    })
}
