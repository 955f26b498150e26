//! Binary model snapshots.
//!
//! Layout, all integers little-endian u64 unless noted:
//!
//! ```text
//! "ACLP"                      4 bytes magic
//! version                     u32
//! sha256(body)                32 bytes
//! body:
//!   config JSON               len + bytes   (encoder dimensions)
//!   config snapshot text      len + bytes   (effective run settings)
//!   vocabulary                len + bytes   (one token per line)
//!   template bank hash        len + bytes
//!   organ-station map hash    len + bytes
//!   tensor count              u64
//!   per tensor, sorted by name:
//!     name                    len + bytes
//!     rank, then each dim     u64
//!     values                  f32 little-endian
//! ```
//!
//! The digest covers the whole body, so any post-header corruption is
//! caught; magic and version guard the header itself. Loading validates the
//! tensor set against the embedded config's parameter catalog, so a
//! checkpoint can never silently under- or over-populate a model.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoders::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::labels::hex;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"ACLP";
pub const VERSION: u32 = 1;

/// Everything needed to evaluate or resume a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Canonical `key = value` echo of the settings that produced this model.
    pub config_text: String,
    pub vocab: Vocabulary,
    pub template_bank_hash: String,
    pub organ_map_hash: String,
    pub params: Params<f32>,
}

impl Checkpoint {
    /// Short provenance tag: body digest prefix of the serialized form.
    pub fn tag(&self) -> String {
        let body = encode_body(self);
        hex(&Sha256::digest(&body))[..12].to_string()
    }
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_bytes(out: &mut Vec<u8>, b: &[u8]) {
    push_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn encode_body(ckpt: &Checkpoint) -> Vec<u8> {
    let mut body = Vec::new();
    let config_json =
        serde_json::to_string(&ckpt.config).expect("model config serializes");
    push_bytes(&mut body, config_json.as_bytes());
    push_bytes(&mut body, ckpt.config_text.as_bytes());
    push_bytes(&mut body, ckpt.vocab.to_lines().as_bytes());
    push_bytes(&mut body, ckpt.template_bank_hash.as_bytes());
    push_bytes(&mut body, ckpt.organ_map_hash.as_bytes());

    push_u64(&mut body, ckpt.params.len() as u64);
    for (name, tensor) in ckpt.params.iter() {
        push_bytes(&mut body, name.as_bytes());
        push_u64(&mut body, tensor.shape().len() as u64);
        for &d in tensor.shape() {
            push_u64(&mut body, d as u64);
        }
        for &x in tensor.data() {
            body.extend_from_slice(&x.to_le_bytes());
        }
    }
    body
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let body = encode_body(ckpt);
    let mut out = Vec::with_capacity(body.len() + 40);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Byte reader that reports the offset of whatever it failed to read.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated reading {what} at offset {} (need {n} bytes, have {})",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        // A length can never exceed what remains; catches corrupt lengths
        // before they drive huge allocations.
        if v > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Format(format!(
                "implausible {what} length {v} at offset {}",
                self.pos - 8
            )));
        }
        Ok(v as usize)
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.len(what)?;
        self.take(n, what)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let offset = self.pos;
        let b = self.bytes(what)?;
        String::from_utf8(b.to_vec()).map_err(|_| {
            Error::Format(format!("{what} at offset {offset} is not UTF-8"))
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:02x?} at offset 0, expected {MAGIC:02x?}"
        )));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version(format!(
            "checkpoint format v{version}, this build reads v{VERSION}"
        )));
    }
    let digest = r.take(32, "digest")?;
    let body = &buf[r.pos..];
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format(format!(
            "body checksum mismatch over {} bytes from offset {}",
            body.len(),
            r.pos
        )));
    }

    let config_json = r.string("config")?;
    let config: ModelConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::Format(format!("config JSON: {e}")))?;
    let config_text = r.string("config snapshot")?;
    let vocab_text = r.string("vocabulary")?;
    let vocab = Vocabulary::from_lines(&vocab_text);
    let template_bank_hash = r.string("template bank hash")?;
    let organ_map_hash = r.string("organ-station map hash")?;

    let count = r.u64("tensor count")? as usize;
    let mut map: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for i in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u64("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor values")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if map.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!(
                "duplicate tensor {name:?} (blob {i})"
            )));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes at offset {}",
            buf.len() - r.pos,
            r.pos
        )));
    }

    if vocab.len() != config.text.vocab_size {
        return Err(Error::Data(format!(
            "embedded vocabulary has {} tokens, config expects {}",
            vocab.len(),
            config.text.vocab_size
        )));
    }
    let params = Params::from_map(&config, map)?;
    Ok(Checkpoint {
        config,
        config_text,
        vocab,
        template_bank_hash,
        organ_map_hash,
        params,
    })
}
