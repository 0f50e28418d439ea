//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "LEMMEDCK"
//! version      u32
//! config       u32 embedding, u32 hidden, u32 layers, f64 dropout,
//!              u32 source vocab, u32 target vocab, u64 seed
//! vocab        u32 min_freq, source table, target table
//!              table = u32 count, then per symbol a u8 kind and payload
//! tensors      u32 count, then per tensor u32 rows, u32 cols, rows*cols f32
//! checksum     u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{Model, ModelConfig, Params};
use crate::snippets::{Symbol, SymbolTable, Vocab};

pub const MAGIC: &[u8; 8] = b"LEMMEDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint checksum mismatch (file truncated or corrupt)")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
}

/// A model together with the vocabularies it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<(), CheckpointError> {
        check_vocab(&self.model.config, vocab)?;
        if self.vocab != *vocab {
            return Err(CheckpointError::VocabMismatch(
                "symbol tables differ from the checkpoint's".into(),
            ));
        }
        Ok(())
    }
}

fn check_vocab(cfg: &ModelConfig, vocab: &Vocab) -> Result<(), CheckpointError> {
    if cfg.source_vocab_size != vocab.source.len() || cfg.target_vocab_size != vocab.target.len() {
        return Err(CheckpointError::VocabMismatch(format!(
            "model expects {}/{} source/target symbols, vocabulary has {}/{}",
            cfg.source_vocab_size,
            cfg.target_vocab_size,
            vocab.source.len(),
            vocab.target.len()
        )));
    }
    Ok(())
}

pub fn save_model(model: &Model, vocab: &Vocab, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    check_vocab(&model.config, vocab)?;
    let bytes = to_bytes(model, vocab);
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a checkpoint; with `expected`, also verifies the vocabulary matches.
pub fn load_model(path: impl AsRef<Path>, expected: Option<&Vocab>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ck = from_bytes(&bytes)?;
    if let Some(v) = expected {
        ck.check_vocab(v)?;
    }
    Ok(ck)
}

pub fn to_bytes(model: &Model, vocab: &Vocab) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    put_u32(&mut w, FORMAT_VERSION);
    let c = &model.config;
    for v in [c.embedding_size, c.hidden_units, c.layers] {
        put_u32(&mut w, v as u32);
    }
    w.extend_from_slice(&c.dropout.to_le_bytes());
    put_u32(&mut w, c.source_vocab_size as u32);
    put_u32(&mut w, c.target_vocab_size as u32);
    w.extend_from_slice(&c.seed.to_le_bytes());

    put_u32(&mut w, vocab.min_freq as u32);
    put_table(&mut w, &vocab.source);
    put_table(&mut w, &vocab.target);

    let tensors = model.params.tensors();
    put_u32(&mut w, tensors.len() as u32);
    for t in tensors {
        put_u32(&mut w, t.nrows() as u32);
        put_u32(&mut w, t.ncols() as u32);
        for &x in t.iter() {
            w.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&w);
    put_u32(&mut w, crc);
    w
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(CheckpointError::Checksum);
    }

    let config = ModelConfig {
        embedding_size: r.u32()? as usize,
        hidden_units: r.u32()? as usize,
        layers: r.u32()? as usize,
        dropout: f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
        source_vocab_size: r.u32()? as usize,
        target_vocab_size: r.u32()? as usize,
        seed: u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let min_freq = r.u32()? as usize;
    let source = r.table()?;
    let target = r.table()?;
    let vocab = Vocab { source, target, min_freq };
    check_vocab(&config, &vocab)?;

    let mut params = Params::zeros(&config);
    let count = r.u32()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} tensors, found {count}",
            slots.len()
        )));
    }
    for slot in slots.iter_mut() {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != slot.dim() {
            return Err(CheckpointError::Malformed(format!(
                "tensor shape {rows}x{cols}, expected {:?}",
                slot.dim()
            )));
        }
        let raw = r.take(rows * cols * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        **slot = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    drop(slots);
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Checkpoint {
        model: Model { config, params },
        vocab,
    })
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_table(w: &mut Vec<u8>, table: &SymbolTable) {
    put_u32(w, table.len() as u32);
    for s in table.symbols() {
        match s {
            Symbol::Pad => w.push(0),
            Symbol::Unknown => w.push(1),
            Symbol::Start => w.push(2),
            Symbol::End => w.push(3),
            Symbol::WordBoundary => w.push(4),
            Symbol::Char(c) => {
                w.push(5);
                put_u32(w, *c as u32);
            }
            Symbol::Grammeme(g) => {
                w.push(6);
                put_u32(w, g.len() as u32);
                w.extend_from_slice(g.as_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(CheckpointError::Malformed("unexpected end of data".into())),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn table(&mut self) -> Result<SymbolTable, CheckpointError> {
        let n = self.u32()? as usize;
        let mut symbols = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let kind = self.take(1)?[0];
            let s = match kind {
                0 => Symbol::Pad,
                1 => Symbol::Unknown,
                2 => Symbol::Start,
                3 => Symbol::End,
                4 => Symbol::WordBoundary,
                5 => {
                    let v = self.u32()?;
                    Symbol::Char(char::from_u32(v).ok_or_else(|| {
                        CheckpointError::Malformed(format!("invalid char {v:#x}"))
                    })?)
                }
                6 => {
                    let len = self.u32()? as usize;
                    let raw = self.take(len)?;
                    let g = std::str::from_utf8(raw)
                        .map_err(|_| CheckpointError::Malformed("grammeme is not UTF-8".into()))?;
                    Symbol::Grammeme(g.to_string())
                }
                k => return Err(CheckpointError::Malformed(format!("unknown symbol kind {k}"))),
            };
            symbols.push(s);
        }
        let table = SymbolTable::from_symbols(symbols.iter().cloned());
        if table.symbols() != symbols.as_slice() {
            return Err(CheckpointError::Malformed("symbol table is not canonical".into()));
        }
        Ok(table)
    }
}
