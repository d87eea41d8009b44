//! Binary checkpoint: the magic `CFLM`, a format version, the model and
//! compression settings, then every tensor as a named little-endian `f32`
//! blob.
//!
//! ```text
//! "CFLM" | version u32 | model: dim blocks heads ffn_mult max_positions layers (u32 each)
//! | vocab: text_size speech_size (u32) | cf: g n_ar n_nar(0 = none) frame_rate mode (u32)
//! | blob count u32 | per blob: name_len u32, name, rank u32, dims u32 x rank, data f32 x prod(dims)
//! ```
//!
//! Blob names are `ar.*` for the AR decoder and `nar.*` for the optional NAR decoder.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{CfConfig, Mode, ModelConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Parameters, Role};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"CFLM";
pub const VERSION: u32 = 1;

/// Everything needed to decode: settings plus one or two parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cf: CfConfig,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub ar: Parameters<f32>,
    pub nar: Option<Parameters<f32>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(bad("file is truncated"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }
}

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn new(cf: CfConfig, ar: Parameters<f32>, nar: Option<Parameters<f32>>) -> Result<Self> {
        if ar.role != Role::Ar || nar.as_ref().is_some_and(|n| n.role != Role::Nar) {
            return Err(bad("decoder roles are swapped"));
        }
        if nar.as_ref().is_some_and(|n| n.model != ar.model || n.vocab != ar.vocab) {
            return Err(bad("AR and NAR decoders disagree on shape"));
        }
        Ok(Self { cf, model: ar.model, vocab: ar.vocab, ar, nar })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let m = self.model;
        for v in [m.dim, m.num_blocks, m.num_heads, m.ffn_mult, m.max_positions, m.num_layers] {
            put(&mut out, v);
        }
        put(&mut out, self.vocab.text_size);
        put(&mut out, self.vocab.speech_size);
        let c = &self.cf;
        for v in [c.g(), c.n_ar(), c.n_nar().unwrap_or(0), c.frame_rate(), c.mode().code() as usize] {
            put(&mut out, v);
        }
        let mut blobs = Vec::new();
        for p in std::iter::once(&self.ar).chain(self.nar.as_ref()) {
            p.for_each(|name, t| blobs.push((format!("{}.{name}", p.role.tag()), t.clone())));
        }
        put(&mut out, blobs.len());
        for (name, t) in blobs {
            put(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put(&mut out, 2);
            put(&mut out, t.rows);
            put(&mut out, t.cols);
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4).map_err(|_| bad("not a checkpoint"))? != MAGIC {
            return Err(bad("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let model = ModelConfig {
            dim: r.usize()?,
            num_blocks: r.usize()?,
            num_heads: r.usize()?,
            ffn_mult: r.usize()?,
            max_positions: r.usize()?,
            num_layers: r.usize()?,
        };
        model.validate().map_err(|e| bad(e.to_string()))?;
        let vocab = Vocabulary::new(r.usize()?, r.usize()?, model.num_layers).map_err(|e| bad(e.to_string()))?;
        let (g, n_ar, n_nar, frame_rate, mode) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.u32()?);
        let mode = Mode::from_code(mode).ok_or_else(|| bad(format!("unknown mode code {mode}")))?;
        let n_nar = (n_nar > 0).then_some(n_nar);
        let cf = CfConfig::new(g, n_ar, n_nar, frame_rate, mode).map_err(|e| bad(e.to_string()))?;

        let count = r.usize()?;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let len = r.usize()?;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("blob name is not UTF-8"))?.to_string();
            let rank = r.usize()?;
            let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("blob too large"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if blobs.insert(name.clone(), (dims, data)).is_some() {
                return Err(bad(format!("duplicate blob {name}")));
            }
        }
        if r.at != bytes.len() {
            return Err(bad("trailing bytes after the last blob"));
        }

        let fill = |role: Role, blobs: &mut BTreeMap<String, (Vec<usize>, Vec<f32>)>| -> Result<Parameters<f32>> {
            let mut p = Parameters::<f32>::init(role, model, vocab, 0).map_err(|e| bad(e.to_string()))?;
            let mut err = None;
            p.for_each_mut(|name, t| {
                let key = format!("{}.{name}", role.tag());
                match blobs.remove(&key) {
                    Some((dims, data)) if dims == [t.rows, t.cols] => *t = Mat::from_vec(t.rows, t.cols, data),
                    Some((dims, _)) => {
                        err.get_or_insert(bad(format!("{key}: shape {dims:?}, expected [{}, {}]", t.rows, t.cols)));
                    }
                    None => {
                        err.get_or_insert(bad(format!("missing blob {key}")));
                    }
                }
            });
            err.map_or(Ok(p), Err)
        };
        let ar = fill(Role::Ar, &mut blobs)?;
        let has_nar = blobs.keys().any(|k| k.starts_with("nar."));
        let nar = if has_nar { Some(fill(Role::Nar, &mut blobs)?) } else { None };
        if let Some(extra) = blobs.keys().next() {
            return Err(bad(format!("unexpected blob {extra}")));
        }
        Checkpoint::new(cf, ar, nar)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
