//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SQFG"  u16 version  u8 kind
//! u32 n   n bytes of `key=value` lines, sorted by key
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
//!             f32 values in row-major order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::langmodel::{Cbow, CbowConfig, Nlm, NlmConfig, RnnLm, RnnLmConfig};
use crate::nn::CellKind;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::translate::{Arch, NmtConfig, NmtModel};

pub const MAGIC: &[u8; 4] = b"SQFG";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Nlm = 1,
    Cbow = 2,
    RnnLm = 3,
    Nmt = 4,
}

impl ModelKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(ModelKind::Nlm),
            2 => Ok(ModelKind::Cbow),
            3 => Ok(ModelKind::RnnLm),
            4 => Ok(ModelKind::Nmt),
            _ => Err(Error::Format(format!("unknown model kind tag {tag}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub hyper: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn from_store(kind: ModelKind, hyper: BTreeMap<String, String>, store: &ParamStore) -> Self {
        Checkpoint {
            kind,
            hyper,
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        let mut block = String::new();
        for (k, v) in &self.hyper {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("hyperparameter `{k}` cannot be stored")));
            }
            block.push_str(&format!("{k}={v}\n"));
        }
        put_u32(&mut out, block.len())?;
        out.extend_from_slice(block.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = ModelKind::from_tag(r.take(1)?[0])?;
        let mut hyper = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed hyperparameter line `{line}`")))?;
            hyper.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 2 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { kind, hyper, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.hyper
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks hyperparameter `{key}`")))
    }

    fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("hyperparameter `{key}` is not a non-negative integer")))
    }

    fn vocab(&self, key: &str) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.get(key)?.split(' ').map(str::to_string).collect())
    }

    /// Overwrites every parameter of `store` with the tensor of the same
    /// name; names and shapes must match exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store.id(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let v = store.value_mut(id);
            if v.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    v.shape()
                )));
            }
            *v = t.clone();
        }
        Ok(())
    }
}

/// A trained model together with its vocabularies.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum SavedModel {
    Nlm(Nlm, Vocabulary),
    Cbow(Cbow, Vocabulary),
    RnnLm(RnnLm, Vocabulary),
    Nmt {
        model: NmtModel,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    },
}

fn vocab_string(v: &Vocabulary) -> String {
    v.tokens().join(" ")
}

fn check_vocab(v: &Vocabulary, size: usize) -> Result<()> {
    if v.len() != size {
        return Err(Error::Format(format!("vocabulary of {} tokens for a model of {size}", v.len())));
    }
    Ok(())
}

impl SavedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            SavedModel::Nlm(..) => ModelKind::Nlm,
            SavedModel::Cbow(..) => ModelKind::Cbow,
            SavedModel::RnnLm(..) => ModelKind::RnnLm,
            SavedModel::Nmt { .. } => ModelKind::Nmt,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut h = BTreeMap::new();
        let mut set = |k: &str, v: String| {
            h.insert(k.to_string(), v);
        };
        let store = match self {
            SavedModel::Nlm(m, v) => {
                check_vocab(v, m.config.vocab_size)?;
                set("vocab", vocab_string(v));
                set("order", m.config.order.to_string());
                set("emb_dim", m.config.emb_dim.to_string());
                set("hidden_dim", m.config.hidden_dim.to_string());
                &m.store
            }
            SavedModel::Cbow(m, v) => {
                check_vocab(v, m.config.vocab_size)?;
                set("vocab", vocab_string(v));
                set("window", m.config.window.to_string());
                set("emb_dim", m.config.emb_dim.to_string());
                &m.store
            }
            SavedModel::RnnLm(m, v) => {
                check_vocab(v, m.config.vocab_size)?;
                set("vocab", vocab_string(v));
                set("cell", m.config.cell.name().to_string());
                set("emb_dim", m.config.emb_dim.to_string());
                set("hidden_dim", m.config.hidden_dim.to_string());
                &m.store
            }
            SavedModel::Nmt {
                model,
                src_vocab,
                tgt_vocab,
            } => {
                let c = &model.config;
                check_vocab(src_vocab, c.src_vocab_size)?;
                check_vocab(tgt_vocab, c.tgt_vocab_size)?;
                set("src_vocab", vocab_string(src_vocab));
                set("tgt_vocab", vocab_string(tgt_vocab));
                set("arch", c.arch.name().to_string());
                set("cell", c.cell.name().to_string());
                set("dim", c.dim.to_string());
                set("emb_dim", c.emb_dim.to_string());
                set("att_dim", c.att_dim.to_string());
                &model.store
            }
        };
        Ok(Checkpoint::from_store(self.kind(), h, store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(match ck.kind {
            ModelKind::Nlm => {
                let vocab = ck.vocab("vocab")?;
                let mut m = Nlm::new(
                    NlmConfig {
                        vocab_size: vocab.len(),
                        order: ck.get_usize("order")?,
                        emb_dim: ck.get_usize("emb_dim")?,
                        hidden_dim: ck.get_usize("hidden_dim")?,
                    },
                    0,
                )?;
                ck.apply_to(&mut m.store)?;
                SavedModel::Nlm(m, vocab)
            }
            ModelKind::Cbow => {
                let vocab = ck.vocab("vocab")?;
                let mut m = Cbow::new(
                    CbowConfig {
                        vocab_size: vocab.len(),
                        window: ck.get_usize("window")?,
                        emb_dim: ck.get_usize("emb_dim")?,
                    },
                    0,
                )?;
                ck.apply_to(&mut m.store)?;
                SavedModel::Cbow(m, vocab)
            }
            ModelKind::RnnLm => {
                let vocab = ck.vocab("vocab")?;
                let mut m = RnnLm::new(
                    RnnLmConfig {
                        vocab_size: vocab.len(),
                        cell: CellKind::parse(ck.get("cell")?)?,
                        emb_dim: ck.get_usize("emb_dim")?,
                        hidden_dim: ck.get_usize("hidden_dim")?,
                    },
                    0,
                )?;
                ck.apply_to(&mut m.store)?;
                SavedModel::RnnLm(m, vocab)
            }
            ModelKind::Nmt => {
                let src_vocab = ck.vocab("src_vocab")?;
                let tgt_vocab = ck.vocab("tgt_vocab")?;
                let mut model = NmtModel::new(
                    NmtConfig {
                        src_vocab_size: src_vocab.len(),
                        tgt_vocab_size: tgt_vocab.len(),
                        arch: Arch::parse(ck.get("arch")?)?,
                        cell: CellKind::parse(ck.get("cell")?)?,
                        dim: ck.get_usize("dim")?,
                        emb_dim: ck.get_usize("emb_dim")?,
                        att_dim: ck.get_usize("att_dim")?,
                    },
                    0,
                )?;
                ck.apply_to(&mut model.store)?;
                SavedModel::Nmt {
                    model,
                    src_vocab,
                    tgt_vocab,
                }
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::build((0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().iter().map(String::as_str), None, 1)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let v = vocab(6);
        let m = RnnLm::new(
            RnnLmConfig {
                vocab_size: v.len(),
                cell: CellKind::Lstm,
                emb_dim: 3,
                hidden_dim: 4,
            },
            9,
        )
        .unwrap();
        let first = SavedModel::RnnLm(m, v).to_checkpoint().unwrap().to_bytes().unwrap();
        let loaded = SavedModel::from_checkpoint(&Checkpoint::from_bytes(&first).unwrap()).unwrap();
        let second = loaded.to_checkpoint().unwrap().to_bytes().unwrap();
        assert_eq!(first, second);
        assert_eq!(&first[..4], b"SQFG");
    }

    #[test]
    fn rejects_bad_headers() {
        let v = vocab(3);
        let m = Cbow::new(
            CbowConfig {
                vocab_size: v.len(),
                window: 2,
                emb_dim: 2,
            },
            0,
        )
        .unwrap();
        let bytes = SavedModel::Cbow(m, v).to_checkpoint().unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
