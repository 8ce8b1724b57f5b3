//! Checkpoint container.
//!
//! Layout: magic `VIARCKPT`, `u32` version, `u32` header length and a JSON
//! header, `u32` section count, then sections of
//! `u32 name_len | name | u32 ndim | ndim × u32 | u32 len | len × f32`,
//! all little-endian. Values are stored as raw `f32` bit patterns, so a
//! load followed by a save reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelShape};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::tokenizer::{read_u32, CodeBook, PatchCodec, Tokenizer};
use crate::trainer::{OptimizerState, TrainerState};

pub const MAGIC: &[u8; 8] = b"VIARCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub shape: ModelShape,
    pub patch: usize,
    pub channels: usize,
    pub step: u64,
    pub has_trainer: bool,
}

/// Everything needed to resume training or to sample.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tokenizer: Tokenizer,
    pub model: Model,
    pub trainer: Option<TrainerState>,
    pub step: u64,
}

struct Section {
    name: String,
    shape: Vec<usize>,
    bits: Vec<u32>,
}

impl Section {
    fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            bits: t.data().iter().map(|&v| (v as f32).to_bits()).collect(),
        }
    }

    fn words(name: impl Into<String>, w: Vec<u32>) -> Self {
        Self {
            name: name.into(),
            shape: vec![w.len()],
            bits: w,
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            self.shape.clone(),
            self.bits.iter().map(|&b| f64::from(f32::from_bits(b))).collect(),
        )
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

impl Checkpoint {
    fn sections(&self) -> Vec<Section> {
        let c = &self.tokenizer.codec;
        let mut s = vec![
            Section::tensor("tokenizer.encoder", c.encoder()),
            Section::tensor("tokenizer.encoder_bias", c.encoder_bias()),
            Section::tensor("tokenizer.decoder", c.decoder()),
            Section::tensor("tokenizer.decoder_bias", c.decoder_bias()),
            Section::tensor("tokenizer.codebook", self.tokenizer.book.entries()),
        ];
        for (_, name, t) in self.model.params.iter() {
            s.push(Section::tensor(format!("param.{name}"), t));
        }
        if let Some(tr) = &self.trainer {
            for (i, (_, name, _)) in self.model.params.iter().enumerate() {
                s.push(Section::tensor(format!("adam.m.{name}"), &tr.opt.first[i]));
                s.push(Section::tensor(format!("adam.v.{name}"), &tr.opt.second[i]));
            }
            s.push(Section::words("rng.data", RngState::capture(&tr.data_rng).to_words()));
            s.push(Section::words("rng.iters", RngState::capture(&tr.iters_rng).to_words()));
        }
        s
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = CheckpointHeader {
            shape: self.model.shape.clone(),
            patch: self.tokenizer.codec.patch(),
            channels: self.tokenizer.codec.channels(),
            step: self.step,
            has_trainer: self.trainer.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_u32(&mut w, json.len())?;
        w.write_all(&json)?;
        let sections = self.sections();
        write_u32(&mut w, sections.len())?;
        let mut buf = Vec::new();
        for s in &sections {
            buf.clear();
            write_u32(&mut buf, s.name.len())?;
            buf.extend_from_slice(s.name.as_bytes());
            write_u32(&mut buf, s.shape.len())?;
            for &d in &s.shape {
                write_u32(&mut buf, d)?;
            }
            write_u32(&mut buf, s.bits.len())?;
            for b in &s.bits {
                buf.extend_from_slice(&b.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let magic = read_bytes(&mut r, 8)?;
        if magic != MAGIC {
            return Err(Error::Format("not a VIARCKPT checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let hlen = read_u32(&mut r)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(&read_bytes(&mut r, hlen)?)?;
        let count = read_u32(&mut r)? as usize;
        let mut sections = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, nlen)?)
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = read_u32(&mut r)? as usize;
            if shape.iter().product::<usize>() != len {
                return Err(Error::Format(format!("section `{name}` has inconsistent length")));
            }
            let raw = read_bytes(&mut r, 4 * len)?;
            let bits = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            sections.insert(name.clone(), Section { name, shape, bits });
        }
        let mut take = |name: &str| {
            sections
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing section `{name}`")))
        };
        let codec = PatchCodec::new(
            header.patch,
            header.channels,
            take("tokenizer.encoder")?.to_tensor()?,
            take("tokenizer.encoder_bias")?.to_tensor()?,
            take("tokenizer.decoder")?.to_tensor()?,
            take("tokenizer.decoder_bias")?.to_tensor()?,
        )?;
        let book = CodeBook::new(take("tokenizer.codebook")?.to_tensor()?)?;
        let tokenizer = Tokenizer::new(codec, book, header.shape.hierarchy.clone())?;
        let mut missing = None;
        let model = Model::from_named(header.shape.clone(), |n| {
            match take(&format!("param.{n}")).and_then(|s| s.to_tensor()) {
                Ok(t) => Some(t),
                Err(e) => {
                    missing.get_or_insert(e);
                    None
                }
            }
        });
        let model = match (model, missing) {
            (_, Some(e)) | (Err(e), None) => return Err(e),
            (Ok(m), None) => m,
        };
        let trainer = if header.has_trainer {
            let mut first = Vec::with_capacity(model.params.len());
            let mut second = Vec::with_capacity(model.params.len());
            for (_, name, t) in model.params.iter() {
                for (kind, dst) in [("m", &mut first), ("v", &mut second)] {
                    let m = take(&format!("adam.{kind}.{name}"))?.to_tensor()?;
                    if m.shape() != t.shape() {
                        return Err(Error::Format(format!("moment `{name}` has the wrong shape")));
                    }
                    dst.push(m);
                }
            }
            let rng = |s: Section| {
                RngState::from_words(&s.bits)
                    .map(|st| st.restore())
                    .ok_or_else(|| Error::Format(format!("bad rng section `{}`", s.name)))
            };
            Some(TrainerState {
                opt: OptimizerState {
                    first,
                    second,
                    step: header.step,
                },
                data_rng: rng(take("rng.data")?)?,
                iters_rng: rng(take("rng.iters")?)?,
            })
        } else {
            None
        };
        Ok(Self {
            tokenizer,
            model,
            trainer,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
