//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "MATECKPT"
//! version   u32
//! F H D P   u32 × 4
//! seed      u64
//! config    u32 length + UTF-8 fingerprint
//! heads     u8 (0 or 1); if 1: epoch u32, corpus_size u32
//! blocks    u32 count, then per block:
//!           u32 length + UTF-8 name, rows u32, cols u32, rows·cols f64
//! ```
//!
//! Parameter blocks use the encoder block names. When heads are present the
//! blocks `heads.mu` (1×D), `heads.a_bar`, `heads.svd.u`, `heads.svd.s`
//! (1×D), `heads.svd.v` and `heads.proj.<d>` (D×d) follow.

use crate::binio::{get_f64s, get_str, get_u32, get_u64, get_u8, put_f64s, put_str, put_u32, put_u64};
use crate::encoders::{EncoderDims, EncoderParams, BLOCK_NAMES};
use crate::error::{MateError, Result};
use crate::linalg::SvdFactors;
use crate::matryoshka::EpochHeads;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MATECKPT";
const VERSION: usize = 1;
const PROJ_PREFIX: &str = "heads.proj.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub seed: u64,
    pub config_fingerprint: String,
    pub heads: Option<EpochHeads>,
}

fn put_block(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let (r, c) = match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => return Err(MateError::Format(format!("block {name} has rank {}", s.len()))),
    };
    put_str(w, name)?;
    put_u32(w, r)?;
    put_u32(w, c)?;
    put_f64s(w, t.data())
}

fn row_vector(xs: &[f64]) -> Result<Tensor> {
    Tensor::matrix(1, xs.len(), xs.to_vec())
}

impl Checkpoint {
    fn blocks(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .blocks()
            .iter()
            .map(|(n, t)| (n.to_string(), (*t).clone()))
            .collect();
        if let Some(h) = &self.heads {
            out.push(("heads.mu".into(), row_vector(h.mu.data())?));
            out.push(("heads.a_bar".into(), h.a_bar.clone()));
            out.push(("heads.svd.u".into(), h.svd.u.clone()));
            out.push(("heads.svd.s".into(), row_vector(&h.svd.s)?));
            out.push(("heads.svd.v".into(), h.svd.v.clone()));
            for (d, t) in &h.heads {
                out.push((format!("{PROJ_PREFIX}{d}"), t.clone()));
            }
        }
        Ok(out)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let d = self.params.dims;
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        for v in [d.features, d.hidden, d.embed, d.phonemes] {
            put_u32(w, v)?;
        }
        put_u64(w, self.seed)?;
        put_str(w, &self.config_fingerprint)?;
        match &self.heads {
            Some(h) => {
                w.write_all(&[1])?;
                put_u32(w, h.epoch)?;
                put_u32(w, h.corpus_size)?;
            }
            None => w.write_all(&[0])?,
        }
        let blocks = self.blocks()?;
        put_u32(w, blocks.len())?;
        for (name, t) in &blocks {
            put_block(w, name, t)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| MateError::Format("file too short for a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(MateError::Format("not a checkpoint file".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(MateError::Format(format!("unsupported checkpoint version {version}")));
        }
        let dims = EncoderDims {
            features: get_u32(r)?,
            hidden: get_u32(r)?,
            embed: get_u32(r)?,
            phonemes: get_u32(r)?,
        };
        dims.validate()?;
        let seed = get_u64(r)?;
        let config_fingerprint = get_str(r)?;
        let head_meta = match get_u8(r)? {
            0 => None,
            1 => Some((get_u32(r)?, get_u32(r)?)),
            x => return Err(MateError::Format(format!("bad heads flag {x}"))),
        };
        let n = get_u32(r)?;
        let mut blocks = BTreeMap::new();
        for _ in 0..n {
            let name = get_str(r)?;
            let rows = get_u32(r)?;
            let cols = get_u32(r)?;
            let data = get_f64s(r, rows * cols)?;
            if blocks.insert(name.clone(), Tensor::matrix(rows, cols, data)?).is_some() {
                return Err(MateError::Format(format!("duplicate block {name}")));
            }
        }
        fn take(blocks: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
            blocks
                .remove(name)
                .ok_or_else(|| MateError::Format(format!("missing block {name}")))
        }
        let params = EncoderParams::from_blocks(
            dims,
            BLOCK_NAMES.iter().map(|n| take(&mut blocks, n)).collect::<Result<Vec<_>>>()?,
        )
        .map_err(|e| MateError::Format(e.to_string()))?;
        let heads = match head_meta {
            None => None,
            Some((epoch, corpus_size)) => {
                let mu = take(&mut blocks, "heads.mu")?;
                let mu = Tensor::vector(mu.into_data());
                let a_bar = take(&mut blocks, "heads.a_bar")?;
                let u = take(&mut blocks, "heads.svd.u")?;
                let s = take(&mut blocks, "heads.svd.s")?.into_data();
                let v = take(&mut blocks, "heads.svd.v")?;
                let mut heads = BTreeMap::new();
                for name in blocks.keys().cloned().collect::<Vec<_>>() {
                    if let Some(d) = name.strip_prefix(PROJ_PREFIX) {
                        let d: usize = d
                            .parse()
                            .map_err(|_| MateError::Format(format!("bad head name {name}")))?;
                        heads.insert(d, take(&mut blocks, &name)?);
                    }
                }
                Some(EpochHeads {
                    epoch,
                    corpus_size,
                    mu,
                    a_bar,
                    svd: SvdFactors { u, s, v },
                    heads,
                })
            }
        };
        if let Some(extra) = blocks.keys().next() {
            return Err(MateError::Format(format!("unexpected block {extra}")));
        }
        Ok(Self {
            params,
            seed,
            config_fingerprint,
            heads,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}
