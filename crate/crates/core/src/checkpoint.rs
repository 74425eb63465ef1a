//! Little-endian binary checkpoint container.
//!
//! ```text
//! magic     4 bytes  "MCKP"
//! version   u32      1
//! in_ch     u32
//! widths    3 x u32
//! step      u64
//! seed      u64
//! blocks    u32      number of named blocks
//! repeated:
//!   name_len u32, name (UTF-8), count u64, count x f64
//! ```
//!
//! Network blocks use the names from [`NetConfig::layout`]. The prior logits
//! are stored as `prior.u` and each normalizer as `ema.<feature>` holding
//! `[running_min, running_max, momentum, initialized]`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{EmaNormalizer, FeatureNormalizers};
use crate::model::{NetConfig, ToyNet};
use crate::prior::PriorWeights;

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ToyNet,
    pub prior: PriorWeights,
    pub normalizers: FeatureNormalizers,
    pub step: u64,
    pub seed: u64,
}

fn ema_block(n: &EmaNormalizer) -> Vec<f64> {
    vec![
        n.running_min,
        n.running_max,
        n.momentum,
        if n.initialized { 1.0 } else { 0.0 },
    ]
}

fn ema_from_block(v: &[f64]) -> Result<EmaNormalizer> {
    if v.len() != 4 {
        return Err(Error::Checkpoint("normalizer block must hold 4 values".into()));
    }
    Ok(EmaNormalizer {
        running_min: v[0],
        running_max: v[1],
        momentum: v[2],
        initialized: v[3] != 0.0,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.net.config();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.in_channels as u32).to_le_bytes());
        for w in cfg.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());

        let mut blocks: Vec<(String, Vec<f64>)> = self
            .net
            .named_blocks()
            .into_iter()
            .map(|(n, v)| (n, v.to_vec()))
            .collect();
        blocks.push(("prior.u".into(), self.prior.logits.to_vec()));
        blocks.push(("ema.roughness".into(), ema_block(&self.normalizers.roughness)));
        blocks.push(("ema.texture".into(), ema_block(&self.normalizers.texture)));

        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, values) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let in_channels = read_u32(&mut r)? as usize;
        let widths = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let config = NetConfig {
            in_channels,
            widths,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step = read_u64(&mut r)?;
        let seed = read_u64(&mut r)?;

        let count = read_u32(&mut r)?;
        let mut blocks = std::collections::HashMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(Error::Checkpoint("truncated block name".into()));
            }
            let (name, rest) = r.split_at(len);
            let name = std::str::from_utf8(name)
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
                .to_string();
            r = rest;
            let n = read_u64(&mut r)? as usize;
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::Checkpoint(format!("truncated block `{name}`")));
            }
            let values: Vec<f64> = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[n * 8..];
            blocks.insert(name, values);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let mut take = |name: &str| {
            blocks
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))
        };
        let mut params = Vec::new();
        for (name, len) in config.layout() {
            let v = take(&name)?;
            if v.len() != len {
                return Err(Error::Checkpoint(format!(
                    "block `{name}` has {} values, expected {len}",
                    v.len()
                )));
            }
            params.extend(v);
        }
        let u = take("prior.u")?;
        let logits: [f64; 4] = u
            .try_into()
            .map_err(|_| Error::Checkpoint("prior.u must hold 4 values".into()))?;
        let roughness = ema_from_block(&take("ema.roughness")?)?;
        let texture = ema_from_block(&take("ema.texture")?)?;

        Ok(Self {
            net: ToyNet::from_parameters(config, params)?,
            prior: PriorWeights::from_logits(logits),
            normalizers: FeatureNormalizers { roughness, texture },
            step,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if r.len() < out.len() {
        return Err(Error::Checkpoint("unexpected end of data".into()));
    }
    let (head, tail) = r.split_at(out.len());
    out.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
