//! Binary training checkpoints.
//!
//! Layout, little-endian:
//! ```text
//! "FCKP" u16 version
//! u32 len, config text (key=value lines)
//! u64 epoch  u64 adam_step  f64 best_iou
//! u32 count, then per parameter:
//!     u32 len, name, FTNS value, FTNS first moment, FTNS second moment
//! ```
//! Shuffling and augmentation are pure functions of `(train.seed, epoch,
//! index)`, so the seed in the config and the epoch counter are the whole
//! random state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_ftns, write_ftns, Tensor};

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub name: String,
    pub value: Tensor<f32>,
    pub first: Tensor<f32>,
    pub second: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub adam_step: u64,
    pub best_iou: f64,
    pub params: Vec<ParamState>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> std::result::Result<[u8; N], String> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(b)
}

fn read_str<R: Read>(r: &mut R) -> std::result::Result<String, String> {
    let len = u32::from_le_bytes(read_exact(r)?) as usize;
    if len > 1 << 24 {
        return Err(format!("string length {len} is implausible"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| e.to_string())?;
    String::from_utf8(buf).map_err(|e| e.to_string())
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.config.to_text())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.adam_step.to_le_bytes())?;
        w.write_all(&self.best_iou.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            write_str(w, &p.name)?;
            write_ftns(w, &p.value)?;
            write_ftns(w, &p.first)?;
            write_ftns(w, &p.second)?;
        }
        Ok(())
    }

    fn read_inner<R: Read>(r: &mut R) -> std::result::Result<Result<Checkpoint>, String> {
        if &read_exact::<4, _>(r)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u16::from_le_bytes(read_exact(r)?);
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let config = match RunConfig::parse(&read_str(r)?) {
            Ok(c) => c,
            Err(e) => return Ok(Err(e)),
        };
        let epoch = u64::from_le_bytes(read_exact(r)?);
        let adam_step = u64::from_le_bytes(read_exact(r)?);
        let best_iou = f64::from_le_bytes(read_exact(r)?);
        let count = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_str(r)?;
            let value = read_ftns(r)?;
            let first = read_ftns(r)?;
            let second = read_ftns(r)?;
            if first.shape() != value.shape() || second.shape() != value.shape() {
                return Err(format!("{name}: optimizer state shape differs from the parameter"));
            }
            params.push(ParamState {
                name,
                value,
                first,
                second,
            });
        }
        Ok(Ok(Checkpoint {
            config,
            epoch,
            adam_step,
            best_iou,
            params,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_inner(&mut BufReader::new(file)).map_err(|r| Error::format(path, r))?
    }
}
