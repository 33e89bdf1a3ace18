//! Versioned binary checkpoints: parameters, optimizer state, and the
//! training position, with f64 payloads stored as raw bits so a round-trip
//! is exact. The config the run was launched with travels along as JSON,
//! plus a hash of it so resuming under a different config is caught early.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adam::{AdamState, Moments};
use crate::diffcore::{ParameterSet, Tensor};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"AVCKPT01";
const VERSION: u32 = 1;

/// FNV-1a over the serialized config; stable across platforms and builds.
pub fn config_hash(config_json: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in config_json.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Everything needed to continue a run exactly where it stopped. All other
/// randomness (masks, negatives, dropout, batch order) is derived statelessly
/// from `seed` and the position fields, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub epoch: u64,
    pub group_in_epoch: u64,
    pub seed: u64,
    pub config_json: String,
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config_json)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, VERSION)?;
        write_u64(&mut w, self.seed)?;
        write_u64(&mut w, self.step)?;
        write_u64(&mut w, self.epoch)?;
        write_u64(&mut w, self.group_in_epoch)?;
        write_u64(&mut w, self.config_hash())?;
        write_str(&mut w, &self.config_json)?;

        write_u64(&mut w, self.params.len() as u64)?;
        for (path, param) in self.params.iter() {
            write_str(&mut w, path)?;
            w.write_all(&[u8::from(param.trainable)])?;
            write_tensor(&mut w, &param.tensor)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(state) => {
                w.write_all(&[1])?;
                write_u64(&mut w, state.step)?;
                write_f64(&mut w, state.beta1)?;
                write_f64(&mut w, state.beta2)?;
                write_f64(&mut w, state.epsilon)?;
                write_u64(&mut w, state.moments.len() as u64)?;
                for (path, m) in &state.moments {
                    write_str(&mut w, path)?;
                    write_tensor(&mut w, &m.first)?;
                    write_tensor(&mut w, &m.second)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} is not supported (want {VERSION})"
            )));
        }
        let seed = read_u64(&mut r)?;
        let step = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        let group_in_epoch = read_u64(&mut r)?;
        let stored_hash = read_u64(&mut r)?;
        let config_json = read_str(&mut r)?;
        if config_hash(&config_json) != stored_hash {
            return Err(Error::format("checkpoint config hash mismatch"));
        }

        let n_params = read_u64(&mut r)? as usize;
        let mut params = ParameterSet::new();
        for _ in 0..n_params {
            let path = read_str(&mut r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let tensor = read_tensor(&mut r)?;
            params.insert_with(path, tensor, flag[0] != 0)?;
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let optimizer = if flag[0] == 0 {
            None
        } else {
            let opt_step = read_u64(&mut r)?;
            let beta1 = read_f64(&mut r)?;
            let beta2 = read_f64(&mut r)?;
            let epsilon = read_f64(&mut r)?;
            let n = read_u64(&mut r)? as usize;
            let mut state = AdamState {
                step: opt_step,
                beta1,
                beta2,
                epsilon,
                moments: Default::default(),
            };
            for _ in 0..n {
                let path = read_str(&mut r)?;
                let first = read_tensor(&mut r)?;
                let second = read_tensor(&mut r)?;
                state.moments.insert(path, Moments { first, second });
            }
            Some(state)
        };
        Ok(Checkpoint {
            params,
            optimizer,
            step,
            epoch,
            group_in_epoch,
            seed,
            config_json,
        })
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    write_u64(w, v.to_bits())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    for &v in t.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u64(r)? as usize;
    if n > 1 << 32 {
        return Err(Error::format("unreasonable string length in checkpoint"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::format("invalid utf-8 in checkpoint"))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::format("unreasonable tensor rank in checkpoint"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 30 {
        return Err(Error::format("unreasonable tensor size in checkpoint"));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(read_f64(r)?);
    }
    Tensor::new(shape, data)
}
