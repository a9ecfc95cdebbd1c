//! Binary checkpoints: header, JSON metadata, raw little-endian arrays, CRC32.
//!
//! Layout: `MAGIC | version u32 | scalar bytes u8 | meta len u64 | meta JSON |
//! tensors | crc32 u32`. Tensors are `rows u32 | cols u32 | data`, in a fixed
//! order: parameters (generator, appearance EBM, shape EBM, encoder), then
//! optimiser moments in the same order, then the latent chains by id.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PoseHistogram, TrainConfig, Trainer};
use crate::ad::{Adam, Tensor};
use crate::error::{Error, Result};
use crate::inference::ChainState;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"NLEBMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    iteration: u64,
    rng: RngState,
    pose_hist: Option<PoseHistogram>,
    /// Step counters: generator, appearance EBM, shape EBM, encoder groups.
    adam_steps: Vec<u64>,
    /// `(object id, step counter)` per persistent chain.
    chains: Vec<(u64, u64)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(&(t.rows as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols as u32).to_le_bytes());
    for &v in &t.data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| fmt_err("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor<T: Scalar>(&mut self, want: (usize, usize)) -> Result<Tensor<T>> {
        let (r, c) = (self.u32()? as usize, self.u32()? as usize);
        if (r, c) != want {
            return Err(fmt_err(format!("tensor shape {r}x{c}, expected {}x{}", want.0, want.1)));
        }
        let bytes = self.take(r * c * T::BYTES)?;
        Ok(Tensor::new(
            r,
            c,
            bytes.chunks_exact(T::BYTES).map(T::read_le).collect(),
        ))
    }
}

impl<T: Scalar> Trainer<T> {
    fn param_tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = Vec::new();
        for set in [
            &self.model.gen.params,
            &self.model.ebm_a.params,
            &self.model.ebm_s.params,
        ] {
            v.extend(set.params.iter().map(|p| &p.value));
        }
        if let Some(e) = &self.encoder {
            v.extend(e.params.params.iter().map(|p| &p.value));
        }
        v
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = Vec::new();
        for set in [
            &mut self.model.gen.params,
            &mut self.model.ebm_a.params,
            &mut self.model.ebm_s.params,
        ] {
            v.extend(set.params.iter_mut().map(|p| &mut p.value));
        }
        if let Some(e) = &mut self.encoder {
            v.extend(e.params.params.iter_mut().map(|p| &mut p.value));
        }
        v
    }

    fn optimizers_mut(&mut self) -> Vec<&mut Adam<T>> {
        let mut v = vec![&mut self.opt_gen, &mut self.opt_ebm_a, &mut self.opt_ebm_s];
        v.extend(self.opt_enc.iter_mut());
        v
    }

    fn optimizers(&self) -> Vec<&Adam<T>> {
        let mut v = vec![&self.opt_gen, &self.opt_ebm_a, &self.opt_ebm_s];
        v.extend(self.opt_enc.iter());
        v
    }

    /// Serialises the full training state.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            iteration: self.iteration,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            pose_hist: self.pose_hist.clone(),
            adam_steps: self.optimizers().iter().map(|o| o.step).collect(),
            chains: self.store.chains.iter().map(|(&id, c)| (id, c.adam.step)).collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| fmt_err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.param_tensors() {
            put_tensor(&mut out, t);
        }
        for o in self.optimizers() {
            for t in o.m.iter().chain(&o.v) {
                put_tensor(&mut out, t);
            }
        }
        for c in self.store.chains.values() {
            put_tensor(&mut out, &c.z_a);
            put_tensor(&mut out, &c.z_s);
            for t in c.adam.m.iter().chain(&c.adam.v) {
                put_tensor(&mut out, t);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 1 + 8 + 4 || &bytes[..8] != MAGIC {
            return Err(fmt_err("not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version > CHECKPOINT_VERSION || version == 0 {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let tag = r.take(1)?[0] as usize;
        if tag != T::BYTES {
            return Err(fmt_err(format!(
                "checkpoint holds {tag}-byte scalars, this build reads {}",
                T::BYTES
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let meta: Meta = serde_json::from_slice(r.take(len)?).map_err(|e| fmt_err(e.to_string()))?;

        let mut tr = Trainer::new(meta.config)?;
        tr.iteration = meta.iteration;
        tr.pose_hist = meta.pose_hist;
        let mut rng = ChaCha8Rng::from_seed(meta.rng.seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(meta.rng.word_pos);
        tr.rng = rng;

        for t in tr.param_tensors_mut() {
            *t = r.tensor(t.shape())?;
        }
        let opts = tr.optimizers_mut();
        if opts.len() != meta.adam_steps.len() {
            return Err(fmt_err("optimizer count mismatch"));
        }
        for (o, &step) in opts.into_iter().zip(&meta.adam_steps) {
            o.step = step;
            for t in o.m.iter_mut().chain(o.v.iter_mut()) {
                *t = r.tensor(t.shape())?;
            }
        }
        let (da, ds) = (tr.store.dim_a, tr.store.dim_s);
        for &(id, step) in &meta.chains {
            let mut c = ChainState::zeros(da, ds, tr.store.adam);
            c.z_a = r.tensor((1, da))?;
            c.z_s = r.tensor((1, ds))?;
            c.adam.step = step;
            for t in c.adam.m.iter_mut().chain(c.adam.v.iter_mut()) {
                *t = r.tensor(t.shape())?;
            }
            tr.store.chains.insert(id, c);
        }
        if r.pos != body.len() {
            return Err(fmt_err("trailing bytes in checkpoint"));
        }
        Ok(tr)
    }
}

/// Scalar width recorded in a checkpoint header.
pub fn checkpoint_scalar_bytes(path: &Path) -> Result<usize> {
    use std::io::Read;
    let mut head = [0u8; 13];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| Error::io(path, e))?;
    if &head[..8] != MAGIC {
        return Err(fmt_err("not a checkpoint file"));
    }
    Ok(head[12] as usize)
}

pub fn checkpoint_save<T: Scalar>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    let bytes = trainer.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<Trainer<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Trainer::from_bytes(&bytes)
}
