//! Binary model checkpoint.
//!
//! Layout, little-endian: magic `STPF1`, `u32` version, the architecture as
//! eight `u32`s plus a `u8` graph flag, the normalizer as two `f64`s, a `u32`
//! tensor count, then per tensor `u32` rank, `u32` dims and `f64` data in
//! canonical order, and finally a `u8` embedding-strategy tag.

use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::{Forecaster, ModelConfig, ModelParams, ResidualBlock};
use crate::dataset::Normalizer;
use crate::error::{Error, Result};
use crate::io::{put_f64s, put_u32, read_bytes, write_atomic, LeReader};
use crate::pca::EmbeddingStrategy;

pub const MODEL_MAGIC: &[u8; 5] = b"STPF1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn read_tensor(r: &mut LeReader, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 2 {
        return Err(Error::Checkpoint(format!("tensor {name}: unsupported rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let len = dims.iter().product();
    Ok((dims, r.f64_vec(len)?))
}

fn matrix(r: &mut LeReader, name: &str) -> Result<Array2<f64>> {
    let (dims, data) = read_tensor(r, name)?;
    if dims.len() != 2 {
        return Err(Error::Checkpoint(format!("tensor {name}: expected a matrix")));
    }
    Ok(Array2::from_shape_vec((dims[0], dims[1]), data).expect("length matches dims"))
}

fn vector(r: &mut LeReader, name: &str) -> Result<Array1<f64>> {
    let (dims, data) = read_tensor(r, name)?;
    if dims.len() != 1 {
        return Err(Error::Checkpoint(format!("tensor {name}: expected a vector")));
    }
    Ok(Array1::from(data))
}

impl Forecaster {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = MODEL_MAGIC.to_vec();
        put_u32(&mut out, MODEL_FORMAT_VERSION);
        for v in [
            c.l1,
            c.l2,
            c.embed_dim,
            c.tod_dim,
            c.dow_dim,
            c.hidden_dim,
            c.num_blocks,
            c.steps_per_day,
        ] {
            put_u32(&mut out, v as u32);
        }
        out.push(c.use_graph as u8);
        put_f64s(&mut out, &[self.normalizer.mean, self.normalizer.std]);
        let shapes = self.params.shapes();
        put_u32(&mut out, shapes.len() as u32);
        for ((_, dims), data) in shapes.iter().zip(self.params.slices()) {
            put_u32(&mut out, dims.len() as u32);
            for d in dims {
                put_u32(&mut out, *d as u32);
            }
            put_f64s(&mut out, data);
        }
        out.push(self.strategy.tag());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported model format version {version}")));
        }
        let mut dims = [0usize; 8];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let use_graph = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("bad graph flag {other}"))),
        };
        let config = ModelConfig {
            l1: dims[0],
            l2: dims[1],
            embed_dim: dims[2],
            tod_dim: dims[3],
            dow_dim: dims[4],
            hidden_dim: dims[5],
            num_blocks: dims[6],
            steps_per_day: dims[7],
            use_graph,
        };
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let normalizer = Normalizer::new(r.f64()?, r.f64()?)
            .map_err(|e| Error::Checkpoint(format!("normalizer: {e}")))?;
        let count = r.u32()? as usize;
        if count != 7 + 4 * config.num_blocks {
            return Err(Error::Checkpoint(format!(
                "{count} tensors for a {}-block model",
                config.num_blocks
            )));
        }
        let w_x = matrix(&mut r, "w_x")?;
        let b_x = vector(&mut r, "b_x")?;
        let embedding = matrix(&mut r, "embedding")?;
        let tod = matrix(&mut r, "tod")?;
        let dow = matrix(&mut r, "dow")?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            blocks.push(ResidualBlock {
                w1: matrix(&mut r, &format!("blocks.{i}.w1"))?,
                b1: vector(&mut r, &format!("blocks.{i}.b1"))?,
                w2: matrix(&mut r, &format!("blocks.{i}.w2"))?,
                b2: vector(&mut r, &format!("blocks.{i}.b2"))?,
            });
        }
        let w_o = matrix(&mut r, "w_o")?;
        let b_o = vector(&mut r, "b_o")?;
        let strategy = EmbeddingStrategy::from_tag(r.u8()?)?;
        r.finish()?;
        let params = ModelParams {
            w_x,
            b_x,
            embedding,
            tod,
            dow,
            blocks,
            w_o,
            b_o,
        };
        Forecaster::from_parts(config, params, strategy, normalizer)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Short content hash of the checkpoint bytes.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}
