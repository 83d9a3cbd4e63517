//! `RBLM` checkpoint files:
//!
//! ```text
//! "RBLM"
//! u32 header_len, header_len bytes of canonical key=value text
//! u32 n_tensors
//! n_tensors x { u32 rank, u32 dims[rank], f32 values[prod(dims)] }
//! ```
//!
//! Tensors appear in parameter declaration order.

use std::path::Path;

use super::model::{ModelDims, MtlModel};
use super::tensor::Tensor;
use crate::config::KvMap;
use crate::dataset::Reader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RBLM";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MtlModel<f32>,
    pub seed: u64,
    pub epoch: usize,
    /// Free-form provenance (resolved configuration) stored alongside.
    pub extra: KvMap,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv = self.extra.clone();
        self.model.dims.write_kv(&mut kv);
        kv.set("checkpoint.seed", self.seed);
        kv.set("checkpoint.epoch", self.epoch);
        let header = kv.to_canonical();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in &self.model.params {
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing RBLM magic".into()));
        }
        let hlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?)
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let kv = KvMap::parse(text)?;
        let base = ModelDims {
            n_r: kv.require("model.n_r")?,
            m: kv.require("model.m")?,
            n_t: kv.require("model.n_t")?,
            k: kv.require("model.k")?,
            m_s: kv.require("model.m_s")?,
            n_s: kv.require("model.n_s")?,
            classes_f: kv.require("model.classes_f")?,
            classes_s: kv.require("model.classes_s")?,
            classes_w: kv.require("model.classes_w")?,
            conv_mid: kv.require("model.conv_mid")?,
            kernel: kv.require("model.kernel")?,
            padding: kv.require("model.padding")?,
            res_blocks: kv.require("model.res_blocks")?,
            shared_conv: kv.require("model.shared_conv")?,
            embed: kv.require("model.embed")?,
            hidden: kv.require("model.hidden")?,
            d_k: kv.require("model.d_k")?,
            dropout: kv.require("model.dropout")?,
            beamspace: kv.require("model.beamspace")?,
        };
        let dims = ModelDims::from_kv(&kv, &base)?;
        let mut model = MtlModel::<f32>::new(dims, 0)?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(Error::Format(format!("tensor rank {rank} > 4")));
            }
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            params.push(Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        model
            .load_params(params)
            .map_err(|e| Error::Format(format!("parameters do not fit the declared architecture: {e}")))?;
        let mut extra = KvMap::new();
        for (k, v) in kv.iter() {
            if !k.starts_with("model.") && !k.starts_with("checkpoint.") {
                extra.set(k, v);
            }
        }
        Ok(Self {
            model,
            seed: kv.require("checkpoint.seed")?,
            epoch: kv.require("checkpoint.epoch")?,
            extra,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
