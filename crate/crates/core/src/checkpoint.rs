//! `NPIC` model checkpoints.
//!
//! Layout, all little-endian: magic `NPIC`, `u32` version, `u32` kind tag,
//! eight `u32` config fields (hidden, channels, context, horizon, layers,
//! kernel, heads, d_k), `u32` record count, then per record `u32` name
//! length, name bytes, `u32` rank, `u32` dims, `f32` values. A trailing
//! `u32` length and UTF-8 JSON blob carries free-form metadata.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ForecasterConfig, Forecaster, ModelKind};
use crate::series::{read_array, read_u32};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NPIC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Forecaster<f32>,
    pub metadata: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn new(model: Forecaster<f32>) -> Self {
        Self {
            model,
            metadata: serde_json::Value::Object(Default::default()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&cfg.kind.tag().to_le_bytes());
        for v in [
            cfg.hidden,
            cfg.n_channels,
            cfg.context_len,
            cfg.horizon,
            cfg.layers,
            cfg.kernel,
            cfg.heads,
            cfg.d_k,
        ] {
            put_u32(&mut out, v);
        }
        put_u32(&mut out, self.model.names().len());
        for (name, t) in self.model.names().iter().zip(self.model.params()) {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for d in t.shape() {
                put_u32(&mut out, *d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = self.metadata.to_string();
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> std::result::Result<Self, String> {
        let r = &mut bytes;
        let magic: [u8; 4] = read_array(r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let tag = read_u32(r)?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| format!("unknown model tag {tag}"))?;
        let mut field = || read_u32(r).map(|v| v as usize);
        let config = ForecasterConfig {
            kind,
            hidden: field()?,
            n_channels: field()?,
            context_len: field()?,
            horizon: field()?,
            layers: field()?,
            kernel: field()?,
            heads: field()?,
            d_k: field()?,
        };
        let count = read_u32(r)? as usize;
        if count > 10_000 {
            return Err(format!("implausible record count {count}"));
        }
        let mut names = Vec::with_capacity(count);
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let name = take(r, len)?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| "name is not UTF-8")?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(format!("record {name} has rank {rank}"));
            }
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|v| v as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = take(r, numel.checked_mul(4).ok_or("record too large")?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
            names.push(name);
        }
        let meta_len = read_u32(r)? as usize;
        let meta = take(r, meta_len)?;
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        let metadata = serde_json::from_slice(meta).map_err(|e| format!("metadata: {e}"))?;
        let model = Forecaster::from_parts(config, names, params).map_err(|e| e.to_string())?;
        Ok(Self { model, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

fn take<'a>(r: &mut &'a [u8], len: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < len {
        return Err("truncated".into());
    }
    let (head, tail) = r.split_at(len);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        for kind in ModelKind::ALL {
            let model = Forecaster::<f32>::new(ForecasterConfig::new(kind, 8, 3), 9).unwrap();
            let mut ck = Checkpoint::new(model);
            ck.metadata = serde_json::json!({"epoch": 4, "mean": [0.5, 1.0]});
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back, ck);
            for (a, b) in back.model.params().iter().zip(ck.model.params()) {
                let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn predictions_survive_roundtrip() {
        let model = Forecaster::<f32>::new(ForecasterConfig::new(ModelKind::Lstm, 8, 2), 1).unwrap();
        let ck = Checkpoint::new(model);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.npic");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let ctx: Vec<f32> = (0..152).map(|i| (i as f32).sin()).collect();
        assert_eq!(
            back.model.predict(&ctx, 1).unwrap(),
            ck.model.predict(&ctx, 1).unwrap()
        );
    }

    #[test]
    fn rejects_corruption() {
        let model = Forecaster::<f32>::new(ForecasterConfig::new(ModelKind::Rnn, 8, 1), 1).unwrap();
        let bytes = Checkpoint::new(model).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 77;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
