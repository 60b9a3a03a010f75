//! `DNFC` checkpoint files.
//!
//! ```text
//! b"DNFC" | version: u32 | meta_len: u32 | meta (JSON) | n_arrays: u32 |
//!   { name_len: u32 | name | dtype: u32 | rank: u32 | dims: rank x u32 | payload }* |
//! crc32: u32
//! ```
//!
//! All integers little-endian; the CRC covers every preceding byte. Optimizer
//! moments are stored as arrays named `optim.m/<param>` and `optim.v/<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, TrainMode, UNetConfig, VelocityModel};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub rank: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// What the network is: `flow`, `noise_flow`, `image_ddpm_v`, `ddpm_baseline`, `renderer`, `pretrain`.
    pub role: String,
    pub arch: UNetConfig,
    pub adapter: Option<AdapterMeta>,
    pub train_mode: TrainMode,
    /// Resolved training configuration, echoed verbatim.
    pub run_config: serde_json::Value,
    pub corpus_fingerprint: Option<String>,
    pub global_step: u64,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: VelocityModel<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, 1);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(role: &str, model: VelocityModel<f32>, optimizer: Option<AdamW<f32>>, run_config: serde_json::Value, corpus_fingerprint: Option<String>, global_step: u64, train_mode: TrainMode) -> Self {
        let adapter = model.adapter_rank().map(|(rank, scale)| AdapterMeta { rank, scale });
        let optimizer_meta = optimizer.as_ref().map(|o| OptimizerMeta {
            config: o.config,
            step: o.step,
        });
        Checkpoint {
            meta: CheckpointMeta {
                role: role.to_string(),
                arch: model.config.clone(),
                adapter,
                train_mode,
                run_config,
                corpus_fingerprint,
                global_step,
                optimizer: optimizer_meta,
            },
            model,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        let params = &self.model.params;
        let mut count = params.len();
        if let Some(opt) = &self.optimizer {
            count += 2 * opt.m.iter().filter(|m| !m.is_empty()).count();
        }
        put_u32(&mut out, count as u32);
        for p in params.iter() {
            put_array(&mut out, &p.name, &p.shape, &p.data);
        }
        if let Some(opt) = &self.optimizer {
            for (i, p) in params.iter().enumerate() {
                if opt.m[i].is_empty() {
                    continue;
                }
                put_array(&mut out, &format!("optim.m/{}", p.name), &p.shape, &opt.m[i]);
                put_array(&mut out, &format!("optim.v/{}", p.name), &p.shape, &opt.v[i]);
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected DNFC"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")));
        }
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let body = &bytes[..bytes.len() - 4];
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos as u64;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(meta_at, format!("bad metadata: {e}")))?;
        meta.arch.validate().map_err(|e| Error::format(meta_at, e.to_string()))?;
        let mut model = VelocityModel::<f32>::new(meta.arch.clone(), 0).map_err(|e| Error::format(meta_at, e.to_string()))?;
        if let Some(a) = &meta.adapter {
            model.attach_adapters(a.rank, a.scale, 0).map_err(|e| Error::format(meta_at, e.to_string()))?;
        }
        model.set_train_mode(&meta.train_mode).map_err(|e| Error::format(meta_at, e.to_string()))?;
        let mut optimizer = meta.optimizer.as_ref().map(|o| {
            let mut opt = AdamW::new(o.config, &model.params);
            opt.step = o.step;
            opt
        });
        let count = r.u32()? as usize;
        let mut seen = vec![false; model.params.len()];
        for _ in 0..count {
            let at = r.pos as u64;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(at, "array name is not utf-8"))?
                .to_string();
            let dtype = r.u32()?;
            if dtype != 1 {
                return Err(Error::format(at, format!("array {name}: unsupported dtype {dtype}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            if r.pos + 4 * n > body.len() {
                return Err(Error::format(r.pos as u64, format!("array {name}: payload runs past end of file")));
            }
            let data: Vec<f32> = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (target, key) = match name.split_once('/') {
                Some(("optim.m", k)) => (1, k),
                Some(("optim.v", k)) => (2, k),
                _ => (0, name.as_str()),
            };
            let id = model
                .params
                .id(key)
                .ok_or_else(|| Error::format(at, format!("unknown array {name}")))?;
            let expected = &model.params.by_name(key).expect("id exists").shape;
            if *expected != shape {
                return Err(Error::format(at, format!("array {name}: shape {shape:?}, architecture expects {expected:?}")));
            }
            match target {
                0 => {
                    model.params.get_mut(id).copy_from_slice(&data);
                    seen[id.0] = true;
                }
                _ => {
                    let opt = optimizer
                        .as_mut()
                        .ok_or_else(|| Error::format(at, "optimizer array without optimizer metadata"))?;
                    let slot = if target == 1 { &mut opt.m[id.0] } else { &mut opt.v[id.0] };
                    if slot.len() != data.len() {
                        return Err(Error::format(at, format!("optimizer array {name} for a frozen parameter")));
                    }
                    *slot = data;
                }
            }
        }
        if r.pos != body.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes before checksum"));
        }
        let actual = crc32fast::hash(body);
        if actual != stored_crc {
            return Err(Error::format(body.len() as u64, format!("crc mismatch: stored {stored_crc:08x}, computed {actual:08x}")));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = &model.params.iter().nth(missing).expect("index valid").name;
            return Err(Error::format(body.len() as u64, format!("parameter {name} missing from checkpoint")));
        }
        Ok(Checkpoint {
            meta,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| e.with_path(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            out_channels: 3,
            base_channels: 4,
            depth_levels: 2,
            embed_dim: 8,
            num_conditions: 5,
        }
    }

    fn sample_ckpt() -> Checkpoint {
        let mut model = VelocityModel::<f32>::new(tiny(), 9).unwrap();
        model.attach_adapters(2, 1.0, 9).unwrap();
        model.set_train_mode(&TrainMode::AdapterOnly).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
        opt.step = 17;
        for m in opt.m.iter_mut().flatten() {
            *m = 0.5;
        }
        Checkpoint::new("flow", model, Some(opt), serde_json::json!({"lr": 1e-4, "seed": 3}), Some("abc".into()), 17, TrainMode::AdapterOnly)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample_ckpt();
        let a = ck.to_bytes();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), a);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample_ckpt().to_bytes();
        for cut in [0, 3, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample_ckpt().to_bytes();
        bytes[4] = 99;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let mut bytes = sample_ckpt().to_bytes();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("crc"), "{err}");
    }

    #[test]
    fn adapter_checkpoint_loads_onto_matching_base() {
        let ck = sample_ckpt();
        let mut base = VelocityModel::<f32>::new(tiny(), 9).unwrap();
        base.attach_adapters(2, 1.0, 1234).unwrap();
        let n = base.params.load_matching(&ck.model.params).unwrap();
        assert_eq!(n, base.params.len());
        assert_eq!(base.params.checksum(), ck.model.params.checksum());
    }
}
