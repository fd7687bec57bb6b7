//! Versioned little-endian checkpoint container.
//!
//! Layout: magic `CAVGCKPT`, `u32` version, then length-prefixed sections
//! (config text, vocabulary text, metadata JSON, parameters, optimizer
//! moments), then a SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CAVGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub train_ap50: Option<f64>,
    pub val_ap50: Option<f64>,
    pub dataset_digest: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub meta: CheckpointMeta,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::schema("checkpoint", format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &str, elem: usize) -> Result<usize> {
        let n = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem as u64) > remaining {
            return Err(Error::schema("checkpoint", format!("{what}: length {n} exceeds file size")));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(what, 8)?;
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what, 1)?;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::schema("checkpoint", format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig, optimizer: Option<&OptimizerState>, meta: CheckpointMeta) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Checkpoint {
            config,
            vocab: model.vocab.clone(),
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
            meta,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_parts(self.config.model.clone(), self.vocab.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_text());
        w.str(&self.vocab.to_text());
        w.str(&serde_json::to_string(&self.meta).expect("meta serializes"));
        w.u64(self.params.len() as u64);
        for id in self.params.ids() {
            let t = self.params.get(id);
            w.str(self.params.name(id));
            w.u64(t.rows() as u64);
            w.u64(t.cols() as u64);
            w.u8(self.params.is_frozen(id) as u8);
            w.f64s(t.data());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.step);
                for v in [o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay] {
                    w.0.extend_from_slice(&v.to_le_bytes());
                }
                w.u64(o.first_moment.len() as u64);
                for (m, v) in o.first_moment.iter().zip(&o.second_moment) {
                    w.f64s(m);
                    w.f64s(v);
                }
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::schema("checkpoint", "not a checkpoint file (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != tail {
            return Err(Error::schema("checkpoint", "checksum mismatch; file is corrupt"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::schema(
                "checkpoint.version",
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let config = TrainConfig::parse(&r.str("config")?)?;
        let vocab = Vocabulary::from_text(&r.str("vocabulary")?)?;
        let meta: CheckpointMeta = serde_json::from_str(&r.str("meta")?)
            .map_err(|e| Error::schema("checkpoint.meta", e.to_string()))?;
        let n = r.len("parameter count", 1)?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str("parameter name")?;
            let rows = r.u64("rows")? as usize;
            let cols = r.u64("cols")? as usize;
            let frozen = r.u8("frozen flag")? != 0;
            let data = r.f64s("parameter data")?;
            let t = Tensor::new(vec![rows, cols], data)
                .map_err(|e| Error::schema(format!("checkpoint.params.{name}"), e.to_string()))?;
            let id = params.insert(&name, t)?;
            params.set_frozen(id, frozen);
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let mut c = [0.0; 4];
                for v in c.iter_mut() {
                    *v = f64::from_le_bytes(r.take(8, "optimizer config")?.try_into().unwrap());
                }
                let k = r.len("moment count", 16)?;
                let mut first = Vec::with_capacity(k);
                let mut second = Vec::with_capacity(k);
                for _ in 0..k {
                    first.push(r.f64s("first moment")?);
                    second.push(r.f64s("second moment")?);
                }
                Some(OptimizerState {
                    config: crate::optim::AdamWConfig {
                        beta1: c[0],
                        beta2: c[1],
                        eps: c[2],
                        weight_decay: c[3],
                    },
                    step,
                    first_moment: first,
                    second_moment: second,
                })
            }
            f => return Err(Error::schema("checkpoint.optimizer", format!("bad flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::schema("checkpoint", "trailing bytes after optimizer state"));
        }
        Ok(Checkpoint {
            config,
            vocab,
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        crate::data::sha256_hex(&self.to_bytes())
    }
}
