//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! b"DANON"  u32 version
//! u32 n  + n bytes of JSON run config
//! u32 tensor count, then per tensor: u32 rank, rank x u32 dims
//! f32 parameter blob
//! u8 has_optimizer; if 1: u64 optimizer step, f32 first moments, f32 second moments
//! u64 rng state (the training stream seed)
//! u64 step
//! ```
//!
//! Values are stored at f32. Training rounds its state to f32 at every
//! checkpoint boundary, so a loaded checkpoint resumes exactly where the
//! uninterrupted run would be.

use std::path::Path;

use diffanon_core::{AdamState, DenoiserModel, Tensor, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 5] = b"DANON";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<Tensor>,
    pub optimizer: Option<AdamState>,
    pub rng_state: u64,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, ts: &[Tensor]) {
    for t in ts {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn tensors(&mut self, shapes: &[Vec<usize>]) -> Option<Vec<Tensor>> {
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let raw = self.take(n.checked_mul(4)?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
                Tensor::new(s.clone(), data).ok()
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer) -> Self {
        Checkpoint {
            config: config.clone(),
            params: trainer.model.params().to_vec(),
            optimizer: Some(trainer.opt.clone()),
            rng_state: trainer.config.seed,
            step: trainer.step,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(&cfg);
        put_u32(&mut out, self.params.len());
        for p in &self.params {
            put_u32(&mut out, p.shape().len());
            for &d in p.shape() {
                put_u32(&mut out, d);
            }
        }
        put_f32s(&mut out, &self.params);
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                put_f32s(&mut out, &opt.first);
                put_f32s(&mut out, &opt.second);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| CliError::format(path, m);
        let mut r = Reader { buf, pos: 0 };
        if r.take(5) != Some(&MAGIC[..]) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION as usize {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32().ok_or_else(|| bad("truncated header"))?;
        let cfg = r.take(n).ok_or_else(|| bad("truncated config record"))?;
        let config: RunConfig = serde_json::from_slice(cfg).map_err(|e| bad(&format!("config record: {e}")))?;
        let count = r.u32().ok_or_else(|| bad("truncated shape table"))?;
        let shapes = (0..count)
            .map(|_| {
                let rank = r.u32()?;
                (0..rank).map(|_| r.u32()).collect::<Option<Vec<_>>>()
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated shape table"))?;
        let params = r.tensors(&shapes).ok_or_else(|| bad("truncated parameter blob"))?;
        let optimizer = match r.take(1).ok_or_else(|| bad("truncated optimizer flag"))?[0] {
            0 => None,
            1 => {
                let step = r.u64().ok_or_else(|| bad("truncated optimizer state"))?;
                let first = r.tensors(&shapes).ok_or_else(|| bad("truncated optimizer state"))?;
                let second = r.tensors(&shapes).ok_or_else(|| bad("truncated optimizer state"))?;
                let mut opt = AdamState::new(&params, config.train.lr);
                opt.step = step;
                opt.first = first;
                opt.second = second;
                Some(opt)
            }
            f => return Err(bad(&format!("bad optimizer flag {f}"))),
        };
        let rng_state = r.u64().ok_or_else(|| bad("truncated trailer"))?;
        let step = r.u64().ok_or_else(|| bad("truncated trailer"))?;
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { config, params, optimizer, rng_state, step })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    pub fn model(&self) -> Result<DenoiserModel> {
        Ok(DenoiserModel::from_params(self.config.backbone, self.params.clone())?)
    }

    /// A trainer continuing from this checkpoint.
    pub fn trainer(&self) -> Result<Trainer> {
        let opt = self.optimizer.clone().ok_or_else(|| CliError::Runtime("checkpoint has no optimizer state to resume from".into()))?;
        let mut train = self.config.train;
        train.seed = self.rng_state;
        Ok(Trainer::resume(train, self.model()?, opt, self.step)?)
    }
}
