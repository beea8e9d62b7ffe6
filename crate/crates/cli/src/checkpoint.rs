//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "AENETCKP"
//! version  u32
//! header   u64 length + JSON (configs, stats, counters)
//! tensors  u32 count, then per tensor:
//!          u32 name length, name, u32 rank, u64 dims.., f32 values
//! ```
//!
//! Tensors are the parameters (`param.*`), batch-norm buffers (`buffer.*`)
//! and, once the optimizer has stepped, its moments (`adam_m.*`, `adam_v.*`).

use std::path::Path;

use aenet_core::imaging::NormalizationStats;
use aenet_core::model::{Adam, Aenet, ModelConfig};
use aenet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::training::{LoopSettings, TrainState};

pub const MAGIC: &[u8; 8] = b"AENETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    settings: LoopSettings,
    stats: NormalizationStats,
    epoch: usize,
    step: u64,
    best_val_dice: Option<f64>,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_step: u64,
}

/// Everything needed to resume a run or to run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub settings: LoopSettings,
    pub stats: NormalizationStats,
    pub best_val_dice: Option<f64>,
}

fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let params = state.model.params();
    let mut out: Vec<(String, &Tensor<f32>)> = params
        .iter()
        .map(|(n, t)| (format!("param.{n}"), *t))
        .collect();
    out.extend(
        state
            .model
            .buffers()
            .into_iter()
            .map(|(n, t)| (format!("buffer.{n}"), t)),
    );
    let adam = &state.optimizer;
    for ((n, _), m) in params.iter().zip(&adam.first_moment) {
        out.push((format!("adam_m.{n}"), m));
    }
    for ((n, _), v) in params.iter().zip(&adam.second_moment) {
        out.push((format!("adam_v.{n}"), v));
    }
    out
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let s = &ck.state;
    let header = Header {
        model: s.model.config.clone(),
        settings: ck.settings.clone(),
        stats: ck.stats,
        epoch: s.epoch,
        step: s.step,
        best_val_dice: ck.best_val_dice,
        adam_beta1: s.optimizer.beta1,
        adam_beta2: s.optimizer.beta2,
        adam_eps: s.optimizer.eps,
        adam_step: s.optimizer.step,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let tensors = named_tensors(s);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end
            .ok_or_else(|| CliError::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> CliResult<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| CliError::Data("checkpoint length overflows".into()))
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Data(format!("checkpoint: {}", msg.into()))
}

pub fn decode(bytes: &[u8]) -> CliResult<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = r.len()?;
    let header: Header = serde_json::from_slice(r.take(n)?).map_err(|e| bad(e.to_string()))?;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..r.u32()? {
        let n = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.len())
            .collect::<CliResult<Vec<usize>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("tensor too large"))?;
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| bad("tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }

    let has_moments = tensors.keys().any(|k| k.starts_with("adam_"));
    let mut model = Aenet::<f32>::init(header.model.clone(), 0)?;
    let mut fill = |name: String, dst: &mut Tensor<f32>| -> CliResult<()> {
        let src = tensors
            .remove(&name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if src.shape() != dst.shape() {
            return Err(bad(format!(
                "{name}: shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src;
        Ok(())
    };
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (n, t) in model.params_mut() {
        fill(format!("param.{n}"), t)?;
    }
    for (n, t) in model.buffers_mut() {
        fill(format!("buffer.{n}"), t)?;
    }
    let mut optimizer = Adam::new(&header.settings.optim);
    optimizer.beta1 = header.adam_beta1;
    optimizer.beta2 = header.adam_beta2;
    optimizer.eps = header.adam_eps;
    optimizer.step = header.adam_step;
    if has_moments {
        for (name, p) in names.iter().zip(model.params()) {
            let mut m = Tensor::zeros(p.1.shape());
            let mut v = Tensor::zeros(p.1.shape());
            fill(format!("adam_m.{name}"), &mut m)?;
            fill(format!("adam_v.{name}"), &mut v)?;
            optimizer.first_moment.push(m);
            optimizer.second_moment.push(v);
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        state: TrainState {
            model,
            optimizer,
            epoch: header.epoch,
            step: header.step,
        },
        settings: header.settings,
        stats: header.stats,
        best_val_dice: header.best_val_dice,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        crate::io::create_dir(dir)?;
    }
    std::fs::write(path, encode(ck)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
