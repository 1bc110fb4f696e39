//! `RAFTCKPT` binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "RAFTCKPT"
//! version     u32
//! count       u32      number of tensors
//! per tensor:
//!   name_len  u32, then name_len bytes of UTF-8
//!   rank      u32
//!   extents   rank x u64
//!   values    prod(extents) x f64
//! ```
//!
//! Tensor names encode the architecture, so the network layout is recovered
//! from the names and shapes on load.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{Encoder, Linear, Mlp, ModelParams, NetworkSpec, Predictor, PredictorKind};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RAFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let named = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic mismatch (expected RAFTCKPT)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is larger than the file")))?;
            let values = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if tensors.insert(name.clone(), Tensor::new(shape, values)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        assemble(tensors)
    }
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, params.to_checkpoint_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    ModelParams::from_checkpoint_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn take_mlp(tensors: &mut BTreeMap<String, Tensor>, prefix: &str, required: bool) -> Result<Option<Mlp>> {
    let mut layers = Vec::new();
    loop {
        let i = layers.len();
        let Some(weight) = tensors.remove(&format!("{prefix}.{i}.weight")) else { break };
        weight.dims2("checkpoint").map_err(|_| Error::Format(format!("{prefix}.{i}.weight is not a matrix")))?;
        let bias = tensors.remove(&format!("{prefix}.{i}.bias"));
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::Format(format!("{prefix}.{i}.bias does not match its weight")));
            }
        }
        layers.push(Linear { weight, bias });
    }
    if layers.is_empty() {
        return if required {
            Err(Error::Format(format!("missing tensors for `{prefix}`")))
        } else {
            Ok(None)
        };
    }
    for w in layers.windows(2) {
        if w[0].weight.shape()[1] != w[1].weight.shape()[0] {
            return Err(Error::Format(format!("layer widths in `{prefix}` do not chain")));
        }
    }
    Ok(Some(Mlp { layers }))
}

fn outs(m: &Mlp) -> Vec<usize> {
    m.layers.iter().map(|l| l.weight.shape()[1]).collect()
}

fn assemble(mut tensors: BTreeMap<String, Tensor>) -> Result<ModelParams> {
    let backbone = take_mlp(&mut tensors, "online.backbone", true)?.expect("required");
    let projector = take_mlp(&mut tensors, "online.projector", true)?.expect("required");
    let t_backbone = take_mlp(&mut tensors, "target.backbone", true)?.expect("required");
    let t_projector = take_mlp(&mut tensors, "target.projector", true)?.expect("required");

    let bb_outs = outs(&backbone);
    let pj_outs = outs(&projector);
    let representation_dim = *bb_outs.last().expect("non-empty");
    let projection_dim = *pj_outs.last().expect("non-empty");
    if projector.layers[0].weight.shape()[0] != representation_dim {
        return Err(Error::Format("projector input does not match backbone output".into()));
    }

    let (predictor, kind, predictor_hidden) = if let Some(w) = tensors.remove("predictor.weight") {
        if w.shape() != [projection_dim, projection_dim] {
            return Err(Error::Format("linear predictor is not square over the projection".into()));
        }
        (Predictor::Linear(w), PredictorKind::Linear, Vec::new())
    } else if let Some(m) = take_mlp(&mut tensors, "predictor", false)? {
        let o = outs(&m);
        let hidden = o[..o.len() - 1].to_vec();
        (Predictor::Mlp(m), PredictorKind::Mlp, hidden)
    } else {
        (Predictor::Identity, PredictorKind::Identity, Vec::new())
    };

    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{name}`")));
    }

    let spec = NetworkSpec {
        input_dim: backbone.layers[0].weight.shape()[0],
        hidden: bb_outs[..bb_outs.len() - 1].to_vec(),
        representation_dim,
        projector_hidden: pj_outs[..pj_outs.len() - 1].to_vec(),
        projection_dim,
        predictor: kind,
        predictor_hidden: if kind == PredictorKind::Mlp { predictor_hidden } else { NetworkSpec::default().predictor_hidden },
        ..NetworkSpec::default()
    };
    let online = Encoder { backbone, projector };
    let target = Encoder {
        backbone: t_backbone,
        projector: t_projector,
    };
    if online.tensors().iter().map(|t| t.shape()).ne(target.tensors().iter().map(|t| t.shape())) {
        return Err(Error::Format("target shapes differ from online shapes".into()));
    }
    Ok(ModelParams {
        spec,
        online,
        predictor,
        target,
    })
}
