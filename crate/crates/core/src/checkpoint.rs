//! Versioned binary checkpoint container.
//!
//! Carries the model structure, every named parameter grouped by
//! component, the producing config (echoed verbatim plus its hash), the
//! absolute step counter, and optionally the optimizer moments so a
//! resumed run is bit-identical to an uninterrupted one.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::backbone::{BackboneFamily, BackboneSpec};
use crate::distortion::Conditioning;
use crate::error::{CdreError, Result};
use crate::nn::{Adam, ParamGroup, ParamId};
use crate::rng::fnv1a64;
use crate::tensor::Tensor;
use crate::training::{CdreModel, ModelConfig, ModelKind};

const MAGIC: &[u8; 4] = b"CDRC";
const FORMAT_VERSION: u8 = 1;

fn family_tag(f: BackboneFamily) -> u8 {
    match f {
        BackboneFamily::Cnn => 0,
        BackboneFamily::Transformer => 1,
    }
}

fn family_from_tag(t: u8) -> Result<BackboneFamily> {
    match t {
        0 => Ok(BackboneFamily::Cnn),
        1 => Ok(BackboneFamily::Transformer),
        other => Err(CdreError::CheckpointMismatch(alloc::format!(
            "bad family tag {other}"
        ))),
    }
}

fn conditioning_tag(c: Conditioning) -> u8 {
    match c {
        Conditioning::Modulation => 0,
        Conditioning::Concat => 1,
        Conditioning::None => 2,
    }
}

fn conditioning_from_tag(t: u8) -> Result<Conditioning> {
    match t {
        0 => Ok(Conditioning::Modulation),
        1 => Ok(Conditioning::Concat),
        2 => Ok(Conditioning::None),
        other => Err(CdreError::CheckpointMismatch(alloc::format!(
            "bad conditioning tag {other}"
        ))),
    }
}

/// Serializes a model (and optionally its optimizer) to bytes.
pub fn save_checkpoint(
    model: &CdreModel,
    step: u64,
    opt: Option<&Adam>,
    config_echo: &str,
) -> Vec<u8> {
    let cfg = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(cfg.kind.tag());
    out.push(family_tag(cfg.backbone.family));
    for d in cfg.backbone.stage_dims {
        out.extend_from_slice(&(d as u16).to_be_bytes());
    }
    out.extend_from_slice(&(cfg.latent_channels as u16).to_be_bytes());
    out.push(cfg.embedding_depth as u8);
    out.push(conditioning_tag(cfg.conditioning));
    out.push(cfg.multi_scale as u8);
    out.extend_from_slice(&(cfg.token_dim as u16).to_be_bytes());
    out.extend_from_slice(&step.to_be_bytes());
    out.extend_from_slice(&fnv1a64(config_echo.as_bytes()).to_be_bytes());
    out.extend_from_slice(&(config_echo.len() as u32).to_be_bytes());
    out.extend_from_slice(config_echo.as_bytes());

    out.extend_from_slice(&(model.store.len() as u32).to_be_bytes());
    for id in model.store.ids() {
        let name = model.store.name(id);
        let value = model.store.value(id);
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(model.store.group(id).tag());
        out.push(value.rank() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    match opt {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.extend_from_slice(&adam.t.to_be_bytes());
            let (m, v) = adam.moments();
            for buf in [m, v] {
                for t in buf {
                    for &x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CdreError::CheckpointMismatch(alloc::format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// A checkpoint restored into a live model.
pub struct LoadedCheckpoint {
    pub model: CdreModel,
    pub opt: Option<Adam>,
    pub step: u64,
    pub config_echo: String,
    pub config_hash: u64,
}

/// Parses checkpoint bytes, rebuilds the model structure from the stored
/// config, and restores every parameter by name.
pub fn load_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CdreError::CheckpointMismatch("bad magic".to_string()));
    }
    if r.u8()? != FORMAT_VERSION {
        return Err(CdreError::CheckpointMismatch(
            "unsupported checkpoint version".to_string(),
        ));
    }
    let kind = ModelKind::from_tag(r.u8()?)?;
    let family = family_from_tag(r.u8()?)?;
    let mut stage_dims = [0usize; 4];
    for d in &mut stage_dims {
        *d = r.u16()? as usize;
    }
    let latent_channels = r.u16()? as usize;
    let embedding_depth = r.u8()? as usize;
    let conditioning = conditioning_from_tag(r.u8()?)?;
    let multi_scale = r.u8()? != 0;
    let token_dim = r.u16()? as usize;
    let step = r.u64()?;
    let config_hash = r.u64()?;
    let echo_len = r.u32()? as usize;
    let config_echo = core::str::from_utf8(r.take(echo_len)?)
        .map_err(|_| CdreError::CheckpointMismatch("config echo is not UTF-8".to_string()))?
        .to_string();
    if fnv1a64(config_echo.as_bytes()) != config_hash {
        return Err(CdreError::CheckpointMismatch(
            "config hash does not match echoed config".to_string(),
        ));
    }

    let cfg = ModelConfig {
        kind,
        backbone: BackboneSpec { family, stage_dims },
        latent_channels,
        embedding_depth,
        conditioning,
        multi_scale,
        token_dim,
    };
    let mut model = CdreModel::new(cfg, 0)?;

    let param_count = r.u32()? as usize;
    if param_count != model.store.len() {
        return Err(CdreError::CheckpointMismatch(alloc::format!(
            "checkpoint has {param_count} parameters, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..param_count {
        let name_len = r.u16()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CdreError::CheckpointMismatch("parameter name is not UTF-8".to_string()))?
            .to_string();
        let group = ParamGroup::from_tag(r.u8()?)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f64_vec(n)?;
        let id = model.store.lookup(&name).ok_or_else(|| {
            CdreError::CheckpointMismatch(alloc::format!("unexpected parameter {name}"))
        })?;
        if model.store.group(id) != group {
            return Err(CdreError::CheckpointMismatch(alloc::format!(
                "parameter {name} group mismatch"
            )));
        }
        if model.store.value(id).shape() != &shape[..] {
            return Err(CdreError::CheckpointMismatch(alloc::format!(
                "parameter {name} shape mismatch"
            )));
        }
        *model.store.value_mut(id) = Tensor::new(&shape, data)?;
    }

    let opt = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut read_moments = |model: &CdreModel| -> Result<Vec<Tensor>> {
                let mut out = Vec::with_capacity(model.store.len());
                for i in 0..model.store.len() {
                    let shape = model.store.value(ParamId(i)).shape().to_vec();
                    let n: usize = shape.iter().product();
                    out.push(Tensor::new(&shape, r.f64_vec(n)?)?);
                }
                Ok(out)
            };
            let m = read_moments(&model)?;
            let v = read_moments(&model)?;
            Some(Adam::restore(m, v, t))
        }
        other => {
            return Err(CdreError::CheckpointMismatch(alloc::format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    if r.pos != bytes.len() {
        return Err(CdreError::CheckpointMismatch(alloc::format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        opt,
        step,
        config_echo,
        config_hash,
    })
}
