//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "JANT" | version u32 | config_len u32 | ModelConfig JSON
//! n_params u32 | n_params × (name_len u32 | name | ndim u32 | dims u32… | f32 data)
//! has_optimizer u8 | [momentum f32 | weight_decay f32 | step u64 | velocity blobs in parameter order]
//! ```

use std::fs;
use std::path::Path;

use jant_autograd::Tensor;

use crate::error::{Error, Result};
use crate::nets::{JointModel, ModelConfig, ParamStore};
use crate::trainer::Sgd;

pub const MAGIC: &[u8; 4] = b"JANT";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, x: usize) {
    buf.extend_from_slice(&(x as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(buf, t.ndim());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(model: &JointModel, opt: Option<&Sgd>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + 4 * model.params.count() * if opt.is_some() { 2 } else { 1 });
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(&model.config)?;
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    put_u32(&mut buf, model.params.len());
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_tensor(&mut buf, t);
    }
    match opt {
        None => buf.push(0),
        Some(o) => {
            if o.velocity.len() != model.params.len() {
                return Err(Error::Usage("optimizer state does not match the model".into()));
            }
            buf.push(1);
            buf.extend_from_slice(&o.momentum.to_le_bytes());
            buf.extend_from_slice(&o.weight_decay.to_le_bytes());
            buf.extend_from_slice(&o.step.to_le_bytes());
            for v in &o.velocity {
                put_tensor(&mut buf, v);
            }
        }
    }
    Ok(buf)
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

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u32()?;
        if ndim > 8 {
            return Err(Error::Format(format!("tensor with {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Tensor::new(&shape, data)?)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(JointModel, Option<Sgd>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let n = r.u32()?;
    let mut params = ParamStore::default();
    for _ in 0..n {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        params.names.push(name);
        params.tensors.push(r.tensor()?);
    }
    let model = JointModel::from_params(config, params)?;
    let opt = match r.take(1)?[0] {
        0 => None,
        1 => {
            let momentum = r.f32()?;
            let weight_decay = r.f32()?;
            let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let mut velocity = Vec::with_capacity(n);
            for t in &model.params.tensors {
                let v = r.tensor()?;
                if v.shape() != t.shape() {
                    return Err(Error::Format("optimizer state shape mismatch".into()));
                }
                velocity.push(v);
            }
            Some(Sgd {
                momentum,
                weight_decay,
                step,
                velocity,
            })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((model, opt))
}

pub fn save_checkpoint(model: &JointModel, opt: Option<&Sgd>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model, opt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(JointModel, Option<Sgd>)> {
    decode(&fs::read(path)?)
}
