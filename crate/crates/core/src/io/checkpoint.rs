//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ASITCKPT"
//! version  u32
//! config   u32 length + UTF-8 config text
//! meta     u32 length + UTF-8 `key = value` lines
//! count    u32
//! count x tensor:
//!   name   u16 length + UTF-8
//!   dtype  u8 (1 = f32, 2 = f64)
//!   ndim   u8, then ndim x u64 dims
//!   data   row-major payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;

use crate::distill::Pretrainer;
use crate::error::{AsitError, Result};
use crate::scalar::Scalar;
use crate::vit::Parameters;

pub const CKPT_MAGIC: &[u8; 8] = b"ASITCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => f32::DTYPE,
            TensorData::F64(_) => f64::DTYPE,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_text: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

/// Element types a checkpoint can hold.
pub trait Element: Scalar {
    fn wrap(v: Vec<Self>) -> TensorData;
    fn unwrap(d: &TensorData) -> Option<&[Self]>;
}

impl Element for f32 {
    fn wrap(v: Vec<Self>) -> TensorData {
        TensorData::F32(v)
    }
    fn unwrap(d: &TensorData) -> Option<&[Self]> {
        match d {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }
}

impl Element for f64 {
    fn wrap(v: Vec<Self>) -> TensorData {
        TensorData::F64(v)
    }
    fn unwrap(d: &TensorData) -> Option<&[Self]> {
        match d {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }
}

fn load_err(msg: impl Into<String>) -> AsitError {
    AsitError::Load(msg.into())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .ok_or_else(|| load_err(format!("checkpoint meta lacks `{key}`")))?
            .parse()
            .map_err(|_| load_err(format!("checkpoint meta `{key}` is not a number")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .ok_or_else(|| load_err(format!("checkpoint meta lacks `{key}`")))?
            .parse()
            .map_err(|_| load_err(format!("checkpoint meta `{key}` is not an integer")))
    }

    pub fn push_params<S: Element, M: Parameters<S>>(&mut self, prefix: &str, model: &M) {
        for p in model.params() {
            self.tensors.push(Tensor {
                name: format!("{prefix}.{}", p.name),
                shape: p.shape.clone(),
                data: S::wrap(p.data.to_vec()),
            });
        }
    }

    pub fn push_vector<S: Element>(&mut self, name: &str, v: &Array1<S>) {
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: vec![v.len()],
            data: S::wrap(v.to_vec()),
        });
    }

    /// Copies every `prefix.*` tensor into `model`, which fixes the expected
    /// names, shapes and dtype.
    pub fn load_params<S: Element, M: Parameters<S>>(&self, prefix: &str, model: &mut M) -> Result<()> {
        for p in model.params_mut() {
            let name = format!("{prefix}.{}", p.name);
            let t = self.get(&name).ok_or_else(|| load_err(format!("missing tensor `{name}`")))?;
            if t.shape != p.shape {
                return Err(load_err(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape, p.shape
                )));
            }
            let src = S::unwrap(&t.data)
                .ok_or_else(|| load_err(format!("tensor `{name}` has dtype {}, model uses {}", t.data.dtype(), S::DTYPE)))?;
            p.data.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn load_vector<S: Element>(&self, name: &str, out: &mut Array1<S>) -> Result<()> {
        let t = self.get(name).ok_or_else(|| load_err(format!("missing tensor `{name}`")))?;
        if t.shape != [out.len()] {
            return Err(load_err(format!("tensor `{name}` has shape {:?}, expected [{}]", t.shape, out.len())));
        }
        let src = S::unwrap(&t.data).ok_or_else(|| load_err(format!("tensor `{name}` has the wrong dtype")))?;
        out.assign(&Array1::from(src.to_vec()));
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        for text in [self.config_text.clone(), meta_text(&self.meta)] {
            w.write_all(&(text.len() as u32).to_le_bytes())?;
            w.write_all(text.as_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u16).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.data.dtype(), t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(v) => {
                    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                    w.write_all(&bytes)?;
                }
                TensorData::F64(v) => {
                    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                    w.write_all(&bytes)?;
                }
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(load_err("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(load_err(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let config_text = read_string(&mut r, len)?;
        let len = read_u32(&mut r)? as usize;
        let meta = parse_meta(&read_string(&mut r, len)?)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut n2 = [0u8; 2];
            read_exact(&mut r, &mut n2)?;
            let name = read_string(&mut r, u16::from_le_bytes(n2) as usize)?;
            let mut dt = [0u8; 2];
            read_exact(&mut r, &mut dt)?;
            let mut shape = Vec::with_capacity(dt[1] as usize);
            for _ in 0..dt[1] {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| load_err("dimension overflow"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 34)
                .ok_or_else(|| load_err(format!("tensor `{name}` is implausibly large")))?;
            let data = match dt[0] {
                1 => {
                    let mut buf = vec![0u8; len * 4];
                    read_exact(&mut r, &mut buf)?;
                    TensorData::F32(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                2 => {
                    let mut buf = vec![0u8; len * 8];
                    read_exact(&mut r, &mut buf)?;
                    TensorData::F64(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                d => return Err(load_err(format!("tensor `{name}` has unknown dtype {d}"))),
            };
            debug_assert_eq!(data.len(), len);
            tensors.push(Tensor { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| load_err(e.to_string()))? != 0 {
            return Err(load_err("trailing bytes after last tensor"));
        }
        Ok(Checkpoint {
            config_text,
            meta,
            tensors,
        })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let f = std::fs::File::create(&tmp).map_err(|e| AsitError::io(&tmp, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| AsitError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| AsitError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| AsitError::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn meta_text(meta: &BTreeMap<String, String>) -> String {
    meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(" = ")
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| load_err(format!("bad meta line `{l}`")))
        })
        .collect()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| load_err(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    if len > 1 << 26 {
        return Err(load_err("implausible string length"));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| load_err("non UTF-8 text"))
}

/// Student, teacher, optimizer moments, centers and counters of a pretraining
/// run.
pub fn training_checkpoint(tr: &Pretrainer, config_text: &str, meta: BTreeMap<String, String>) -> Checkpoint {
    let mut c = Checkpoint {
        config_text: config_text.to_string(),
        meta,
        tensors: Vec::new(),
    };
    c.meta.insert("step".into(), tr.state.step.to_string());
    c.meta.insert("adam_t".into(), tr.opt.t.to_string());
    c.meta.insert("total_steps".into(), tr.total_steps.to_string());
    c.push_params("student", &tr.state.student);
    c.push_params("teacher", &tr.state.teacher);
    c.push_params("adam.m", &tr.opt.m);
    c.push_params("adam.v", &tr.opt.v);
    c.push_vector("center.global", &tr.state.global_center);
    c.push_vector("center.local", &tr.state.local_center);
    c
}

/// Inverse of [`training_checkpoint`]; `tr` must already have the right
/// architecture.
pub fn restore_training(tr: &mut Pretrainer, c: &Checkpoint) -> Result<()> {
    c.load_params("student", &mut tr.state.student)?;
    c.load_params("teacher", &mut tr.state.teacher)?;
    c.load_params("adam.m", &mut tr.opt.m)?;
    c.load_params("adam.v", &mut tr.opt.v)?;
    c.load_vector("center.global", &mut tr.state.global_center)?;
    c.load_vector("center.local", &mut tr.state.local_center)?;
    tr.state.step = c.meta_u64("step")?;
    tr.opt.t = c.meta_u64("adam_t")?;
    let total = c.meta_u64("total_steps")?;
    if total != tr.total_steps {
        return Err(load_err(format!(
            "checkpoint schedule has {total} steps, this run {}",
            tr.total_steps
        )));
    }
    tr.state.check_consistent()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{Linear, Parameters};

    fn sample() -> Checkpoint {
        let mut c = Checkpoint {
            config_text: "a.b = 1\n".into(),
            ..Default::default()
        };
        c.meta.insert("step".into(), "7".into());
        let mut rng = crate::rng::seeded(1);
        let lin: Linear<f32> = Linear::init(3, 2, &mut rng);
        c.push_params("lin", &lin);
        c.push_vector("v", &Array1::from(vec![1.5f64, -2.0]));
        c
    }

    #[test]
    fn byte_round_trip() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_u64("step").unwrap(), 7);
        assert_eq!(&buf[..8], CKPT_MAGIC);
    }

    #[test]
    fn damage_is_a_load_error() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(matches!(Checkpoint::read_from(&buf[..buf.len() - 1]), Err(AsitError::Load(_))));
        let mut wrong = buf.clone();
        wrong[8] = 9;
        assert!(matches!(Checkpoint::read_from(&wrong[..]), Err(AsitError::Load(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&extra[..]).is_err());
        assert!(Checkpoint::read_from(&b"NOTACKPT"[..]).is_err());
    }

    #[test]
    fn load_params_checks_shapes_and_dtypes() {
        let c = sample();
        let mut rng = crate::rng::seeded(2);
        let mut lin: Linear<f32> = Linear::init(3, 2, &mut rng);
        c.load_params("lin", &mut lin).unwrap();
        let orig = c.get("lin.weight").unwrap();
        assert_eq!(TensorData::F32(lin.weight.iter().copied().collect()), orig.data);

        let mut wide: Linear<f32> = Linear::init(4, 2, &mut rng);
        assert!(matches!(c.load_params("lin", &mut wide), Err(AsitError::Load(_))));
        let mut dbl: Linear<f64> = Linear::init(3, 2, &mut rng);
        assert!(c.load_params("lin", &mut dbl).is_err());
        assert!(c.load_params("other", &mut lin).is_err());
        assert!(lin.all_finite());
    }
}
