//! `PAKA1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PAKA1"
//! u32                      tensor count
//! per tensor:  u32 name length, name bytes (UTF-8),
//!              u8 rank, rank × u64 dims, u8 scalar width (32 or 64)
//! payloads in manifest order, row-major, f32 or f64
//! ```
//!
//! A checkpoint holds the student and the teacher (`student.*`,
//! `teacher.*`) plus an `arch` tensor describing the architecture.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{BorderMode, EncoderConfig, EncoderParams, HeadConfig, MixerBlock, Model, ProjectionHeadParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PAKA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    F32,
    F64,
}

impl ScalarWidth {
    fn bits(self) -> u8 {
        match self {
            ScalarWidth::F32 => 32,
            ScalarWidth::F64 => 64,
        }
    }
}

/// A named tensor as stored on disk; payload widened to f64 in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: Model,
    pub teacher: Model,
}

fn arch_tensor(model: &Model) -> NamedTensor {
    let c = model.encoder.config;
    let border = match c.border {
        BorderMode::Clamp => 0.0,
        BorderMode::Wrap => 1.0,
    };
    NamedTensor {
        name: "arch".into(),
        dims: vec![7],
        data: vec![
            c.patch_size as f64,
            c.in_channels as f64,
            c.dim as f64,
            c.blocks as f64,
            border,
            model.head.w1.ncols() as f64,
            model.head.dim_out() as f64,
        ],
    }
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![arch_tensor(&self.student)];
        for (prefix, model) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (name, dims, data) in model.tensors() {
                out.push(NamedTensor { name: format!("{prefix}.{name}"), dims, data: data.to_vec() });
            }
        }
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint is missing tensor '{name}'")))
        };
        let arch = find("arch")?;
        if arch.data.len() != 7 {
            return Err(Error::ShapeMismatch("arch tensor must have 7 entries".into()));
        }
        let as_usize = |v: f64| v as usize;
        let config = EncoderConfig {
            patch_size: as_usize(arch.data[0]),
            in_channels: as_usize(arch.data[1]),
            dim: as_usize(arch.data[2]),
            blocks: as_usize(arch.data[3]),
            border: if arch.data[4] == 0.0 { BorderMode::Clamp } else { BorderMode::Wrap },
        };
        let head_cfg = HeadConfig { hidden: as_usize(arch.data[5]), out: as_usize(arch.data[6]) };

        let load = |prefix: &str| -> Result<Model> {
            let mat = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
                let t = find(&format!("{prefix}.{name}"))?;
                if t.dims != [rows, cols] {
                    return Err(Error::ShapeMismatch(format!("{prefix}.{name}: expected {rows}x{cols}, got {:?}", t.dims)));
                }
                Ok(Array2::from_shape_vec((rows, cols), t.data.clone()).expect("length checked on read"))
            };
            let vec = |name: &str, len: usize| -> Result<Array1<f64>> {
                let t = find(&format!("{prefix}.{name}"))?;
                if t.dims != [len] {
                    return Err(Error::ShapeMismatch(format!("{prefix}.{name}: expected [{len}], got {:?}", t.dims)));
                }
                Ok(Array1::from(t.data.clone()))
            };
            let d = config.dim;
            let blocks = (0..config.blocks)
                .map(|i| {
                    Ok(MixerBlock {
                        w1: mat(&format!("encoder.blocks.{i}.w1"), d, d)?,
                        b1: vec(&format!("encoder.blocks.{i}.b1"), d)?,
                        w2: mat(&format!("encoder.blocks.{i}.w2"), d, d)?,
                        b2: vec(&format!("encoder.blocks.{i}.b2"), d)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let encoder = EncoderParams {
                config,
                patch_embed: mat("encoder.patch_embed", config.patch_len(), d)?,
                embed_bias: vec("encoder.embed_bias", d)?,
                blocks,
            };
            let (hd, od) = (head_cfg.hidden, head_cfg.out);
            let head = ProjectionHeadParams {
                w1: mat("head.w1", d, hd)?,
                b1: vec("head.b1", hd)?,
                w2: mat("head.w2", hd, hd)?,
                b2: vec("head.b2", hd)?,
                w3: mat("head.w3", hd, od)?,
                b3: vec("head.b3", od)?,
            };
            Ok(Model { encoder, head })
        };
        Ok(Self { student: load("student")?, teacher: load("teacher")? })
    }

    pub fn write_to<W: Write>(&self, w: &mut W, width: ScalarWidth) -> Result<()> {
        write_tensors(w, &self.to_tensors(), width)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        Self::from_tensors(&read_tensors(r)?)
    }

    pub fn save(&self, path: &Path, width: ScalarWidth) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, width)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Io(io) => Error::CorruptFile { path: path.to_path_buf(), reason: io.to_string() },
            Error::CorruptFile { reason, .. } => Error::CorruptFile { path: path.to_path_buf(), reason },
            other => other,
        })
    }
}

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[NamedTensor], width: ScalarWidth) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.dims.len() as u8])?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[width.bits()])?;
    }
    for t in tensors {
        for &v in &t.data {
            match width {
                ScalarWidth::F64 => w.write_all(&v.to_le_bytes())?,
                ScalarWidth::F32 => w.write_all(&(v as f32).to_le_bytes())?,
            }
        }
    }
    Ok(())
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::CorruptFile { path: Default::default(), reason: reason.into() }
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| corrupt("unexpected end of file"))?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>> {
    if &read_exact::<_, 5>(r)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        if len > 1 << 16 {
            return Err(corrupt("tensor name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rank = read_exact::<_, 1>(r)?[0] as usize;
        let dims = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_exact(r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let width = match read_exact::<_, 1>(r)?[0] {
            32 => ScalarWidth::F32,
            64 => ScalarWidth::F64,
            other => return Err(corrupt(format!("unsupported scalar width {other}"))),
        };
        manifest.push((name, dims, width));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, dims, width) in manifest {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(match width {
                ScalarWidth::F64 => f64::from_le_bytes(read_exact(r)?),
                ScalarWidth::F32 => f32::from_le_bytes(read_exact(r)?) as f64,
            });
        }
        out.push(NamedTensor { name, dims, data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(out)
}
