//! Checkpoint file: magic `WSSL`, version, tensor records, then a trailing
//! section with per-tensor flags (frozen, buffer) and optimizer state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::optim::{AdamConfig, Optimizer, OptimizerKind, SgdConfig};
use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"WSSL";
const VERSION: u16 = 1;
const FLAG_FROZEN: u8 = 1;
const FLAG_BUFFER: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub optimizer: Option<Optimizer<f32>>,
}

fn write_tensor<W: Write>(w: &mut ByteWriter<W>, name: &str, t: &Tensor<f32>) -> Result<()> {
    if name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
        return Err(Error::Checkpoint(format!("tensor `{name}` cannot be encoded")));
    }
    w.u16(name.len() as u16)?;
    w.bytes(name.as_bytes())?;
    w.u8(t.shape.len() as u8)?;
    for d in &t.shape {
        w.u32(*d as u32)?;
    }
    for v in &t.data {
        w.f32(*v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut ByteReader<R>) -> Result<(String, Tensor<f32>)> {
    let at = r.offset();
    let n = r.u16()? as usize;
    let mut name = vec![0u8; n];
    r.fill(&mut name)?;
    let name = String::from_utf8(name).or_else(|_| r.fail(at, "tensor name is not UTF-8"))?;
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let data = r.f32_vec(shape.iter().product())?;
    Ok((name, Tensor { shape, data }))
}

impl Checkpoint {
    pub fn new(params: ParamStore<f32>, optimizer: Option<Optimizer<f32>>) -> Self {
        Checkpoint { params, optimizer }
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = ByteWriter::new(w);
        w.bytes(MAGIC)?;
        w.u16(VERSION)?;
        let entries = self.params.entries();
        w.u32(entries.len() as u32)?;
        for e in entries {
            write_tensor(&mut w, &e.name, &e.value)?;
        }
        for e in entries {
            let mut f = 0u8;
            if e.frozen {
                f |= FLAG_FROZEN;
            }
            if e.kind == ParamKind::Buffer {
                f |= FLAG_BUFFER;
            }
            w.u8(f)?;
        }
        match &self.optimizer {
            None => w.u8(0)?,
            Some(opt) => {
                match opt.kind {
                    OptimizerKind::Sgd(c) => {
                        w.u8(1)?;
                        w.f64(c.momentum)?;
                        w.f64(c.weight_decay)?;
                    }
                    OptimizerKind::Adam(c) => {
                        w.u8(2)?;
                        w.f64(c.beta1)?;
                        w.f64(c.beta2)?;
                        w.f64(c.eps)?;
                        w.f64(c.weight_decay)?;
                    }
                }
                w.u64(opt.step)?;
                w.u32(opt.names.len() as u32)?;
                for (name, slots) in opt.names.iter().zip(&opt.slots) {
                    w.u8(slots.len() as u8)?;
                    for s in slots {
                        write_tensor(&mut w, name, s)?;
                    }
                }
            }
        }
        w.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            tensors.push(read_tensor(&mut r)?);
        }
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            let at = r.offset();
            let f = r.u8()?;
            if f & !(FLAG_FROZEN | FLAG_BUFFER) != 0 {
                return r.fail(at, format!("unknown tensor flags {f:#04x}"));
            }
            if params.get(&name).is_some() {
                return r.fail(at, format!("duplicate tensor `{name}`"));
            }
            let kind = if f & FLAG_BUFFER != 0 { ParamKind::Buffer } else { ParamKind::Weight };
            let id = params.add(name, t, kind);
            params.entries_mut()[id.0].frozen = f & FLAG_FROZEN != 0;
        }
        let kind_at = r.offset();
        let optimizer = match r.u8()? {
            0 => None,
            k @ (1 | 2) => {
                let kind = if k == 1 {
                    OptimizerKind::Sgd(SgdConfig {
                        momentum: r.f64()?,
                        weight_decay: r.f64()?,
                    })
                } else {
                    OptimizerKind::Adam(AdamConfig {
                        beta1: r.f64()?,
                        beta2: r.f64()?,
                        eps: r.f64()?,
                        weight_decay: r.f64()?,
                    })
                };
                let step = r.u64()?;
                let n = r.u32()? as usize;
                let mut names = Vec::with_capacity(n.min(4096));
                let mut slots = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    let ns = r.u8()? as usize;
                    let mut s = Vec::with_capacity(ns);
                    let mut name = String::new();
                    for _ in 0..ns {
                        let (nm, t) = read_tensor(&mut r)?;
                        name = nm;
                        s.push(t);
                    }
                    names.push(name);
                    slots.push(s);
                }
                Some(Optimizer { kind, step, names, slots })
            }
            other => return r.fail(kind_at, format!("unknown optimizer kind {other}")),
        };
        r.expect_eof()?;
        Ok(Checkpoint { params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
