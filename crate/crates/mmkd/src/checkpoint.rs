//! Single-file binary checkpoints for models, alignment maps, and meta
//! parameters.
//!
//! Layout (all integers little-endian): magic `"MMKD"`, format version,
//! a kind tag, a kind-specific architecture descriptor, then named parameter
//! blocks as 32-bit little-endian floats. Parameters are computed in `f64`
//! and stored as `f32`; loading widens exactly, so file -> load -> save
//! reproduces the file byte for byte.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use crate::error::{MmkdError, Result};
use crate::meta::MetaParams;
use crate::nn::{AlignmentMap, Architecture, ConvBlock, Model, ParamSet};

const MAGIC: &[u8; 4] = b"MMKD";
const VERSION: u32 = 1;

const KIND_MLP: u8 = 0;
const KIND_CNN: u8 = 1;
const KIND_ALIGN: u8 = 2;
const KIND_META: u8 = 3;

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { bytes: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }

    fn params(&mut self, params: &ParamSet) {
        self.u32(params.len() as u32);
        for (name, value) in params.entries() {
            self.str(name);
            self.u32(value.nrows() as u32);
            self.u32(value.ncols() as u32);
            for v in value.iter() {
                self.bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
}

struct Reader {
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Ok(Reader { bytes, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MmkdError::format(
                self.pos as u64,
                format!("truncated checkpoint: wanted {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let pos = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| MmkdError::format(pos as u64, "invalid UTF-8 in name"))
    }

    fn params(&mut self) -> Result<ParamSet> {
        let n = self.u32()? as usize;
        let mut out = ParamSet::new();
        for _ in 0..n {
            let name = self.str()?;
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let raw = self.take(rows * cols * 4)?;
            let mut value = Array2::zeros((rows, cols));
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                value[(i / cols.max(1), i % cols.max(1))] =
                    f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            out.push(name, value);
        }
        Ok(out)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(MmkdError::format(
                self.pos as u64,
                format!("{} trailing bytes in checkpoint", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn header(w: &mut Writer, kind: u8) {
    w.bytes.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(kind);
}

fn read_header(r: &mut Reader) -> Result<u8> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(MmkdError::format(0, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MmkdError::format(4, format!("unsupported version {version}")));
    }
    r.u8()
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut w = Writer::new();
    match &model.arch {
        Architecture::Mlp { sizes } => {
            header(&mut w, KIND_MLP);
            w.u32(sizes.len() as u32);
            for &s in sizes {
                w.u32(s as u32);
            }
        }
        Architecture::Cnn {
            in_channels,
            height,
            width,
            blocks,
            classes,
        } => {
            header(&mut w, KIND_CNN);
            w.u32(*in_channels as u32);
            w.u32(*height as u32);
            w.u32(*width as u32);
            w.u32(*classes as u32);
            w.u32(blocks.len() as u32);
            for b in blocks {
                w.u32(b.out_channels as u32);
                w.u32(b.kernel as u32);
                w.u32(b.stride as u32);
                w.u32(b.pad as u32);
            }
        }
    }
    w.params(&model.params);
    fs::write(path, w.bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut r = Reader::open(path)?;
    let kind = read_header(&mut r)?;
    let arch = match kind {
        KIND_MLP => {
            let n = r.u32()? as usize;
            let mut sizes = Vec::with_capacity(n);
            for _ in 0..n {
                sizes.push(r.u32()? as usize);
            }
            Architecture::Mlp { sizes }
        }
        KIND_CNN => {
            let in_channels = r.u32()? as usize;
            let height = r.u32()? as usize;
            let width = r.u32()? as usize;
            let classes = r.u32()? as usize;
            let n = r.u32()? as usize;
            let mut blocks = Vec::with_capacity(n);
            for _ in 0..n {
                blocks.push(ConvBlock {
                    out_channels: r.u32()? as usize,
                    kernel: r.u32()? as usize,
                    stride: r.u32()? as usize,
                    pad: r.u32()? as usize,
                });
            }
            Architecture::Cnn {
                in_channels,
                height,
                width,
                blocks,
                classes,
            }
        }
        other => {
            return Err(MmkdError::format(
                8,
                format!("checkpoint kind {other} is not a model"),
            ))
        }
    };
    let params = r.params()?;
    r.finish()?;
    let expected = Model::new(arch.clone(), 0).params;
    validate_layout(&expected, &params)?;
    Ok(Model::from_parts(arch, params))
}

pub fn save_align(path: &Path, align: &AlignmentMap) -> Result<()> {
    let mut w = Writer::new();
    header(&mut w, KIND_ALIGN);
    w.u32(align.input_dim() as u32);
    w.u32(align.output_dim() as u32);
    w.params(align.params());
    fs::write(path, w.bytes)?;
    Ok(())
}

pub fn load_align(path: &Path) -> Result<AlignmentMap> {
    let mut r = Reader::open(path)?;
    let kind = read_header(&mut r)?;
    if kind != KIND_ALIGN {
        return Err(MmkdError::format(8, "checkpoint is not an alignment map"));
    }
    let d_s = r.u32()? as usize;
    let d_t = r.u32()? as usize;
    let params = r.params()?;
    r.finish()?;
    let align = AlignmentMap::from_params(params)?;
    if align.input_dim() != d_s || align.output_dim() != d_t {
        return Err(MmkdError::config(format!(
            "alignment dims in descriptor ({d_s}->{d_t}) do not match stored weight \
             ({}->{})",
            align.input_dim(),
            align.output_dim()
        )));
    }
    Ok(align)
}

pub fn save_meta(path: &Path, meta: &MetaParams) -> Result<()> {
    let mut w = Writer::new();
    header(&mut w, KIND_META);
    w.u32(meta.teachers as u32);
    w.u32(meta.classes as u32);
    w.u32(meta.batch as u32);
    w.u32(meta.hidden_logit as u32);
    w.u32(meta.hidden_feature as u32);
    w.params(meta.params());
    fs::write(path, w.bytes)?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<MetaParams> {
    let mut r = Reader::open(path)?;
    let kind = read_header(&mut r)?;
    if kind != KIND_META {
        return Err(MmkdError::format(8, "checkpoint is not meta parameters"));
    }
    let teachers = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let batch = r.u32()? as usize;
    let _hidden_logit = r.u32()? as usize;
    let _hidden_feature = r.u32()? as usize;
    let params = r.params()?;
    r.finish()?;
    MetaParams::from_parts(params, teachers, classes, batch)
}

fn validate_layout(expected: &ParamSet, got: &ParamSet) -> Result<()> {
    if expected.len() != got.len() {
        return Err(MmkdError::config(format!(
            "checkpoint has {} parameter blocks, architecture needs {}",
            got.len(),
            expected.len()
        )));
    }
    for ((en, ev), (gn, gv)) in expected.entries().iter().zip(got.entries()) {
        if en != gn || ev.dim() != gv.dim() {
            return Err(MmkdError::config(format!(
                "checkpoint block '{gn}' {:?} does not match architecture block '{en}' {:?}",
                gv.dim(),
                ev.dim()
            )));
        }
    }
    Ok(())
}
