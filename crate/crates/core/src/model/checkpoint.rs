//! `DQCM` checkpoint files.
//!
//! ```text
//! magic b"DQCM" | version u32 | vocab_size u32 | context_length u32 | d_model u32
//! | n_layers u32 | n_heads u32 | seed u64 | step u64 | tensor_count u32
//! per tensor: name_len u32 | name utf-8 | rank u32 | dims u32 x rank | f32 x prod(dims)
//! ```
//! All little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ModelConfig, ModelError, Params, StudentModel};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DQCM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &StudentModel) -> Vec<u8> {
    let c = model.config();
    let mut buf = Vec::with_capacity(64 + 4 * model.params.num_scalars());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    for v in [c.vocab_size, c.context_length, c.d_model, c.n_layers, c.n_heads] {
        buf.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    buf.write_u64::<LittleEndian>(c.seed).unwrap();
    buf.write_u64::<LittleEndian>(model.step()).unwrap();
    let tensors = model.params.tensors();
    buf.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for t in tensors {
        buf.write_u32::<LittleEndian>(t.name.len() as u32).unwrap();
        buf.extend_from_slice(t.name.as_bytes());
        buf.write_u32::<LittleEndian>(t.shape.len() as u32).unwrap();
        for &d in &t.shape {
            buf.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &x in t.data {
            buf.write_f32::<LittleEndian>(x as f32).unwrap();
        }
    }
    buf
}

pub fn save_checkpoint(model: &StudentModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&encode_checkpoint(model)).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<StudentModel, ModelError> {
    let mut r = bytes;
    let eof = |_| bad("unexpected end of file");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    }
    let seed = r.read_u64::<LittleEndian>().map_err(eof)?;
    let step = r.read_u64::<LittleEndian>().map_err(eof)?;
    let config = ModelConfig {
        vocab_size: dims[0],
        context_length: dims[1],
        d_model: dims[2],
        n_layers: dims[3],
        n_heads: dims[4],
        seed,
    };
    config.validate()?;
    let mut params = Params::zeros(&config);
    let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let slots = params.tensors_mut();
    if count != slots.len() {
        return Err(bad(format!("{count} tensors, config implies {}", slots.len())));
    }
    for slot in slots {
        let name_len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if name_len > r.len() {
            return Err(bad("unexpected end of file"));
        }
        let (name, rest) = r.split_at(name_len);
        r = rest;
        let name = std::str::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        if name != slot.name {
            return Err(bad(format!("expected tensor {}, found {name}", slot.name)));
        }
        let rank = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
        }
        if shape != slot.shape {
            return Err(bad(format!(
                "tensor {name} has shape {shape:?}, config implies {:?}",
                slot.shape
            )));
        }
        for x in slot.data.iter_mut() {
            *x = r.read_f32::<LittleEndian>().map_err(eof)? as f64;
        }
    }
    if !r.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.len())));
    }
    StudentModel::from_parts(config, params, step)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StudentModel, ModelError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
