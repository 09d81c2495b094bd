//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "SQHTRCKP"
//! version          u32      FORMAT_VERSION
//! metadata_len     u64
//! metadata         metadata_len bytes of UTF-8 (free-form, JSON by convention)
//! param_count      u32
//! per parameter:
//!   name_len       u32
//!   name           name_len bytes of UTF-8
//!   trainable      u8       0 or 1
//!   rank           u32
//!   dims           rank x u64
//!   values         prod(dims) x f64
//! has_adam         u8
//! if has_adam:
//!   step           u64
//!   lr beta1 beta2 eps   4 x f64
//!   has_moments    u8
//!   if has_moments: for each parameter in order, m values then v values
//! ```
//!
//! Values are stored with full `f64` bit patterns, so a save/load round trip
//! is bit-exact.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SQHTRCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub struct Checkpoint {
    pub metadata: String,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

fn put_u8(w: &mut impl Write, v: u8) -> io::Result<()> {
    w.write_all(&[v])
}
fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_f64s(w: &mut impl Write, vs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn get<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}
fn get_u8(r: &mut impl Read) -> io::Result<u8> {
    Ok(get::<1>(r)?[0])
}
fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}
fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}
fn get_f64(r: &mut impl Read) -> io::Result<f64> {
    Ok(f64::from_le_bytes(get(r)?))
}
fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn write_checkpoint(
    mut w: impl Write,
    metadata: &str,
    params: &ParamStore,
    adam: Option<&AdamState>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    put_u64(&mut w, metadata.len() as u64)?;
    w.write_all(metadata.as_bytes())?;
    put_u32(&mut w, params.len() as u32)?;
    for (_, p) in params.iter() {
        put_u32(&mut w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        put_u8(&mut w, p.trainable as u8)?;
        put_u32(&mut w, p.value.rank() as u32)?;
        for &d in p.value.shape() {
            put_u64(&mut w, d as u64)?;
        }
        put_f64s(&mut w, p.value.data())?;
    }
    match adam {
        None => put_u8(&mut w, 0)?,
        Some(st) => {
            put_u8(&mut w, 1)?;
            put_u64(&mut w, st.step)?;
            put_f64s(&mut w, &[st.lr, st.beta1, st.beta2, st.eps])?;
            let has_moments = st.m.len() == params.len() && !st.m.is_empty();
            put_u8(&mut w, has_moments as u8)?;
            if has_moments {
                for (m, v) in st.m.iter().zip(&st.v) {
                    put_f64s(&mut w, m.data())?;
                    put_f64s(&mut w, v.data())?;
                }
            }
        }
    }
    w.flush()
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint, CheckpointError> {
    if &get::<8>(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = get_u64(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata =
        String::from_utf8(meta).map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;

    let count = get_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::Corrupt(format!("parameter name: {e}")))?;
        let trainable = get_u8(&mut r)? != 0;
        let rank = get_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| get_u64(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n = dims.iter().product();
        let data = get_f64s(&mut r, n)?;
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let id = params
            .add(name, t)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params.get_mut(id).trainable = trainable;
    }

    let adam = if get_u8(&mut r)? != 0 {
        let step = get_u64(&mut r)?;
        let lr = get_f64(&mut r)?;
        let beta1 = get_f64(&mut r)?;
        let beta2 = get_f64(&mut r)?;
        let eps = get_f64(&mut r)?;
        let mut st = AdamState {
            step,
            m: Vec::new(),
            v: Vec::new(),
            lr,
            beta1,
            beta2,
            eps,
        };
        if get_u8(&mut r)? != 0 {
            for (_, p) in params.iter() {
                let shape = p.value.shape().to_vec();
                let n = p.value.len();
                let m = get_f64s(&mut r, n)?;
                let v = get_f64s(&mut r, n)?;
                st.m.push(Tensor::new(shape.clone(), m).expect("shape"));
                st.v.push(Tensor::new(shape, v).expect("shape"));
            }
        }
        Some(st)
    } else {
        None
    };
    Ok(Checkpoint {
        metadata,
        params,
        adam,
    })
}
