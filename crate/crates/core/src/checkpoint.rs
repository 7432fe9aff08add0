//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "STNCKPT\0"
//! version      u32
//! config_len   u32, then config_len bytes of NetworkConfig JSON
//! param_count  u32
//! per parameter:
//!   name_len u16, name bytes (UTF-8)
//!   kind u8 (0 transform, 1 weight, 2 bias), frozen u8
//!   ndim u8, ndim × u32 extents
//!   values as f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::network::{Network, NetworkConfig, ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(#[from] crate::error::Error),
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Transform => 0,
        ParamKind::Weight => 1,
        ParamKind::Bias => 2,
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(net: &Network<T>, mut w: W) -> Result<(), CheckpointError> {
    let config = serde_json::to_vec(net.config()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(net.params().len() as u32).to_le_bytes())?;
    for p in net.params().iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[kind_code(p.kind), p.frozen as u8, p.tensor.shape().len() as u8])?;
        for &d in p.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.tensor.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(net, &mut buf).expect("writing to memory cannot fail");
    buf
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Malformed("truncated file".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(CheckpointError::Malformed("truncated file".into()));
    }
    Ok(buf)
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Network<T>, CheckpointError> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = read_u32(&mut r)? as usize;
    let config: NetworkConfig = serde_json::from_slice(&read_bytes(&mut r, len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let [kind, frozen, ndim] = read_array::<3, _>(&mut r)?;
        let kind = match kind {
            0 => ParamKind::Transform,
            1 => ParamKind::Weight,
            2 => ParamKind::Bias,
            k => return Err(CheckpointError::Malformed(format!("unknown parameter kind {k}"))),
        };
        let shape = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = read_bytes(&mut r, numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let i = params.push(name, kind, tensor);
        if frozen != 0 {
            let p = params.get_mut(i);
            p.frozen = true;
            p.tensor.set_requires_grad(false);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Network::from_parts(config, params)?)
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Head, TransformFamily};

    fn net() -> Network<f64> {
        let mut cfg = NetworkConfig::uniform(TransformFamily::Deformable, 2, 4, 3, Head::Segmentation(3));
        cfg.head_hidden = vec![8];
        init_params(&cfg, 5).unwrap().freeze_transforms()
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let n = net();
        let bytes = to_bytes(&n);
        let back: Network<f64> = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, n);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&net());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f64, _>(bad.as_slice()), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            read_checkpoint::<f64, _>(bad.as_slice()),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint::<f64, _>(truncated), Err(CheckpointError::Malformed(_))));
    }
}
