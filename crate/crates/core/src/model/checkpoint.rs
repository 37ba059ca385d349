use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{expected_shapes, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KDFC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| bad(format!("unexpected end of data: {e}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Magic, version, then the JSON-encoded config prefixed by its byte length.
pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], config: &ModelConfig) -> Result<()> {
    let json = serde_json::to_vec(config)?;
    let len = u32::try_from(json.len()).map_err(|_| bad("config too large"))?;
    let io = |e| bad(format!("write failed: {e}"));
    w.write_all(magic).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&len.to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<ModelConfig> {
    let mut m = [0u8; 4];
    read_exact(r, &mut m)?;
    if &m != magic {
        return Err(bad(format!("bad magic {m:?}")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    read_exact(r, &mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    config.validate()?;
    Ok(config)
}

pub(crate) fn write_f32s<W: Write, T: Scalar>(w: &mut W, data: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &x in data {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| bad(format!("write failed: {e}")))
}

pub(crate) fn read_f32s<R: Read, T: Scalar>(r: &mut R, n: usize) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect())
}

/// Header followed by every tensor as little-endian f32, declaration order.
pub fn write_params<W: Write, T: Scalar>(w: &mut W, params: &ModelParams<T>) -> Result<()> {
    write_header(w, CHECKPOINT_MAGIC, &params.config)?;
    for (_, t) in params.tensors() {
        write_f32s(w, t.data())?;
    }
    Ok(())
}

pub fn read_params<R: Read, T: Scalar>(r: &mut R) -> Result<ModelParams<T>> {
    let config = read_header(r, CHECKPOINT_MAGIC)?;
    let tensors = expected_shapes(&config)
        .iter()
        .map(|s| Tensor::from_vec(s, read_f32s(r, s.iter().product())?))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(config, tensors)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_params(&mut w, params)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let p = read_params(&mut r)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(p),
        Ok(_) => Err(bad("trailing bytes after last tensor")),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn round_trip_is_bit_exact() {
        for tied in [true, false] {
            let c = ModelConfig::new(2, 16, 32, 4, 2, 40, 8, tied);
            let p = build_model::<f32>(&c, 11).unwrap();
            let mut buf = Vec::new();
            write_params(&mut buf, &p).unwrap();
            let q: ModelParams<f32> = read_params(&mut buf.as_slice()).unwrap();
            assert!(p.bit_eq(&q));
            let header = 12 + serde_json::to_vec(&c).unwrap().len();
            assert_eq!(buf.len(), header + 4 * p.numel());
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let c = ModelConfig::new(1, 8, 16, 2, 1, 10, 4, true);
        let p = build_model::<f32>(&c, 0).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(read_params::<_, f32>(&mut wrong.as_slice()).is_err());
        buf.truncate(buf.len() - 1);
        assert!(read_params::<_, f32>(&mut buf.as_slice()).is_err());
    }
}
