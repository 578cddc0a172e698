//! Binary parameter checkpoints.
//!
//! Layout: magic `CTK1`, version u32, parameter count u32, then per
//! parameter: name length u32, UTF-8 name, rank u32, extents as u64 each,
//! raw little-endian f32 values. Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::error::{DiffError, DiffResult};
use super::params::ParamSet;
use super::real::Real;
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CTK1";
const VERSION: u32 = 1;

pub fn encode<R: Real>(params: &ParamSet<R>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &e in value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> DiffResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DiffError::Checkpoint { message: "unexpected end of file".into() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> DiffResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> DiffResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint into (name, tensor) pairs.
pub fn decode<R: Real>(bytes: &[u8]) -> DiffResult<Vec<(String, Tensor<R>)>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(DiffError::Checkpoint { message: "bad magic, not a CTK1 file".into() });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(DiffError::Checkpoint { message: format!("unsupported version {version}") });
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| DiffError::Checkpoint { message: "non-UTF-8 parameter name".into() })?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            data.push(R::from_f64(v as f64));
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(DiffError::Checkpoint { message: "trailing bytes after last parameter".into() });
    }
    Ok(out)
}

/// Loads a checkpoint into an existing registry; every stored name must
/// match a registered parameter of the same shape.
pub fn load_into<R: Real>(bytes: &[u8], params: &mut ParamSet<R>) -> DiffResult<()> {
    let entries = decode::<R>(bytes)?;
    if entries.len() != params.len() {
        return Err(DiffError::Checkpoint {
            message: format!("checkpoint has {} parameters, model has {}", entries.len(), params.len()),
        });
    }
    for (name, tensor) in entries {
        let id = params.id_of(&name).ok_or_else(|| DiffError::Checkpoint {
            message: format!("unknown parameter '{name}'"),
        })?;
        if params.value(id).shape() != tensor.shape() {
            return Err(DiffError::Checkpoint {
                message: format!(
                    "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                    tensor.shape(),
                    params.value(id).shape()
                ),
            });
        }
        *params.value_mut(id) = tensor;
    }
    Ok(())
}

/// Atomic write: temp file in the target directory, then rename.
pub fn save_file<R: Real>(params: &ParamSet<R>, path: &Path) -> DiffResult<()> {
    let bytes = encode(params);
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_file<R: Real>(path: &Path, params: &mut ParamSet<R>) -> DiffResult<()> {
    let bytes = fs::read(path)?;
    load_into(&bytes, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("a", Tensor::from_vec(&[2, 3], vec![0.1, -2.5, 3.75, f32::MIN_POSITIVE, 1e30, -0.0]).unwrap())
            .unwrap();
        ps.register("b.weight", Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let bytes = encode(&ps);
        let mut restored = ParamSet::<f32>::new();
        restored.register("a", Tensor::zeros(&[2, 3])).unwrap();
        restored.register("b.weight", Tensor::zeros(&[4])).unwrap();
        load_into(&bytes, &mut restored).unwrap();
        for ((_, x), (_, y)) in ps.iter().zip(restored.iter()) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        // and the re-encoded stream is identical
        assert_eq!(bytes, encode(&restored));
    }

    #[test]
    fn bad_magic_rejected() {
        let err = decode::<f32>(b"NOPE").unwrap_err();
        assert!(matches!(err, DiffError::Checkpoint { .. }));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("a", Tensor::zeros(&[2])).unwrap();
        let bytes = encode(&ps);
        let mut other = ParamSet::<f32>::new();
        other.register("a", Tensor::zeros(&[3])).unwrap();
        assert!(load_into(&bytes, &mut other).is_err());
    }
}
