//! Binary parameter container: named tensors, 32-bit float payloads, and a
//! trailing SHA-256 integrity checksum.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::num::{Params, Tensor};

pub const MAGIC: &[u8; 8] = b"RADIFFCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(params: &Params) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    // Params iterates in name order, which gives the sorted layout.
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn from_bytes(buf: &[u8]) -> Result<Params> {
    let err = |msg: &str| Error::Checkpoint(msg.to_string());
    if buf.len() < MAGIC.len() + 8 + 32 {
        return Err(err("truncated checkpoint"));
    }
    let (body, checksum) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(err("checksum mismatch: checkpoint corrupted"));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Checkpoint("truncated checkpoint body".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} not supported (expected {FORMAT_VERSION})"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut params = Params::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| err("non-utf8 tensor name"))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(err("tensor names not strictly sorted"));
            }
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut pos, numel * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(name.clone(), Tensor::new(shape, data));
        prev_name = Some(name);
    }
    if pos != body.len() {
        return Err(err("trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn save(params: &Params, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Params> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        p.insert("z.last", Tensor::randn(&mut rng, &[3, 2], 1.0));
        p.insert("a.first", Tensor::randn(&mut rng, &[1, 4], 0.5));
        p.insert("m.mid", Tensor::randn(&mut rng, &[2, 2], 2.0));
        p
    }

    #[test]
    fn round_trip_bit_exact_at_f32() {
        let p = sample_params();
        let bytes = to_bytes(&p);
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&q), bytes, "save(load(x)) must be byte-identical");
        for (name, t) in p.iter() {
            let r = q.get(name);
            assert_eq!(t.shape, r.shape);
            for (a, b) in t.data.iter().zip(&r.data) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn every_corruption_detected() {
        let p = sample_params();
        let bytes = to_bytes(&p);
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(from_bytes(&bad).is_err(), "flip at byte {i} went undetected");
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let p = sample_params();
        let mut bytes = to_bytes(&p);
        bytes[8] = 99; // version field
        // recompute checksum so only the version is wrong
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let e = from_bytes(&bytes).unwrap_err();
        assert!(e.to_string().contains("version"));
    }

    #[test]
    fn file_round_trip() {
        let p = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&p, &path).unwrap();
        let q = load(&path).unwrap();
        // q holds the f32-rounded values; a second round trip is lossless
        let path2 = dir.path().join("model2.ckpt");
        save(&q, &path2).unwrap();
        let r = load(&path2).unwrap();
        assert_eq!(q.checksum(), r.checksum());
    }
}
