//! Binary scene files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "FSPL"  version:u32=1  N:u64  D:u32  C:u32
//! N × [position 3×f32, quaternion (w,x,y,z) 4×f32, log_scale 3×f32, opacity_logit f32, feature D×f32]
//! decoder: E:u32 flags:u8 C:u32  W1  b1  W2  b2   (row-major f32)
//! crc32 of everything above: u32
//! ```
//!
//! Values are held as `f64` in memory and written as `f32`, so a round trip is exact
//! for scenes whose values are already representable in `f32` (see
//! [`SplatScene::round_to_f32`]).

use std::path::Path;

use nalgebra::Vector3;

use crate::decoder::{Decoder, EmbeddingConfig, HIDDEN_WIDTH};
use crate::error::{Error, Result};
use crate::scene::{Gaussian3D, SplatScene};

pub const MAGIC: &[u8; 4] = b"FSPL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub fn record_len(feature_dim: usize) -> usize {
    4 * (3 + 4 + 3 + 1 + feature_dim)
}

/// Serializes a scene and its decoder.
pub fn encode_scene(scene: &SplatScene, dec: &Decoder) -> Result<Vec<u8>> {
    scene.validate()?;
    dec.validate()?;
    if dec.feature_dim != scene.feature_dim || dec.class_count != scene.class_count {
        return Err(Error::Contract(format!(
            "decoder ({}, {}) does not match scene (D={}, C={})",
            dec.feature_dim, dec.class_count, scene.feature_dim, scene.class_count
        )));
    }
    let d = scene.feature_dim;
    let mut out = Vec::with_capacity(HEADER_LEN + scene.len() * record_len(d) + dec.parameter_count() * 4 + 13);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(scene.class_count as u32).to_le_bytes());
    let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for g in &scene.gaussians {
        let values = g
            .position
            .iter()
            .chain(&g.rotation)
            .chain(g.log_scale.iter())
            .chain(std::iter::once(&g.opacity_logit))
            .chain(&g.feature);
        for &v in values {
            put(&mut out, v);
        }
    }
    out.extend_from_slice(&(dec.config.dim() as u32).to_le_bytes());
    out.push(dec.config.flags());
    out.extend_from_slice(&(dec.class_count as u32).to_le_bytes());
    for &v in dec.w1.iter().chain(&dec.b1).chain(&dec.w2).chain(&dec.b2) {
        put(&mut out, v);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: offset as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(
                self.bytes.len(),
                format!("file truncated while reading {what} (needed {n} bytes at offset {})", self.pos),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Parses a scene file image. Errors carry the byte offset where decoding failed.
pub fn decode_scene(bytes: &[u8]) -> Result<(SplatScene, Decoder)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return r.fail(0, format!("bad magic {:?}, expected \"FSPL\"", String::from_utf8_lossy(magic)));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(4, format!("unsupported version {version}, expected {VERSION}"));
    }
    let n = r.u64("gaussian count")?;
    let d = r.u32("feature dimension")? as usize;
    let c = r.u32("class count")? as usize;
    if d == 0 {
        return r.fail(16, "feature dimension is zero");
    }
    let needed = (n as u128) * record_len(d) as u128;
    if needed > (bytes.len() - r.pos) as u128 {
        // Walk to the truncation point so the offset names the first incomplete record.
        let complete = (bytes.len() - r.pos) / record_len(d);
        let at = r.pos + complete * record_len(d);
        return r.fail(
            at,
            format!("file truncated inside gaussian record {complete} of {n}"),
        );
    }
    let mut gaussians = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let v = r.f32s(11 + d, "gaussian record")?;
        gaussians.push(Gaussian3D {
            position: Vector3::new(v[0], v[1], v[2]),
            rotation: [v[3], v[4], v[5], v[6]],
            log_scale: Vector3::new(v[7], v[8], v[9]),
            opacity_logit: v[10],
            feature: v[11..].to_vec(),
        });
    }

    let blob_start = r.pos;
    let e = r.u32("decoder embedding size")? as usize;
    let flags_at = r.pos;
    let flags = r.u8("decoder flags")?;
    let config = match EmbeddingConfig::from_flags(flags) {
        Some(cfg) => cfg,
        None => return r.fail(flags_at, format!("unknown embedding flags {flags:#04x}")),
    };
    if config.dim() != e {
        return r.fail(blob_start, format!("embedding size {e} disagrees with flags (expects {})", config.dim()));
    }
    let dc_at = r.pos;
    let dc = r.u32("decoder class count")? as usize;
    if dc != c {
        return r.fail(dc_at, format!("decoder has {dc} classes, header says {c}"));
    }
    let mut dec = Decoder::zeros(d, config, c);
    dec.w1 = r.f32s(HIDDEN_WIDTH * (d + e), "decoder W1")?;
    dec.b1 = r.f32s(HIDDEN_WIDTH, "decoder b1")?;
    dec.w2 = r.f32s((3 + c) * HIDDEN_WIDTH, "decoder W2")?;
    dec.b2 = r.f32s(3 + c, "decoder b2")?;

    let crc_at = r.pos;
    let stored = r.u32("checksum")?;
    let actual = crc32fast::hash(&bytes[..crc_at]);
    if stored != actual {
        return r.fail(crc_at, format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"));
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes after checksum", bytes.len() - r.pos));
    }
    let scene = SplatScene {
        gaussians,
        feature_dim: d,
        class_count: c,
    };
    Ok((scene, dec))
}

pub fn save_scene(scene: &SplatScene, dec: &Decoder, path: &Path) -> Result<()> {
    let bytes = encode_scene(scene, dec)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<(SplatScene, Decoder)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&bytes)
}
