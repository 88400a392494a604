//! Versioned binary network checkpoints.
//!
//! Layout (little-endian): magic "BIQN", version u32, input_size u32,
//! mean kind u8 (0 per-channel, 1 full raster) + mean payload, then the
//! eight parameter tensors, each as len u64 + f32 values. The SHA-256 of
//! everything above is appended and doubles as the checkpoint's identity
//! hash, recorded by any quality model that references it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::imageops::{MeanImage, RasterImage};

use super::desk::DeskCnn;
use super::BackboneError;

const MAGIC: &[u8; 4] = b"BIQN";
const VERSION: u32 = 1;

/// A backbone ready for extraction: network parameters plus the mean its
/// crops must be centered with.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneBundle {
    pub net: DeskCnn,
    pub mean: MeanImage,
}

/// Write the checkpoint and return its content hash (hex).
pub fn save_checkpoint(bundle: &BackboneBundle, path: &Path) -> Result<String, BackboneError> {
    let payload = encode(bundle);
    let hash = Sha256::digest(&payload);
    let mut out = payload;
    out.extend_from_slice(&hash);
    fs::write(path, out)
        .map_err(|source| BackboneError::Io { path: path.display().to_string(), source })?;
    Ok(hex(&hash))
}

/// Hash a bundle without writing it.
pub fn checkpoint_hash(bundle: &BackboneBundle) -> String {
    hex(&Sha256::digest(encode(bundle)))
}

/// Read a checkpoint, verifying version and content hash; returns the bundle
/// and its hash (hex).
pub fn load_checkpoint(path: &Path) -> Result<(BackboneBundle, String), BackboneError> {
    let display = path.display().to_string();
    let bytes = fs::read(path)
        .map_err(|source| BackboneError::Io { path: display.clone(), source })?;
    let fail = |msg: &str| BackboneError::Checkpoint { path: display.clone(), msg: msg.into() };
    if bytes.len() < 32 + 12 {
        return Err(fail("file too short"));
    }
    let (payload, stored_hash) = bytes.split_at(bytes.len() - 32);
    let hash = Sha256::digest(payload);
    if hash.as_slice() != stored_hash {
        return Err(fail("content hash mismatch (corrupted checkpoint)"));
    }
    let mut cursor = Cursor { bytes: payload, pos: 0, path: &display };
    let magic = cursor.take(4)?;
    if magic != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let input_size = cursor.u32()? as usize;
    let mean = match cursor.u8()? {
        0 => {
            let mut m = [0f32; 3];
            for v in &mut m {
                *v = cursor.f32()?;
            }
            MeanImage::PerChannel(m)
        }
        1 => {
            let side = cursor.u32()? as usize;
            let len = cursor.u64()? as usize;
            if len != side * side * 3 {
                return Err(fail("mean raster length mismatch"));
            }
            let mut pixels = Vec::with_capacity(len);
            for _ in 0..len {
                pixels.push(cursor.f32()?);
            }
            MeanImage::Full(
                RasterImage::new(side, side, pixels).map_err(|e| fail(&e.to_string()))?,
            )
        }
        other => return Err(fail(&format!("unknown mean kind {other}"))),
    };

    let mut net = DeskCnn::zeros(input_size)
        .map_err(|_| fail(&format!("invalid input size {input_size}")))?;
    for group in net.param_groups_mut() {
        let len = cursor.u64()? as usize;
        if len != group.len() {
            return Err(BackboneError::Checkpoint {
                path: display.clone(),
                msg: format!("parameter tensor length {len}, expected {}", group.len()),
            });
        }
        for p in group.iter_mut() {
            *p = cursor.f32()?;
        }
    }
    if cursor.pos != payload.len() {
        return Err(fail("trailing bytes"));
    }
    Ok((BackboneBundle { net, mean }, hex(&hash)))
}

fn encode(bundle: &BackboneBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.net.input_size() as u32).to_le_bytes());
    match &bundle.mean {
        MeanImage::PerChannel(m) => {
            out.push(0);
            for v in m {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        MeanImage::Full(raster) => {
            out.push(1);
            out.extend_from_slice(&(raster.width() as u32).to_le_bytes());
            out.extend_from_slice(&(raster.pixels().len() as u64).to_le_bytes());
            for v in raster.pixels() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for group in bundle.net.param_groups() {
        out.extend_from_slice(&(group.len() as u64).to_le_bytes());
        for p in group {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BackboneError> {
        if self.pos + n > self.bytes.len() {
            return Err(BackboneError::Checkpoint {
                path: self.path.to_string(),
                msg: "unexpected end of file".into(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, BackboneError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, BackboneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BackboneError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, BackboneError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.biqn");
        let bundle = BackboneBundle {
            net: DeskCnn::new(32, 44).unwrap(),
            mean: MeanImage::PerChannel([120.5, 119.25, 101.0]),
        };
        let hash = save_checkpoint(&bundle, &path).unwrap();
        let (loaded, loaded_hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, loaded_hash);
        assert_eq!(hash, checkpoint_hash(&bundle));
        assert_eq!(loaded, bundle);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.biqn");
        let bundle = BackboneBundle {
            net: DeskCnn::new(32, 44).unwrap(),
            mean: MeanImage::PerChannel([0.0; 3]),
        };
        save_checkpoint(&bundle, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(BackboneError::Checkpoint { .. })));
    }

    #[test]
    fn hash_tracks_parameter_changes() {
        let mut bundle = BackboneBundle {
            net: DeskCnn::new(32, 1).unwrap(),
            mean: MeanImage::PerChannel([0.0; 3]),
        };
        let h1 = checkpoint_hash(&bundle);
        bundle.net.reinit_head(0.05, 2);
        let h2 = checkpoint_hash(&bundle);
        assert_ne!(h1, h2);
    }
}
