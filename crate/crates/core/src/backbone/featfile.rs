//! Binary feature-file container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "BIQF"
//! version u32      currently 1
//! dim     u32      descriptor length D
//! count   u64      number of records
//! tag_len u16 + tag bytes (source tag, UTF-8)
//! records: id_len u16, id bytes, crop_index u32, D x f32
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BackboneError, FeatureVector};

const MAGIC: &[u8; 4] = b"BIQF";
const VERSION: u32 = 1;

pub struct FeatureRecord {
    pub id: String,
    pub crop_index: u32,
    pub vector: FeatureVector,
}

pub fn write_feature_file(
    path: &Path,
    dim: usize,
    source_tag: &str,
    records: &[FeatureRecord],
) -> Result<(), BackboneError> {
    let display = path.display().to_string();
    let io_err = |source| BackboneError::Io { path: display.clone(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<(), BackboneError> {
        w.write_all(bytes).map_err(|source| BackboneError::Io { path: display.clone(), source })
    };
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(dim as u32).to_le_bytes())?;
    write(&(records.len() as u64).to_le_bytes())?;
    write(&(source_tag.len() as u16).to_le_bytes())?;
    write(source_tag.as_bytes())?;
    for rec in records {
        if rec.vector.len() != dim {
            return Err(BackboneError::DimensionMismatch {
                id: rec.id.clone(),
                crop: rec.crop_index,
                expected: dim,
                got: rec.vector.len(),
            });
        }
        write(&(rec.id.len() as u16).to_le_bytes())?;
        write(rec.id.as_bytes())?;
        write(&rec.crop_index.to_le_bytes())?;
        for v in rec.vector.as_slice() {
            write(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_feature_file(
    path: &Path,
) -> Result<(usize, String, Vec<FeatureRecord>), BackboneError> {
    let display = path.display().to_string();
    let file = fs::File::open(path)
        .map_err(|source| BackboneError::Io { path: display.clone(), source })?;
    let mut r = BufReader::new(file);
    let fail = |msg: &str| BackboneError::FeatureFile { path: display.clone(), msg: msg.into() };

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &display)?;
    if &magic != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = read_u32(&mut r, &display)?;
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let dim = read_u32(&mut r, &display)? as usize;
    let count = read_u64(&mut r, &display)?;
    let tag_len = read_u16(&mut r, &display)? as usize;
    let mut tag_bytes = vec![0u8; tag_len];
    read_exact(&mut r, &mut tag_bytes, &display)?;
    let tag = String::from_utf8(tag_bytes).map_err(|_| fail("source tag is not UTF-8"))?;

    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let id_len = read_u16(&mut r, &display)? as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact(&mut r, &mut id_bytes, &display)?;
        let id = String::from_utf8(id_bytes).map_err(|_| fail("record id is not UTF-8"))?;
        let crop_index = read_u32(&mut r, &display)?;
        let mut values = vec![0f32; dim];
        let mut buf = [0u8; 4];
        for v in &mut values {
            read_exact(&mut r, &mut buf, &display)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push(FeatureRecord { id, crop_index, vector: FeatureVector(values) });
    }
    Ok((dim, tag, records))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &str) -> Result<(), BackboneError> {
    r.read_exact(buf).map_err(|_| BackboneError::FeatureFile {
        path: path.to_string(),
        msg: "unexpected end of file".into(),
    })
}

fn read_u16<R: Read>(r: &mut R, path: &str) -> Result<u16, BackboneError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf, path)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R, path: &str) -> Result<u32, BackboneError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, path: &str) -> Result<u64, BackboneError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(u64::from_le_bytes(buf))
}
