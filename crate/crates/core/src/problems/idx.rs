//! IDX (MNIST-style) image files: big-endian magic 0x00000803, three u32
//! dimensions (count, rows, cols), then unsigned byte pixels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

const MAGIC: u32 = 0x0000_0803;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Parse { offset: bytes.len(), msg: "truncated IDX header".into() })
}

/// Images in file order with pixels scaled to [0, 1].
pub fn parse_idx(bytes: &[u8]) -> Result<Vec<Mat>> {
    let magic = be_u32(bytes, 0)?;
    if magic != MAGIC {
        return Err(Error::Parse { offset: 0, msg: format!("bad IDX magic {magic:#010x}") });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let px = rows * cols;
    let need = 16 + count * px;
    if bytes.len() < need {
        let complete = (bytes.len() - 16) / px.max(1);
        return Err(Error::Parse {
            offset: 16 + complete * px,
            msg: format!("truncated IDX payload: header announces {count} images, {complete} complete"),
        });
    }
    Ok((0..count)
        .map(|i| {
            let start = 16 + i * px;
            Mat {
                rows,
                cols,
                data: bytes[start..start + px].iter().map(|&b| b as f64 / 255.0).collect(),
            }
        })
        .collect())
}

pub fn load_idx(path: &Path) -> Result<Vec<Mat>> {
    parse_idx(&std::fs::read(path)?)
}

/// Encodes byte images as IDX; used for fixtures.
pub fn write_idx(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}
