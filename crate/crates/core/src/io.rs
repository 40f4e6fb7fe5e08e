//! On-disk formats.
//!
//! Tensor and mask files share one header: an 8-byte magic, a version byte,
//! a rank byte and one little-endian `u64` length per axis. Tensors follow
//! with row-major little-endian `f32`; masks follow with rows of the last
//! axis bit-packed least-significant bit first, each row padded to a byte.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{CarveError, Result};
use crate::mask::BlockMask;
use crate::partition::BlockMatrix;
use crate::sfc::Permutation;

pub const TENSOR_MAGIC: &[u8; 8] = b"TCRVTNSR";
pub const MASK_MAGIC: &[u8; 8] = b"TCRVMASK";
pub const FORMAT_VERSION: u8 = 1;

fn header(magic: &[u8; 8], shape: &[usize]) -> Result<Vec<u8>> {
    let rank = u8::try_from(shape.len()).map_err(|_| CarveError::Size(format!("rank {} exceeds 255", shape.len())))?;
    let mut out = Vec::with_capacity(10 + 8 * shape.len());
    out.extend_from_slice(magic);
    out.push(FORMAT_VERSION);
    out.push(rank);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(out)
}

pub fn encode_tensor(x: ArrayViewD<'_, f32>) -> Result<Vec<u8>> {
    let mut out = header(TENSOR_MAGIC, x.shape())?;
    out.reserve(4 * x.len());
    // iter() walks in logical row-major order whatever the strides
    for v in x.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn row_bytes(cols: usize) -> usize {
    cols.div_ceil(8)
}

fn pack_rows(shape: &[usize], bits: &[bool]) -> Result<Vec<u8>> {
    let cols = *shape.last().unwrap_or(&1);
    let mut out = header(MASK_MAGIC, shape)?;
    if cols == 0 {
        return Ok(out);
    }
    for row in bits.chunks(cols) {
        let mut packed = vec![0u8; row_bytes(cols)];
        for (j, &b) in row.iter().enumerate() {
            if b {
                packed[j / 8] |= 1 << (j % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    Ok(out)
}

/// `(heads, rows, cols)` mask, one packed row per `(head, row)`.
pub fn encode_mask(mask: &BlockMask) -> Result<Vec<u8>> {
    let (h, r, c) = mask.shape();
    pack_rows(&[h, r, c], mask.bits())
}

/// Static masks are written as a single head.
pub fn encode_block_matrix(m: &BlockMatrix) -> Result<Vec<u8>> {
    let bits: Vec<bool> = (0..m.rows()).flat_map(|i| m.row(i).iter().copied()).collect();
    pack_rows(&[1, m.rows(), m.cols()], &bits)
}

/// Byte cursor that reports failures with the file name and offset.
struct Reader<'a> {
    file: &'a str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> CarveError {
        CarveError::Parse {
            file: self.file.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.buf.len() - self.pos;
        if n > avail {
            return Err(self.err(self.buf.len(), format!("truncated {what}: need {n} bytes, {avail} left")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<Vec<usize>> {
        if self.take(8, "magic")? != magic {
            return Err(self.err(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let version = self.take(1, "version")?[0];
        if version != FORMAT_VERSION {
            return Err(self.err(8, format!("unsupported version {version}")));
        }
        let rank = self.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for axis in 0..rank {
            let at = self.pos;
            let raw = u64::from_le_bytes(self.take(8, "axis length")?.try_into().unwrap());
            let d = usize::try_from(raw).map_err(|_| self.err(at, format!("axis {axis} length {raw} too large")))?;
            shape.push(d);
        }
        Ok(shape)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn element_count(r: &Reader<'_>, shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.err(10, format!("shape {shape:?} overflows")))
}

pub fn decode_tensor(bytes: &[u8], file: &str) -> Result<ArrayD<f32>> {
    let mut r = Reader { file, buf: bytes, pos: 0 };
    let shape = r.header(TENSOR_MAGIC)?;
    let n = element_count(&r, &shape)?;
    let nbytes = n
        .checked_mul(4)
        .ok_or_else(|| r.err(10, "payload size overflows"))?;
    let payload = r.take(nbytes, "tensor payload")?;
    r.finish()?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length checked against shape"))
}

/// Accepts rank 3 `(heads, rows, cols)` or rank 2 `(rows, cols)` as one head.
pub fn decode_mask(bytes: &[u8], file: &str) -> Result<BlockMask> {
    let mut r = Reader { file, buf: bytes, pos: 0 };
    let shape = r.header(MASK_MAGIC)?;
    let (h, rows, cols) = match shape[..] {
        [h, rows, cols] => (h, rows, cols),
        [rows, cols] => (1, rows, cols),
        _ => return Err(r.err(9, format!("mask rank {} is not 2 or 3", shape.len()))),
    };
    let n_rows = element_count(&r, &[h, rows])?;
    let per_row = row_bytes(cols);
    let payload = r.take(
        n_rows.checked_mul(per_row).ok_or_else(|| r.err(10, "payload size overflows"))?,
        "mask payload",
    )?;
    r.finish()?;
    let mut bits = Vec::with_capacity(n_rows * cols);
    if per_row > 0 {
        for row in payload.chunks(per_row) {
            bits.extend((0..cols).map(|j| row[j / 8] >> (j % 8) & 1 == 1));
        }
    }
    BlockMask::from_bits(h, rows, cols, bits)
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn save_tensor(path: impl AsRef<Path>, x: ArrayViewD<'_, f32>) -> Result<()> {
    fs::write(path, encode_tensor(x)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path)?, &display(path))
}

pub fn save_mask(path: impl AsRef<Path>, mask: &BlockMask) -> Result<()> {
    fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BlockMask> {
    let path = path.as_ref();
    decode_mask(&fs::read(path)?, &display(path))
}

/// One decimal index per line: line `i` holds the grid cell at curve position `i`.
pub fn format_index_list(perm: &Permutation) -> String {
    let mut s = String::with_capacity(perm.len() * 7);
    for &i in perm.forward() {
        s.push_str(&i.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_index_list(text: &str, file: &str) -> Result<Permutation> {
    let mut forward = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let v = trimmed.parse::<u32>().map_err(|e| CarveError::Parse {
                file: file.to_string(),
                offset: offset as u64,
                msg: format!("bad index '{trimmed}': {e}"),
            })?;
            forward.push(v);
        }
        offset += line.len();
    }
    Permutation::from_forward(forward)
}

/// Curve order as a rank-1 tensor of indices stored as `f32`; exact up to 2²⁴ cells.
pub fn permutation_tensor(perm: &Permutation) -> Result<ArrayD<f32>> {
    if perm.len() > 1 << 24 {
        return Err(CarveError::Size(format!("{} indices do not fit f32 exactly", perm.len())));
    }
    let data: Vec<f32> = perm.forward().iter().map(|&i| i as f32).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&[perm.len()]), data).expect("rank-1 shape"))
}
