//! Named-tensor checkpoint container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "DRSACNTC"
//! version u32      1
//! count   u64
//! entry   { name_len u32, name utf-8, rows u64, cols u64, payload f64-le[rows*cols] }
//! ```
//!
//! Payloads are raw f64 bits, so save/load round-trips are lossless.

use super::tape::Tensor;
use super::NnError;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DRSACNTC";
const VERSION: u32 = 1;

pub fn save_named_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), NnError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| NnError::Io(format!("creating {}: {e}", path.display())))?;
    file.write_all(&buf)
        .map_err(|e| NnError::Io(format!("writing {}: {e}", path.display())))
}

pub fn load_named_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| NnError::Io(format!("opening {}: {e}", path.display())))?
        .read_to_end(&mut bytes)
        .map_err(|e| NnError::Io(format!("reading {}: {e}", path.display())))?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *cursor + n > bytes.len() {
            return Err(NnError::Format("unexpected end of checkpoint".into()));
        }
        let out = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(out)
    };
    if take(&mut cursor, 8)? != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| NnError::Format("tensor name is not utf-8".into()))?;
        let rows = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| NnError::Format("tensor shape overflow".into()))?;
        let payload = take(&mut cursor, n * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor { rows, cols, data }));
    }
    if cursor != bytes.len() {
        return Err(NnError::Format("trailing bytes in checkpoint".into()));
    }
    Ok(out)
}
