//! The `TNSR v1` container: an ASCII header line `TNSR 1 <rank> <d1> ... <dk>\n`
//! followed by little-endian `f64` values in row-major order.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "TNSR";
const VERSION: &str = "1";

pub fn write_tnsr_to<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let mut header = format!("{MAGIC} {VERSION} {}", t.rank());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tnsr_from<R: BufRead>(mut r: R) -> Result<Tensor> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("TNSR header is not newline-terminated".into()));
    }
    let header = std::str::from_utf8(&line[..line.len() - 1])
        .map_err(|_| Error::Format("TNSR header is not ASCII".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(Error::Format("missing TNSR magic".into()));
    }
    if fields.next() != Some(VERSION) {
        return Err(Error::Format("unsupported TNSR version".into()));
    }
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed TNSR header {header:?}")))
    };
    let rank = parse(fields.next())?;
    let shape = (0..rank)
        .map(|_| parse(fields.next()))
        .collect::<Result<Vec<_>>>()?;
    if fields.next().is_some() {
        return Err(Error::Format(format!("trailing fields in TNSR header {header:?}")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("TNSR shape overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != numel * 8 {
        return Err(Error::Format(format!(
            "TNSR payload has {} bytes, header declares {}",
            bytes.len(),
            numel * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tnsr(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_tnsr_to(&mut buf, t)?;
    fs::write(path, buf).map_err(|e| Error::file(path, e))
}

pub fn read_tnsr(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    read_tnsr_from(&bytes[..])
}
