//! Tensor file format and label CSV.
//!
//! Layout: magic `SCTD`, u32 LE ndim, ndim u32 LE dims, then row-major
//! f64 LE values. Total size is exactly `8 + 4*ndim + 8*numel` bytes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SCTD";

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset: u64 = 0;
    let parse_err = |offset: u64, msg: &str| Error::Parse {
        path: path.display().to_string(),
        offset,
        msg: msg.to_string(),
    };

    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, path)?;
    if &magic != MAGIC {
        return Err(parse_err(0, "bad magic, expected \"SCTD\""));
    }

    let mut buf4 = [0u8; 4];
    read_exact_at(&mut r, &mut buf4, &mut offset, path)?;
    let ndim = u32::from_le_bytes(buf4) as usize;
    if ndim == 0 {
        return Err(parse_err(4, "zero-dimensional tensors are not allowed"));
    }
    if ndim > 8 {
        return Err(parse_err(4, "implausible ndim (> 8)"));
    }

    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = offset;
        read_exact_at(&mut r, &mut buf4, &mut offset, path)?;
        let d = u32::from_le_bytes(buf4) as usize;
        if d == 0 {
            return Err(parse_err(at, "zero-length dimension"));
        }
        shape.push(d);
    }

    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf8 = [0u8; 8];
    for _ in 0..numel {
        read_exact_at(&mut r, &mut buf8, &mut offset, path)?;
        data.push(f64::from_le_bytes(buf8));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(parse_err(offset, "trailing bytes after tensor payload"));
    }
    Tensor::new(shape, data)
}

fn read_exact_at(
    r: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    path: &Path,
) -> Result<()> {
    let at = *offset;
    r.read_exact(buf).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        offset: at,
        msg: format!("truncated: needed {} more bytes", buf.len()),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// CSV with header `sample_id,label`; rows in sample order.
pub fn save_labels_csv(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "sample_id,label")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        offset: 0,
        msg: "empty file".into(),
    })?;
    if header.trim() != "sample_id,label" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("expected header \"sample_id,label\", got {header:?}"),
        });
    }
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                offset: 0,
                msg: format!("bad row at line {}", lineno + 2),
            })
        };
        rows.push((parse(parts.next())?, parse(parts.next())?));
    }
    rows.sort_by_key(|&(id, _)| id);
    for (expect, &(id, _)) in rows.iter().enumerate() {
        if id != expect {
            return Err(Error::Parse {
                path: path.display().to_string(),
                offset: 0,
                msg: format!("sample ids are not dense: missing {expect}"),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, l)| l).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sctd");
        let mut rng = crate::rng::rng_for(3, "io", 0, 0);
        let t = Tensor::randn(vec![3, 4, 5], 1.0, &mut rng);
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn file_size_is_exactly_header_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sctd");
        let t = Tensor::zeros(vec![3, 4, 5]);
        save_tensor(&path, &t).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 8 + 4 * 3 + 8 * 60);
    }

    #[test]
    fn rejects_empty_shape_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.sctd");
        std::fs::write(&path, [b'S', b'C', b'T', b'D', 0, 0, 0, 0]).unwrap();
        match load_tensor(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }

        let path2 = dir.path().join("magic.sctd");
        std::fs::write(&path2, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_tensor(&path2), Err(Error::Parse { .. })));
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.sctd");
        let t = Tensor::zeros(vec![4]);
        save_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_tensor(&path) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert_eq!(offset, 8 + 4 + 3 * 8);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        save_labels_csv(&path, &[0, 0, 1, 2]).unwrap();
        assert_eq!(load_labels_csv(&path).unwrap(), vec![0, 0, 1, 2]);
    }
}
