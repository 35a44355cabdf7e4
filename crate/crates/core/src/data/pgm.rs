//! Binary PGM ("P5") ingestion for grayscale corpora.

use super::{Dataset, SampleShape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Reads a binary PGM with maxval <= 255 into a `[1, h, w]` tensor scaled
/// to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let perr = |offset: u64, msg: String| Error::Parse {
        path: path.display().to_string(),
        offset,
        msg,
    };
    let mut pos = 0usize;

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(perr(0, "expected magic \"P5\"".into()));
    }
    pos += 2;

    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        // skip whitespace and '#' comment lines
        while pos < bytes.len() && (bytes[pos] as char).is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && (bytes[pos] as char).is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(perr(pos as u64, "expected integer header field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        fields.push(
            text.parse::<usize>()
                .map_err(|_| perr(start as u64, format!("bad integer {text:?}")))?,
        );
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 {
        return Err(perr(2, "zero image dimension".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(perr(2, format!("maxval {maxval} out of supported range 1..=255")));
    }
    if pos >= bytes.len() || !(bytes[pos] as char).is_ascii_whitespace() {
        return Err(perr(pos as u64, "expected single whitespace before pixel data".into()));
    }
    pos += 1;

    let need = w * h;
    if bytes.len() - pos < need {
        return Err(perr(
            pos as u64,
            format!("truncated pixel data: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    if bytes.len() - pos > need {
        return Err(perr((pos + need) as u64, "trailing bytes after pixel data".into()));
    }
    let data: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Writes a `[1, h, w]` tensor with values in `[0, 1]` as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Dimension(format!(
            "write_pgm: expected [1,h,w], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a `class_*/img_*.pgm`-style directory tree. Class directories are
/// sorted lexicographically and become labels 0..K-1; files within a class
/// are sorted by path, so the sample order is independent of filesystem
/// enumeration order.
pub fn load_pgm_dir(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<SampleShape> = None;
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        files.sort();
        for file in files {
            let img = read_pgm(&file)?;
            let s = SampleShape::Image(1, img.shape()[1], img.shape()[2]);
            match shape {
                None => shape = Some(s),
                Some(existing) if existing != s => {
                    return Err(Error::Dataset(format!(
                        "inconsistent image dimensions at {}",
                        file.display()
                    )))
                }
                _ => {}
            }
            samples.push(img);
            labels.push(class);
        }
    }
    let shape = shape.ok_or_else(|| Error::Dataset("no .pgm files found".into()))?;
    Dataset::new(
        root.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("pgm-corpus"),
        shape,
        samples,
        Some(labels),
    )
}
