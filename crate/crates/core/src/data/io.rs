use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Image, SequenceDataset};
use crate::error::{Error, Result};
use crate::geom::Rect;

pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Decode a binary PPM with maxval 255. `path` is only used in errors.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let mut line = 1;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            if bytes[pos] == b'\n' {
                line += 1;
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, line, "truncated PPM header"));
        }
        fields.push((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), line));
    }
    if fields[0].0 != "P6" {
        return Err(parse_err(path, fields[0].1, format!("bad magic `{}`, expected P6", fields[0].0)));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .0
            .parse::<usize>()
            .map_err(|_| parse_err(path, fields[i].1, format!("bad header number `{}`", fields[i].0)))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(parse_err(path, fields[3].1, format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(parse_err(path, fields[1].1, "zero image dimension"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(path, fields[3].1, "missing whitespace after maxval"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() - pos != need {
        return Err(parse_err(
            path,
            fields[3].1,
            format!("payload has {} bytes, expected {need}", bytes.len() - pos),
        ));
    }
    Image::new(w, h, bytes[pos..].to_vec())
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn format_boxes(boxes: &[Rect]) -> String {
    boxes
        .iter()
        .map(|b| format!("{},{},{},{}\n", b.x.round() as i64, b.y.round() as i64, b.w.round() as i64, b.h.round() as i64))
        .collect()
}

/// Parse `x,y,w,h` integer lines.
pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<Rect>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let parts: Vec<&str> = l.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(parse_err(path, i + 1, format!("expected 4 fields x,y,w,h, got {}", parts.len())));
        }
        let mut v = [0.0; 4];
        for (k, p) in parts.iter().enumerate() {
            v[k] = p
                .parse::<i64>()
                .map_err(|_| parse_err(path, i + 1, format!("`{p}` is not an integer")))? as f64;
        }
        out.push(Rect::new(v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

pub fn write_sequence(ds: &SequenceDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in ds.frames.iter().enumerate() {
        write_ppm(f, &dir.join(frame_file_name(i)))?;
    }
    let gt = dir.join(GROUNDTRUTH_FILE);
    let mut file = fs::File::create(&gt).map_err(|e| Error::io(&gt, e))?;
    file.write_all(format_boxes(&ds.boxes).as_bytes())
        .map_err(|e| Error::io(&gt, e))
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".ppm"))
        })
        .collect();
    v.sort();
    Ok(v)
}

pub fn read_sequence(dir: &Path) -> Result<SequenceDataset> {
    let gt = dir.join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt).map_err(|e| Error::io(&gt, e))?;
    let boxes = parse_boxes(&text, &gt)?;
    let paths = frame_paths(dir)?;
    if paths.len() != boxes.len() {
        return Err(parse_err(
            &gt,
            boxes.len().min(paths.len()) + 1,
            format!("{} boxes for {} frames", boxes.len(), paths.len()),
        ));
    }
    let frames = paths.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sequence")
        .to_string();
    Ok(SequenceDataset { name, frames, boxes })
}

/// A single sequence directory, or a directory of sequence directories
/// read in name order.
pub fn read_collection(dir: &Path) -> Result<Vec<SequenceDataset>> {
    if dir.join(GROUNDTRUTH_FILE).exists() {
        return Ok(vec![read_sequence(dir)?]);
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH_FILE).exists())
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(Error::Invalid(format!("no sequences found under {}", dir.display())));
    }
    subs.iter().map(|p| read_sequence(p)).collect()
}
