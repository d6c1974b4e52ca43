//! On-disk video layout: `frame_%05d.ppm` (P6), `mask_%05d.pgm` (P5, pixel
//! value = class id) and `events.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use super::mask::Mask;
use super::scene::{FrameEvents, VideoSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.ppm"))
}

pub fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("mask_{t:05}.pgm"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `[3, H, W]` values in `[0, 1]` as 8-bit P6.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = img.dims3("ppm")?;
    if c != 3 {
        return Err(Error::shape("ppm", format!("expected 3 channels, got {c}")));
    }
    let n = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * n);
    let d = img.data();
    for i in 0..n {
        for ch in 0..3 {
            bytes.push((d[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_file(path, &bytes)
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend_from_slice(mask.labels());
    write_file(path, &bytes)
}

/// Parses a binary netpbm header and returns `(width, height, payload)`.
fn parse_netpbm<'a>(path: &Path, bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(Error::format(path, format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text.parse().map_err(|_| Error::format(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed header"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval} is not supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "empty image"));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_file(path)?;
    let (w, h, payload) = parse_netpbm(path, &bytes, b"P6")?;
    let n = w * h;
    if payload.len() != 3 * n {
        return Err(Error::format(path, format!("expected {} pixel bytes, found {}", 3 * n, payload.len())));
    }
    let mut data = vec![0f32; 3 * n];
    for i in 0..n {
        for ch in 0..3 {
            data[ch * n + i] = payload[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = read_file(path)?;
    let (w, h, payload) = parse_netpbm(path, &bytes, b"P5")?;
    if payload.len() != w * h {
        return Err(Error::format(path, format!("expected {} pixel bytes, found {}", w * h, payload.len())));
    }
    Mask::new(h, w, payload.to_vec())
}

fn flag(b: bool) -> u8 {
    b as u8
}

pub fn write_events(path: &Path, events: &[FrameEvents]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let io = |e: csv::Error| Error::format(path, e.to_string());
    wtr.write_record(["frame", "blur", "occlusion", "brightness"]).map_err(io)?;
    for (t, e) in events.iter().enumerate() {
        wtr.serialize((t, flag(e.blur), flag(e.occlusion), flag(e.brightness))).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<FrameEvents>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<(usize, u8, u8, u8)>().enumerate() {
        let (t, b, o, l) = row.map_err(|e| Error::format(path, e.to_string()))?;
        if t != i {
            return Err(Error::format(path, format!("row {i} has frame {t}")));
        }
        out.push(FrameEvents { blur: b != 0, occlusion: o != 0, brightness: l != 0 });
    }
    Ok(out)
}

pub fn write_video_dir(sample: &VideoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, (frame, mask)) in sample.frames.iter().zip(&sample.masks).enumerate() {
        write_ppm(&frame_path(dir, t), frame)?;
        write_pgm(&mask_path(dir, t), mask)?;
    }
    write_events(&dir.join("events.csv"), &sample.events)
}

/// Loads a video directory; `events.csv` fixes the length.
pub fn load_video_dir(dir: &Path, classes: usize) -> Result<VideoSample> {
    let events = read_events(&dir.join("events.csv"))?;
    let mut sample = VideoSample { frames: Vec::new(), masks: Vec::new(), events };
    for t in 0..sample.events.len() {
        let fp = frame_path(dir, t);
        let mp = mask_path(dir, t);
        let frame = read_ppm(&fp)?;
        let mask = read_pgm(&mp)?;
        if (mask.height(), mask.width()) != (frame.shape()[1], frame.shape()[2]) {
            return Err(Error::format(&mp, "mask size differs from its frame"));
        }
        if let Err(Error::Contract(msg)) = mask.check_classes(classes) {
            return Err(Error::format(&mp, msg));
        }
        sample.frames.push(frame);
        sample.masks.push(mask);
    }
    Ok(sample)
}

/// Frame files of a stream directory in index order. Indices must run
/// 0, 1, 2, … without gaps or duplicates.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(idx) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".ppm")) {
            let t: usize = idx.parse().map_err(|_| Error::format(entry.path(), "unparsable frame index"))?;
            found.push((t, entry.path()));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::format(dir, "no frame_*.ppm files"));
    }
    for (i, (t, p)) in found.iter().enumerate() {
        if *t != i {
            return Err(Error::format(p, format!("frame index {t} where {i} was expected")));
        }
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Sorted `video_*` subdirectories of a dataset root.
pub fn list_videos(root: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_name().to_string_lossy().starts_with("video_") && entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path, classes: usize) -> Result<Vec<VideoSample>> {
    list_videos(root)?.iter().map(|d| load_video_dir(d, classes)).collect()
}

pub fn video_dir_name(index: usize) -> String {
    format!("video_{index:03}")
}
