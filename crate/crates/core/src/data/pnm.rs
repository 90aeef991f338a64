use std::path::{Path, PathBuf};

use super::{Domain, RoadScene};
use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// `P6` bytes of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [3, h, w] => (3, h, w),
        ref s => return Err(Error::Format(format!("ppm needs a [3, H, W] image, got {s:?}"))),
    };
    let mut out = header("P6", w, h);
    let data = image.data();
    out.reserve(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            out.push(quantize(data[ch * h * w + i]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(mask: &SegMask) -> Result<Vec<u8>> {
    let mut out = header("P5", mask.width, mask.height);
    for &v in &mask.labels {
        out.push(match v {
            0 => 0,
            1 => 255,
            other => return Err(Error::Format(format!("binary mask holds label {other}"))),
        });
    }
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    body: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => {
                    saw_space = true;
                    pos += 1;
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if !saw_space || start == pos {
            return Err(Error::Format("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed header number".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    Ok(Header { width, height, body: pos + 1 })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let body = &bytes[h.body..];
    match body.len().cmp(&need) {
        std::cmp::Ordering::Less => Err(Error::Format(format!(
            "truncated payload: {} of {need} bytes",
            body.len()
        ))),
        std::cmp::Ordering::Greater => Err(Error::Format(format!(
            "{} trailing bytes after payload",
            body.len() - need
        ))),
        std::cmp::Ordering::Equal => Ok(body),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P6")?;
    let body = payload(bytes, &h, 3)?;
    let n = h.width * h.height;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = body[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h.height, h.width], data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<SegMask> {
    let h = parse_header(bytes, b"P5")?;
    let body = payload(bytes, &h, 1)?;
    let labels = body
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            _ => Err(Error::Format("mask values must be 0 or 255".into())),
        })
        .collect::<Result<Vec<u32>>>()?;
    SegMask::new(h.width, h.height, labels)
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    with_path(path, decode_ppm(&read(path)?))
}

pub fn read_pgm(path: &Path) -> Result<SegMask> {
    with_path(path, decode_pgm(&read(path)?))
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write(path, &encode_ppm(image)?)
}

pub fn write_pgm(path: &Path, mask: &SegMask) -> Result<()> {
    write(path, &encode_pgm(mask)?)
}

/// Writes `<stem>.ppm` and `<stem>_mask.pgm` into `dir`.
pub fn save_scene(dir: &Path, stem: &str, scene: &RoadScene) -> Result<(PathBuf, PathBuf)> {
    let image = dir.join(format!("{stem}.ppm"));
    let mask = dir.join(format!("{stem}_mask.pgm"));
    write_ppm(&image, &scene.image)?;
    write_pgm(&mask, &scene.mask)?;
    Ok((image, mask))
}

pub fn load_scene(image: &Path, mask: &Path, domain: Domain, seed: u64) -> Result<RoadScene> {
    let img = read_ppm(image)?;
    let m = read_pgm(mask)?;
    if img.shape()[1..] != [m.height, m.width] {
        return Err(Error::Format(format!(
            "{} and {} have different dimensions",
            image.display(),
            mask.display()
        )));
    }
    Ok(RoadScene { image: img, mask: m, domain, seed, roads: Vec::new() })
}
