//! Binary NetPBM: 16-bit P5 for thermal planes, 8-bit P6 for optical.

use std::fs;
use std::path::Path;

use super::{ImagePlane, ImageRGB};
use crate::error::{Error, Result};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    payload_offset: usize,
}

fn parse_err(what: &str, offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        what: what.to_string(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn parse_header(bytes: &[u8], what: &str) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(parse_err(what, 0, "missing NetPBM magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(parse_err(what, pos, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| parse_err(what, start, format!("number {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(what, pos, "expected single whitespace before raster")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(parse_err(what, pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(what, pos, format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header {
        magic,
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        payload_offset: pos,
    })
}

fn read_samples(bytes: &[u8], hdr: &Header, count: usize, what: &str) -> Result<Vec<f64>> {
    let wide = hdr.maxval > 255;
    let bps = if wide { 2 } else { 1 };
    let needed = count * bps;
    let payload = &bytes[hdr.payload_offset..];
    if payload.len() < needed {
        return Err(parse_err(
            what,
            bytes.len(),
            format!(
                "truncated raster: need {needed} bytes after offset {}, have {}",
                hdr.payload_offset,
                payload.len()
            ),
        ));
    }
    let max = hdr.maxval as f64;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let raw = if wide {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as u32
        } else {
            payload[i] as u32
        };
        if raw > hdr.maxval {
            return Err(parse_err(
                what,
                hdr.payload_offset + i * bps,
                format!("sample {raw} exceeds maxval {}", hdr.maxval),
            ));
        }
        out.push(raw as f64 / max);
    }
    Ok(out)
}

/// Decode a P5 image (any maxval) into a [0, 1] plane.
pub fn decode_pgm16(bytes: &[u8]) -> Result<ImagePlane> {
    let hdr = parse_header(bytes, "PGM")?;
    if &hdr.magic != b"P5" {
        return Err(Error::FormatMismatch {
            expected: "P5 (grayscale)".into(),
            found: String::from_utf8_lossy(&hdr.magic).into_owned(),
        });
    }
    let data = read_samples(bytes, &hdr, hdr.width * hdr.height, "PGM")?;
    ImagePlane::new(hdr.height, hdr.width, data)
}

/// Decode a P6 image (any maxval) into a [0, 1] RGB image.
pub fn decode_ppm8(bytes: &[u8]) -> Result<ImageRGB> {
    let hdr = parse_header(bytes, "PPM")?;
    if &hdr.magic != b"P6" {
        return Err(Error::FormatMismatch {
            expected: "P6 (RGB)".into(),
            found: String::from_utf8_lossy(&hdr.magic).into_owned(),
        });
    }
    let data = read_samples(bytes, &hdr, hdr.width * hdr.height * 3, "PPM")?;
    ImageRGB::new(hdr.height, hdr.width, data)
}

fn quantize(v: f64, max: f64) -> u32 {
    (v.clamp(0.0, 1.0) * max).round() as u32
}

/// 16-bit big-endian P5, maxval 65535.
pub fn encode_pgm16(img: &ImagePlane) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 2);
    for &v in &img.data {
        out.extend_from_slice(&(quantize(v, 65535.0) as u16).to_be_bytes());
    }
    out
}

/// 8-bit P6, maxval 255.
pub fn encode_ppm8(img: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v, 255.0) as u8));
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm16(path: impl AsRef<Path>) -> Result<ImagePlane> {
    decode_pgm16(&read_file(path.as_ref())?)
}

pub fn read_ppm8(path: impl AsRef<Path>) -> Result<ImageRGB> {
    decode_ppm8(&read_file(path.as_ref())?)
}

pub fn write_pgm16(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm16(img))
}

pub fn write_ppm8(path: impl AsRef<Path>, img: &ImageRGB) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm8(img))
}
