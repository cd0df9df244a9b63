//! Binary PPM (P6) images and PGM (P5) masks.

use std::fs;
use std::path::Path;

use super::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comment lines
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
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, format!("expected header field {}", i + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::format(start as u64, format!("header value {text} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "expected one whitespace byte after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(2, format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        payload: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.payload;
    if have < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    Ok(&bytes[h.payload..h.payload + need])
}

/// `3×H×W` tensor with values in `[0, 1]` to P6 bytes.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("PPM needs a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6 {w} {h} 255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P6")?;
    let px = payload(bytes, &h, 3)?;
    let plane = h.width * h.height;
    let scale = 1.0 / h.maxval as f32;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, &b) in px.iter().enumerate() {
        if b as usize > h.maxval {
            return Err(Error::format((h.payload + i) as u64, format!("sample {b} exceeds maxval")));
        }
        data[(i % 3) * plane + i / 3] = f32::from(b) * scale;
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let side = mask.side();
    let mut out = format!("P5 {side} {side} 255\n").into_bytes();
    out.extend_from_slice(mask.ids());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes, b"P5")?;
    if h.width != h.height {
        return Err(Error::format(2, format!("mask must be square, got {}×{}", h.width, h.height)));
    }
    let px = payload(bytes, &h, 1)?;
    Mask::new(h.width, px.to_vec())
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_pgm(mask))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_pgm(&fs::read(path)?)
}
