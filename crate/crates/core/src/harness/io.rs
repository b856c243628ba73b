//! File formats: binary PPM/PGM images and the FST1 tensor container.
//!
//! FST1 layout, all little-endian:
//!
//! ```text
//! b"FST1" | version: u8 = 1 | ndim: u32 | extents: ndim × u32 | payload: f32 × product(extents)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FST_MAGIC: &[u8; 4] = b"FST1";
const FST_VERSION: u8 = 1;

pub fn encode_fst(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(FST_MAGIC);
    out.push(FST_VERSION);
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            offset,
            msg: "unexpected end of file".into(),
        })
}

pub fn decode_fst(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != FST_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "missing FST1 magic".into(),
        });
    }
    match bytes.get(4) {
        Some(&FST_VERSION) => {}
        Some(v) => {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {v}"),
            })
        }
        None => {
            return Err(Error::Format {
                offset: 4,
                msg: "missing version byte".into(),
            })
        }
    }
    let ndim = read_u32(bytes, 5)? as usize;
    if ndim == 0 {
        return Err(Error::Format {
            offset: 5,
            msg: "tensor must have at least one dimension".into(),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut offset = 9;
    for _ in 0..ndim {
        let d = read_u32(bytes, offset)? as usize;
        if d == 0 {
            return Err(Error::Format {
                offset,
                msg: "zero extent".into(),
            });
        }
        dims.push(d);
        offset += 4;
    }
    let n: usize = dims.iter().product();
    let payload = &bytes[offset..];
    if payload.len() != 4 * n {
        return Err(Error::Format {
            offset,
            msg: format!("payload has {} bytes, expected {}", payload.len(), 4 * n),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn write_fst(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_fst(t))?;
    Ok(())
}

pub fn read_fst(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_fst(&fs::read(path)?)
}

/// `[0, 1]` float to byte: clamp, scale by 255, round half away from zero.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (3 channels) or PGM (1 channel) with maxval 255.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.chw()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape(format!("PPM export needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_byte(img.at3(ch, y, x)));
            }
        }
    }
    Ok(out)
}

/// Reads the next whitespace-separated header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<(String, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => {
                return Err(Error::Format {
                    offset: *pos,
                    msg: "truncated header".into(),
                })
            }
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() {
            break;
        }
        *pos += 1;
    }
    Ok((String::from_utf8_lossy(&bytes[start..*pos]).into_owned(), start))
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<(usize, usize)> {
    let (tok, at) = header_token(bytes, pos)?;
    let n = tok.parse().map_err(|_| Error::Format {
        offset: at,
        msg: format!("expected a number, found '{tok}'"),
    })?;
    Ok((n, at))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let (magic, _) = header_token(bytes, &mut pos)?;
    let c = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported magic '{magic}'"),
            })
        }
    };
    let (w, _) = header_number(bytes, &mut pos)?;
    let (h, _) = header_number(bytes, &mut pos)?;
    let (maxval, maxval_at) = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: maxval_at,
            msg: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    if w == 0 || h == 0 {
        return Err(Error::Format {
            offset: maxval_at,
            msg: "zero image extent".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != c * h * w {
        return Err(Error::Format {
            offset: pos,
            msg: format!("raster has {} bytes, expected {}", raster.len(), c * h * w),
        });
    }
    let mut img = Tensor::zeros(&[c, h, w]);
    let data = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = raster[(y * w + x) * c + ch] as f64 / 255.0;
            }
        }
    }
    Ok(img)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}
