//! Image file formats.
//!
//! Linear RGB is read from binary PPM (P6, any maxval up to 65535, big-endian
//! 16-bit samples when maxval > 255) or 8/16-bit PNG; samples are divided by
//! the maximum code value. PPM output is always P6 with maxval 65535.
//! 8-bit PGM (P5) is used for masks and confidence maps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::color::{LinearImage, CHANNELS};
use crate::error::{Error, Result};

/// Raw integer RGB samples as stored in a file, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub maxval: u32,
    /// Row-major RGB samples.
    pub samples: Vec<u16>,
}

impl RawImage {
    pub fn to_linear(&self) -> Result<LinearImage> {
        let scale = 1.0 / self.maxval as f64;
        LinearImage::new(
            self.height,
            self.width,
            self.samples.iter().map(|&s| s as f64 * scale).collect(),
        )
    }
}

pub fn read_raw(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else {
        Err(Error::Format(format!(
            "{}: not a P6 PPM or PNG file",
            path.display()
        )))
    }
}

pub fn read_linear(path: &Path) -> Result<LinearImage> {
    read_raw(path)?.to_linear()
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("missing P6 magic".into()));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number()? as usize;
    let height = cur.number()? as usize;
    let maxval = cur.number()?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "bad PPM header {width}x{height} maxval {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = cur.pos + 1;
    let n = width * height * CHANNELS;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    let samples = if wide {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(RawImage {
        height,
        width,
        maxval,
        samples,
    })
}

fn decode_png(bytes: &[u8]) -> Result<RawImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let per_px = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Format(format!(
                "unsupported PNG color type {other:?}"
            )))
        }
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let maxval = if wide { 65535 } else { 255 };
    let bytes_per_sample = if wide { 2 } else { 1 };
    let mut samples = Vec::with_capacity(width * height * CHANNELS);
    for px in buf[..info.buffer_size()].chunks_exact(per_px * bytes_per_sample) {
        for ch in 0..CHANNELS {
            let s = if wide {
                u16::from_be_bytes([px[2 * ch], px[2 * ch + 1]])
            } else {
                px[ch] as u16
            };
            samples.push(s);
        }
    }
    Ok(RawImage {
        height,
        width,
        maxval,
        samples,
    })
}

#[inline]
fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// P6, maxval 65535, big-endian; values are clipped to [0, 1] and rounded.
pub fn encode_ppm(image: &LinearImage) -> Vec<u8> {
    let header = format!("P6\n{} {}\n65535\n", image.width(), image.height());
    let mut out = Vec::with_capacity(header.len() + image.data().len() * 2);
    out.extend_from_slice(header.as_bytes());
    for &v in image.data() {
        out.extend_from_slice(&to_u16(v).to_be_bytes());
    }
    out
}

pub fn write_ppm(path: &Path, image: &LinearImage) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn write_png16(path: &Path, image: &LinearImage) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.width() as u32,
        image.height() as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(e.to_string()))?;
    let data: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|&v| to_u16(v).to_be_bytes())
        .collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Writes PNG when the extension is `.png`, PPM otherwise.
pub fn write_image(path: &Path, image: &LinearImage) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => write_png16(path, image),
        _ => write_ppm(path, image),
    }
}

pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_pgm(width, height, values))?;
    w.flush()?;
    Ok(())
}

/// Reads an 8-bit P5 file; returns (width, height, values).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(b"P5") {
        return Err(Error::Format("missing P5 magic".into()));
    }
    let mut cur = HeaderCursor {
        bytes: &bytes,
        pos: 2,
    };
    let width = cur.number()? as usize;
    let height = cur.number()? as usize;
    let maxval = cur.number()?;
    if maxval > 255 {
        return Err(Error::Format("only 8-bit PGM is supported".into()));
    }
    let start = cur.pos + 1;
    let values = bytes
        .get(start..start + width * height)
        .ok_or_else(|| Error::Format("truncated PGM raster".into()))?
        .to_vec();
    Ok((width, height, values))
}
