//! Binary PPM (P6) and PGM (P5) readers and writers.
//!
//! Images are 8-bit RGB PPM; label rasters are 8-bit PGM with 255 reserved
//! as the ignore-index.  Writers emit a fixed header layout so identical
//! pixel data always produces identical bytes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SstError};

/// An 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }
}

/// An 8-bit single-channel raster (labels or any grayscale).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| SstError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!("{magic}\n{width} {height}\n255\n");
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(data))
        .and_then(|_| w.flush())
        .map_err(|e| SstError::io(path, e))
}

/// Netpbm header parser: magic, then exactly width, height, maxval tokens
/// separated by whitespace/comments, then a single whitespace byte before
/// binary data.
fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(SstError::format(path, format!("not a {magic} file")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(SstError::format(path, "malformed netpbm header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SstError::format(path, "malformed netpbm header"))?;
    }
    if fields[2] != 255 {
        return Err(SstError::format(
            path,
            format!("maxval {} unsupported; expected 255", fields[2]),
        ));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(SstError::format(path, "missing separator before pixel data"));
    }
    pos += 1;
    Ok((fields[0], fields[1], &bytes[pos..]))
}

/// Write an RGB image as binary PPM (P6).
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    debug_assert_eq!(img.data.len(), img.width * img.height * 3);
    write_netpbm(path, "P6", img.width, img.height, &img.data)
}

/// Read a binary PPM (P6).
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| SstError::io(path, e))?;
    let (width, height, data) = parse_header(path, &bytes, "P6")?;
    let need = width * height * 3;
    if data.len() < need {
        return Err(SstError::format(
            path,
            format!("pixel data truncated: {} of {need} bytes", data.len()),
        ));
    }
    Ok(RgbImage {
        width,
        height,
        data: data[..need].to_vec(),
    })
}

/// Write a grayscale raster as binary PGM (P5).
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    debug_assert_eq!(img.data.len(), img.width * img.height);
    write_netpbm(path, "P5", img.width, img.height, &img.data)
}

/// Read a binary PGM (P5).
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| SstError::io(path, e))?;
    let (width, height, data) = parse_header(path, &bytes, "P5")?;
    let need = width * height;
    if data.len() < need {
        return Err(SstError::format(
            path,
            format!("pixel data truncated: {} of {need} bytes", data.len()),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        data: data[..need].to_vec(),
    })
}
