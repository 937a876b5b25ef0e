//! Binary PGM (`P5`) I/O.

use std::fs;
use std::path::Path;

use super::BinaryImage;
use crate::error::{Error, Result};

/// Gray level at or above which a pixel is foreground.
pub const FOREGROUND_THRESHOLD: u8 = 128;

/// 8-bit grayscale raster as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let fail = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos).ok_or_else(|| fail("empty file"))?;
    match magic.as_str() {
        "P5" => {}
        "P6" | "P3" => return Err(fail("color image; only grayscale PGM is supported")),
        _ => return Err(fail("not a binary PGM (P5) file")),
    }
    let mut num = |what: &str| -> Result<usize> {
        token(&mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail(&format!("bad {what} in header")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(fail("only 8-bit PGM (maxval <= 255) is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(fail("truncated raster"));
    }
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
        .collect();
    Ok(GrayImage {
        width,
        height,
        data,
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

/// Writes via a temporary sibling file and a rename.
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(img))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<BinaryImage> {
    let g = load_gray(path)?;
    let pixels = g.data.iter().map(|&v| v >= FOREGROUND_THRESHOLD).collect();
    BinaryImage::from_pixels(g.width, g.height, pixels)
}

pub fn save_image(img: &BinaryImage, path: impl AsRef<Path>) -> Result<()> {
    save_gray(&to_gray(img), path)
}

pub fn to_gray(img: &BinaryImage) -> GrayImage {
    GrayImage {
        width: img.width(),
        height: img.height(),
        data: img.pixels().iter().map(|&p| if p { 255 } else { 0 }).collect(),
    }
}
