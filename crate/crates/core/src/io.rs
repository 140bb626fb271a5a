//! Raster file formats: PNG, PNM, PFM and PGM masks.

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Raster};
use crate::mask::BinaryMask;
use image::{DynamicImage, ImageFormat};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" | "pbm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::Format(format!("unsupported image extension `{ext}`"))),
    }
}

/// Reads an 8-bit PNG or PNM file; value `v` maps to `v/255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = match image::guess_format(&bytes) {
        Ok(f) => f,
        Err(_) => format_for(path)?,
    };
    let img = image::load_from_memory_with_format(&bytes, fmt).map_err(|e| Error::Format(e.to_string()))?;
    decode(img)
}

fn decode(img: DynamicImage) -> Result<ImageBuffer> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-dimension image".into()));
    }
    match img {
        DynamicImage::ImageLuma8(b) => ImageBuffer::new(w, h, 1, b.into_raw().iter().map(|v| *v as f64 / 255.0).collect()),
        DynamicImage::ImageLumaA8(_) => {
            let b = img.to_luma8();
            ImageBuffer::new(w, h, 1, b.into_raw().iter().map(|v| *v as f64 / 255.0).collect())
        }
        DynamicImage::ImageRgb8(b) => ImageBuffer::new(w, h, 3, b.into_raw().iter().map(|v| *v as f64 / 255.0).collect()),
        DynamicImage::ImageRgba8(_) => {
            let b = img.to_rgb8();
            ImageBuffer::new(w, h, 3, b.into_raw().iter().map(|v| *v as f64 / 255.0).collect())
        }
        _ => Err(Error::Format("only 8-bit gray or RGB images are supported".into())),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes PNG, PGM or PPM depending on the extension.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let fmt = format_for(path)?;
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(*v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynimg = if img.channels() == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized buffer"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized buffer"))
    };
    let mut out = Vec::new();
    dynimg
        .write_to(&mut std::io::Cursor::new(&mut out), fmt)
        .map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(path, &out)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a mask as binary PGM: 0 clear, 255 set.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|b| if *b { 255u8 } else { 0 }));
    write_bytes(path, &out)
}

/// Reads a PGM mask; any nonzero pixel is set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = load_image(path)?;
    let g = crate::image::to_grayscale(&img);
    BinaryMask::from_bits(g.width(), g.height(), g.data().iter().map(|v| *v > 0.5 / 255.0).collect())
}

/// Writes a float raster as little-endian PFM (bottom row first).
/// NaN marks invalid pixels.
pub fn write_pfm(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("Pf\n{} {}\n-1.0\n", r.width, r.height).into_bytes();
    for y in (0..r.height).rev() {
        for x in 0..r.width {
            out.extend_from_slice(&(r.get(x, y) as f32).to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

/// Writes a 1- or 3-channel image as PFM, keeping float precision.
pub fn write_pfm_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tag = if img.channels() == 1 { "Pf" } else { "PF" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row = img.width() * img.channels();
    for y in (0..img.height()).rev() {
        for v in &img.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::Format(e.to_string()))? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated PFM header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ascii PFM header".into()))
}

/// Reads a PFM file into `(width, height, channels, row-major top-first data)`.
pub fn read_pfm_data(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let channels = match read_token(&mut r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Format(format!("bad PFM magic `{t}`"))),
    };
    let parse = |s: String| s.parse::<usize>().map_err(|_| Error::Format("bad PFM dimension".into()));
    let w = parse(read_token(&mut r)?)?;
    let h = parse(read_token(&mut r)?)?;
    let scale: f64 = read_token(&mut r)?.parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * channels * 4];
    r.read_exact(&mut raw).map_err(|_| Error::Format("truncated PFM data".into()))?;
    let mut data = vec![0.0; w * h * channels];
    let row = w * channels;
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
        let (yy, xx) = (k / row, k % row);
        data[(h - 1 - yy) * row + xx] = v;
    }
    Ok((w, h, channels, data))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Raster> {
    let (w, h, c, data) = read_pfm_data(path)?;
    if c != 1 {
        return Err(Error::Format("expected a 1-channel PFM".into()));
    }
    Ok(Raster { width: w, height: h, data })
}

pub fn read_pfm_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let (w, h, c, data) = read_pfm_data(path)?;
    ImageBuffer::new(w, h, c, data)
}

/// Writes a raster as whitespace-separated ASCII rows.
pub fn write_ascii_matrix(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for y in 0..r.height {
        let row: Vec<String> = (0..r.width).map(|x| crate::evaluation::fmt_g6(r.get(x, y))).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
