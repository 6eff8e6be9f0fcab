use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => Ok(ImageFormat::Pgm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::InvalidArgument(format!("{}: unknown image extension", path.display()))),
        }
    }
}

fn to_byte(v: f32) -> u8 {
    // Round half up.
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// The image as it reads back after an 8-bit write.
pub fn quantize_u8(img: &Image) -> Image {
    Image {
        pixels: img.pixels.iter().map(|&v| to_byte(v) as f32 / 255.0).collect(),
        ..img.clone()
    }
}

fn grayscale_bytes(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "grayscale output needs 1 channel, image has {}",
            img.channels
        )));
    }
    Ok(img.pixels.iter().map(|&v| to_byte(v)).collect())
}

fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Image> {
    Image::new(1, h, w, bytes.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let bytes = grayscale_bytes(img)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height).map_err(|e| Error::io(path, e))?;
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::InvalidArgument(format!("{}: {m}", path.display()));
    // Header: magic, width, height, maxval separated by whitespace (comments allowed).
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < buf.len() && (buf[i].is_ascii_whitespace() || buf[i] == b'#') {
            if buf[i] == b'#' {
                while i < buf.len() && buf[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM supported"));
    }
    let data = &buf[i + 1..];
    if data.len() < w * h {
        return Err(bad("truncated pixel data"));
    }
    from_bytes(h, w, &data[..w * h])
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes = grayscale_bytes(img)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::InvalidArgument(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::InvalidArgument(format!("{}: {m}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad("only 8-bit grayscale PNG supported".into()));
    }
    from_bytes(info.height as usize, info.width as usize, &buf[..info.buffer_size()])
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match ImageFormat::from_path(path)? {
        ImageFormat::Pgm => write_pgm(path, img),
        ImageFormat::Png => write_png(path, img),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    match ImageFormat::from_path(path)? {
        ImageFormat::Pgm => read_pgm(path),
        ImageFormat::Png => read_png(path),
    }
}
