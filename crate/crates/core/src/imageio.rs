//! PNG encoding with textual metadata, and small raster helpers.

use std::io::Cursor;
use std::path::Path;

use image::{RgbImage, RgbaImage};

use crate::{Error, Result};

/// A decoded PNG together with its `tEXt` key/value chunks.
#[derive(Debug, Clone)]
pub struct DecodedPng {
    pub image: RgbaImage,
    pub text: Vec<(String, String)>,
}

impl DecodedPng {
    pub fn text_value(&self, key: &str) -> Option<&str> {
        self.text
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn encode(
    width: u32,
    height: u32,
    color: png::ColorType,
    data: &[u8],
    text: &[(&str, &str)],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Fast);
        for (k, v) in text {
            encoder
                .add_text_chunk((*k).to_string(), (*v).to_string())
                .map_err(|e| Error::Codec(e.to_string()))?;
        }
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Codec(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Codec(e.to_string()))?;
        writer.finish().map_err(|e| Error::Codec(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_rgba(image: &RgbaImage, text: &[(&str, &str)]) -> Result<Vec<u8>> {
    encode(
        image.width(),
        image.height(),
        png::ColorType::Rgba,
        image.as_raw(),
        text,
    )
}

pub fn encode_rgb(image: &RgbImage, text: &[(&str, &str)]) -> Result<Vec<u8>> {
    encode(
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        image.as_raw(),
        text,
    )
}

/// Decode any 8-bit PNG (gray, gray+alpha, RGB, RGBA, palette) into RGBA.
pub fn decode(bytes: &[u8]) -> Result<DecodedPng> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Codec(e.to_string()))?;
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect();
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Codec("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Codec(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width, info.height);
    let rgba: Vec<u8> = match info.color_type {
        png::ColorType::Rgba => buf,
        png::ColorType::Rgb => buf
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g, 255]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0], p[1]])
            .collect(),
        png::ColorType::Indexed => {
            return Err(Error::Codec("palette image was not expanded".into()));
        }
    };
    let image = RgbaImage::from_raw(w, h, rgba)
        .ok_or_else(|| Error::Codec("decoded buffer size mismatch".into()))?;
    Ok(DecodedPng { image, text })
}

pub fn read_png(path: &Path) -> Result<DecodedPng> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Read a PNG or JPEG file as RGBA.
pub fn read_image(path: &Path) -> Result<RgbaImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        return decode(&bytes).map(|d| d.image);
    }
    image::load_from_memory(&bytes)
        .map(|img| img.to_rgba8())
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
}

/// Write bytes, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn rgba_to_rgb(image: &RgbaImage) -> RgbImage {
    let raw = image
        .as_raw()
        .chunks_exact(4)
        .flat_map(|p| [p[0], p[1], p[2]])
        .collect();
    RgbImage::from_raw(image.width(), image.height(), raw).expect("dimensions preserved")
}
