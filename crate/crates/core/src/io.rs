//! Image files and 8-bit buffers. Everything inside the crate works on
//! `f64`; quantization to 8 bits happens only here.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage, RgbaImage};

use crate::error::{Error, Result};
use crate::tensor::{FrameSequence, ImageTensor, Shape, Tensor3};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(img: &ImageTensor) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let t = img.tensor();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(t.at(0, y, x)), to_u8(t.at(1, y, x)), to_u8(t.at(2, y, x))])
    })
}

pub fn from_rgb8(img: &RgbImage) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageTensor::from_tensor(Tensor3::from_fn(Shape::new(3, h, w), |c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    }))
}

/// Round-trips through 8 bits per channel, as a saved PNG would.
pub fn quantize_u8(img: &ImageTensor) -> Result<ImageTensor> {
    ImageTensor::from_tensor(img.tensor().map(|v| to_u8(v) as f64 / 255.0))
}

/// Interleaved RGBA bytes with opaque alpha.
pub fn to_rgba8_bytes(img: &ImageTensor) -> Vec<u8> {
    let rgb = to_rgb8(img);
    let mut out = Vec::with_capacity(rgb.as_raw().len() / 3 * 4);
    for p in rgb.pixels() {
        out.extend_from_slice(&[p.0[0], p.0[1], p.0[2], 255]);
    }
    out
}

/// Drops alpha from interleaved RGBA bytes.
pub fn from_rgba8_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() != width * height * 4 {
        return Err(Error::shape(format!("{} bytes for a {width}x{height} RGBA image", bytes.len())));
    }
    let rgba = RgbaImage::from_raw(width as u32, height as u32, bytes.to_vec())
        .ok_or_else(|| Error::shape("RGBA buffer does not match its dimensions"))?;
    ImageTensor::from_tensor(Tensor3::from_fn(Shape::new(3, height, width), |c, y, x| {
        rgba.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    }))
}

fn is_lossy(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("jpg" | "jpeg" | "webp")
    )
}

/// Reads any supported raster file as RGB.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    if is_lossy(path) {
        log::warn!("{} uses a lossy format; compression artifacts are treated as image content", path.display());
    }
    let img = image::open(path)?;
    from_rgb8(&img.to_rgb8())
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb8(img).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes an 8-bit RGB PNG, clamping to `[0, 1]` first.
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// Real baseline JPEG at `quality` (1..=100), decoded back.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("JPEG quality must lie in 1..=100, got {quality}")));
    }
    let mut buf = Vec::new();
    let rgb = to_rgb8(img);
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?;
    from_rgb8(&decoded.to_rgb8())
}

const FRAME_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "webp"];

/// Image files in `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// A single image file, or a directory of numbered frames.
pub fn read_frames(path: &Path) -> Result<FrameSequence> {
    if path.is_dir() {
        let paths = list_frames(path)?;
        if paths.is_empty() {
            return Err(Error::invalid(format!("no image frames in {}", path.display())));
        }
        FrameSequence::new(paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?)
    } else {
        Ok(FrameSequence::single(read_image(path)?))
    }
}

/// Writes `frame_0000.png`, `frame_0001.png`, ... into `dir`.
pub fn write_frames(dir: &Path, frames: &FrameSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.frames().iter().enumerate() {
        write_png(&dir.join(format!("frame_{i:04}.png")), f)?;
    }
    Ok(())
}
