//! 8-bit PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use diad_core::image::Grid;
use diad_core::synth::RgbImage;

use crate::error::{Error, IoContext, Result};

/// Decodes any PNG to 8-bit RGB (grey is replicated, alpha dropped).
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).at(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let mut img = RgbImage::new(h, w);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let p = &row[x * channels..];
            let px = if channels < 3 {
                [p[0]; 3]
            } else {
                [p[0], p[1], p[2]]
            };
            img.set(y, x, px);
        }
    }
    Ok(img)
}

/// Reads a mask PNG; any non-zero grey level counts as anomalous.
pub fn read_mask(path: &Path) -> Result<Grid> {
    let img = read_rgb(path)?;
    Ok(Grid::from_fn(img.height, img.width, |y, x| {
        f64::from(u8::from(img.get(y, x).iter().any(|&v| v > 127)))
    }))
}

fn write(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write(
        path,
        img.width,
        img.height,
        png::ColorType::Rgb,
        &img.pixels,
    )
}

pub fn write_gray(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    write(path, w, h, png::ColorType::Grayscale, data)
}

/// Binary mask as 0/255 grey.
pub fn write_mask(path: &Path, mask: &Grid) -> Result<()> {
    let data: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 255 } else { 0 })
        .collect();
    write_gray(path, mask.width(), mask.height(), &data)
}

/// Colour heatmap of `map` scaled from `[lo, hi]` (blue to red).
pub fn heatmap(map: &Grid, lo: f64, hi: f64) -> RgbImage {
    let span = (hi - lo).max(1e-12);
    let mut img = RgbImage::new(map.height(), map.width());
    for y in 0..map.height() {
        for x in 0..map.width() {
            let t = ((map.get(y, x) - lo) / span).clamp(0.0, 1.0);
            let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
            let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
            let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
            img.set(y, x, [r, g, b].map(|v| (v * 255.0).round() as u8));
        }
    }
    img
}
