//! On-disk formats.
//!
//! * [`InstanceMask`]: 16-bit single-channel PNG, label values verbatim.
//! * [`Heatmap`]: `"LGNH"` magic, `u32` width, `u32` height, `u32` reserved
//!   (all little-endian), then `width * height` little-endian `f32` values in
//!   row-major order.
//! * Heatmap preview: 8-bit PNG with `round(255 * p)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::{Heatmap, InstanceMask, RgbTile};

pub const HEATMAP_MAGIC: &[u8; 4] = b"LGNH";

pub fn load_tile(path: impl AsRef<Path>) -> Result<RgbTile> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbTile::from_u8(w as usize, h as usize, img.as_raw())
}

pub fn save_tile(tile: &RgbTile, path: impl AsRef<Path>) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(tile.width() as u32, tile.height() as u32, tile.to_u8())
            .expect("buffer length matches dims");
    buf.save(path)?;
    Ok(())
}

pub fn save_mask(mask: &InstanceMask, path: impl AsRef<Path>) -> Result<()> {
    let mut raw = Vec::with_capacity(mask.labels().len());
    for &l in mask.labels() {
        raw.push(u16::try_from(l).map_err(|_| Error::LabelOverflow(l))?);
    }
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
            .expect("buffer length matches dims");
    buf.save(path)?;
    Ok(())
}

/// Reads a label PNG. 8-bit and 16-bit gray are taken verbatim.
pub fn load_mask(path: impl AsRef<Path>) -> Result<InstanceMask> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => other.into_luma16().into_raw().into_iter().map(u32::from).collect(),
    };
    InstanceMask::new(w, h, labels)
}

pub fn write_heatmap<W: Write>(heatmap: &Heatmap, mut out: W) -> Result<()> {
    out.write_all(HEATMAP_MAGIC)?;
    out.write_all(&(heatmap.width() as u32).to_le_bytes())?;
    out.write_all(&(heatmap.height() as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    let mut body = Vec::with_capacity(heatmap.data().len() * 4);
    for &p in heatmap.data() {
        body.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out.write_all(&body)?;
    Ok(())
}

pub fn read_heatmap<R: Read>(mut input: R) -> Result<Heatmap> {
    let bad = |detail: String| Error::Format { what: "heatmap", detail };
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != HEATMAP_MAGIC {
        return Err(bad("missing LGNH magic".into()));
    }
    let w = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != w * h * 4 {
        return Err(bad(format!("expected {} payload bytes, found {}", w * h * 4, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Heatmap::new(w, h, data)
}

pub fn save_heatmap(heatmap: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    write_heatmap(heatmap, std::io::BufWriter::new(fs::File::create(path)?))
}

pub fn load_heatmap(path: impl AsRef<Path>) -> Result<Heatmap> {
    read_heatmap(std::io::BufReader::new(fs::File::open(path)?))
}

pub fn save_heatmap_preview(heatmap: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let raw: Vec<u8> = heatmap.data().iter().map(|p| (255.0 * p).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(heatmap.width() as u32, heatmap.height() as u32, raw)
            .expect("buffer length matches dims");
    buf.save(path)?;
    Ok(())
}
