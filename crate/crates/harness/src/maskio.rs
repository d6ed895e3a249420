//! Mask and frame files: 8-bit index PNGs, a whitespace-separated text
//! grid, and binary PPM for frames.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageFormat, RgbImage};
use rde_core::encoders::{Frame, ObjectMask};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskFormat {
    #[default]
    Png,
    Text,
}

impl MaskFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MaskFormat::Png => "png",
            MaskFormat::Text => "txt",
        }
    }
}

impl FromStr for MaskFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "png" => Ok(MaskFormat::Png),
            "text" | "txt" => Ok(MaskFormat::Text),
            other => Err(Error::Config(format!("unknown mask format `{other}`"))),
        }
    }
}

/// One row per line, ids separated by single spaces.
pub fn mask_to_text(mask: &ObjectMask) -> String {
    let mut out = String::with_capacity(mask.labels().len() * 2);
    for row in mask.labels().chunks(mask.width()) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn mask_from_text(text: &str, num_objects: usize) -> Result<ObjectMask> {
    let rows: Vec<Vec<u8>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<u8>().map_err(|e| Error::Config(format!("bad mask entry `{v}`: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Config("mask rows differ in length".into()));
    }
    Ok(ObjectMask::new(rows.len(), w, num_objects, rows.concat())?)
}

pub fn write_mask(mask: &ObjectMask, format: MaskFormat, path: &Path) -> Result<()> {
    match format {
        MaskFormat::Text => fs::write(path, mask_to_text(mask)).map_err(|e| Error::io(path, e)),
        MaskFormat::Png => {
            let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.labels().to_vec())
                .expect("buffer matches mask size");
            img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_mask(path: &Path, format: MaskFormat, num_objects: usize) -> Result<ObjectMask> {
    match format {
        MaskFormat::Text => mask_from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?, num_objects),
        MaskFormat::Png => {
            let img = image::open(path).map_err(|e| Error::io(path, e))?.to_luma8();
            let (w, h) = img.dimensions();
            Ok(ObjectMask::new(h as usize, w as usize, num_objects, img.into_raw())?)
        }
    }
}

pub fn write_frame_ppm(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let px = frame.pixels.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (px[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save_with_format(path, ImageFormat::Pnm).map_err(|e| Error::io(path, e))
}
