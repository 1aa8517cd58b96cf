//! Image files to and from `[H, W, C]` tensors in `[0, 1]`.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::FilterType;
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
}

impl ImageGeometry {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            height: cfg.image_height,
            width: cfg.image_width,
            channels: cfg.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!(
                "image geometry {}x{}x{} needs positive sides and 1 or 3 channels",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Rounds to the nearest of the 256 levels an 8-bit file can hold.
pub fn quantize(v: f32) -> f32 {
    to_byte(v) as f32 / 255.0
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary PPM (3 channels) or PGM (1 channel).
pub fn write_pnm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::dim("write_pnm", img.shape(), &[0, 0, 0]));
    };
    let (subtype, color) = match c {
        3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        _ => return Err(Error::Config(format!("cannot write a {c}-channel image"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&bytes, w as u32, h as u32, color)
        .map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Decodes any supported image, center-crops it to the target aspect ratio,
/// resizes it and converts it to the target channel count.
pub fn read_image(path: &Path, geometry: ImageGeometry) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(fit(img, geometry))
}

/// Like [`read_image`], but the file must already have the target height and
/// width; anything else is a configuration error.
pub fn read_image_exact(path: &Path, geometry: ImageGeometry) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    if (img.height() as usize, img.width() as usize) != (geometry.height, geometry.width) {
        return Err(Error::Config(format!(
            "{} is {}x{}, model expects {}x{}",
            path.display(),
            img.height(),
            img.width(),
            geometry.height,
            geometry.width
        )));
    }
    Ok(fit(img, geometry))
}

fn fit(img: DynamicImage, g: ImageGeometry) -> Tensor<f32> {
    let (w, h) = (img.width() as u64, img.height() as u64);
    let (tw, th) = (g.width as u64, g.height as u64);
    // Largest window with the target aspect ratio.
    let (cw, ch) = if w * th > h * tw {
        (h * tw / th, h)
    } else {
        (w, w * th / tw)
    };
    let (x0, y0) = ((w - cw) / 2, (h - ch) / 2);
    let mut img = img.crop_imm(x0 as u32, y0 as u32, cw.max(1) as u32, ch.max(1) as u32);
    if (img.width() as u64, img.height() as u64) != (tw, th) {
        img = img.resize_exact(tw as u32, th as u32, FilterType::Triangle);
    }
    let data: Vec<f32> = if g.channels == 3 {
        img.to_rgb8().into_raw().into_iter().map(|b| b as f32 / 255.0).collect()
    } else {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(|b| b as f32 / 255.0)
            .collect()
    };
    Tensor::new(g.shape(), data).expect("decoded buffer matches geometry")
}
