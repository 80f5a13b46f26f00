//! Simple dense rasters for images and class-index masks, plus PNG I/O.
//!
//! `Raster<Rgb>` holds 8-bit RGB imagery, `Raster<u8>` holds class-index
//! masks. Mask files on disk are RGB PNGs encoded through a [`ClassMap`].

use crate::error::{Error, Result};
use crate::labels::{ClassMap, Rgb};
use std::path::Path;

/// Row-major 2D grid of pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<P> {
    width: usize,
    height: usize,
    data: Vec<P>,
}

impl<P: Copy> Raster<P> {
    pub fn filled(width: usize, height: usize, fill: P) -> Self {
        Raster {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "raster data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: P) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[P] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn row(&self, y: usize) -> &[P] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn same_shape<Q: Copy>(&self, other: &Raster<Q>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<Q: Copy>(&self, f: impl Fn(P) -> Q) -> Raster<Q> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }
}

/// Decodes an RGB mask raster into class indices through the class map.
/// Any color outside the registered set is an error carrying the pixel
/// location.
pub fn mask_from_rgb(rgb: &Raster<Rgb>, map: &ClassMap) -> Result<Raster<u8>> {
    let mut data = Vec::with_capacity(rgb.len());
    for y in 0..rgb.height() {
        for x in 0..rgb.width() {
            let g = map.grade_from_color_at(rgb.get(x, y), Some((x as u32, y as u32)))?;
            data.push(g.index() as u8);
        }
    }
    Raster::from_vec(rgb.width(), rgb.height(), data)
}

/// Encodes a class-index mask as an RGB raster with the registered colors.
pub fn mask_to_rgb(mask: &Raster<u8>, map: &ClassMap) -> Result<Raster<Rgb>> {
    let mut data = Vec::with_capacity(mask.len());
    for &c in mask.pixels() {
        let g = map.grade_from_class_index(c as usize)?;
        data.push(map.color_for_grade(g));
    }
    Raster::from_vec(mask.width(), mask.height(), data)
}

/// Reads an RGB PNG (any color type is converted to RGB8).
pub fn read_rgb(path: &Path) -> Result<Raster<Rgb>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path.display().to_string(), e))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0).collect();
    Raster::from_vec(w, h, data)
}

/// Writes an RGB raster as a PNG file.
pub fn write_rgb(path: &Path, raster: &Raster<Rgb>) -> Result<()> {
    let mut img = image::RgbImage::new(raster.width() as u32, raster.height() as u32);
    for y in 0..raster.height() {
        for x in 0..raster.width() {
            img.put_pixel(x as u32, y as u32, image::Rgb(raster.get(x, y)));
        }
    }
    img.save(path)
        .map_err(|e| Error::image(path.display().to_string(), e))
}

/// Reads a mask PNG and decodes it to class indices.
pub fn read_mask(path: &Path, map: &ClassMap) -> Result<Raster<u8>> {
    let rgb = read_rgb(path)?;
    mask_from_rgb(&rgb, map)
}

/// Encodes a class-index mask with the registered colors and writes a PNG.
pub fn write_mask(path: &Path, mask: &Raster<u8>, map: &ClassMap) -> Result<()> {
    write_rgb(path, &mask_to_rgb(mask, map)?)
}

/// Blends registered class colors over an image; background pixels are left
/// untouched. `alpha` is the mask color weight in [0,1].
pub fn overlay(
    image: &Raster<Rgb>,
    mask: &Raster<u8>,
    map: &ClassMap,
    alpha: f64,
) -> Result<Raster<Rgb>> {
    if !image.same_shape(mask) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let a = alpha.clamp(0.0, 1.0);
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let cls = mask.get(x, y) as usize;
            let grade = map.grade_from_class_index(cls)?;
            if !grade.is_tumor() {
                continue;
            }
            let color = map.color_for_grade(grade);
            let px = image.get(x, y);
            let mut blended = [0u8; 3];
            for ch in 0..3 {
                blended[ch] = ((1.0 - a) * px[ch] as f64 + a * color[ch] as f64)
                    .round()
                    .clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, blended);
        }
    }
    Ok(out)
}
