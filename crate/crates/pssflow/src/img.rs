//! Float RGB images.

use crate::{Error, Result};

pub type Rgb = [f64; 3];

/// Rec. 709 luma of a linear RGB triple.
pub fn luminance(c: Rgb) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// Linear-light RGB image, row-major from the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("Image::new", "zero-area image"));
        }
        Ok(Image {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("Image::from_pixels", "zero-area image"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(
                "Image::from_pixels",
                format!("{}x{} needs {} pixels, got {}", width, height, width * height, pixels.len()),
            ));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn max_luminance(&self) -> f64 {
        self.pixels
            .iter()
            .map(|&p| luminance(p))
            .fold(0.0, f64::max)
    }

    /// Grayscale image from per-pixel scalar values.
    pub fn from_scalars(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Image::from_pixels(width, height, values.iter().map(|&v| [v, v, v]).collect())
    }
}
