use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};

use crate::error::{Error, Result};

/// Luma weights for converting RGB frames to grayscale.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Single-channel frame with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayFrame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || height * width != pixels.len() {
            return Err(Error::Data(format!(
                "frame of {height}x{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(GrayFrame { height, width, pixels })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Reads an 8-bit grayscale or RGB(A) PNG.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_image(&img))
    }

    pub fn from_image(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = match img {
            DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&p| f32::from(p) / 255.0).collect(),
            DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
                img.to_luma32f().into_raw()
            }
            _ => img
                .to_rgb8()
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0.map(f32::from);
                    ((LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b) / 255.0).clamp(0.0, 1.0)
                })
                .collect(),
        };
        GrayFrame {
            height: h,
            width: w,
            pixels,
        }
    }

    /// Writes the frame as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for (i, p) in self.pixels.iter().enumerate() {
            let v = (p * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel((i % self.width) as u32, (i / self.width) as u32, Luma([v]));
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Per-pixel displacement (in pixels) from the onset frame to the apex frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        let n = height * width;
        if n == 0 || u.len() != n || v.len() != n {
            return Err(Error::Data(format!(
                "flow of {height}x{width} needs {n} entries per component, got {} and {}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(FlowField { height, width, u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Horizontal component.
    pub fn u(&self) -> &[f32] {
        &self.u
    }

    /// Vertical component (positive downwards).
    pub fn v(&self) -> &[f32] {
        &self.v
    }
}
