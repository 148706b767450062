//! Domain types shared across the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Target level of a referring expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Object,
    Part,
}

impl Granularity {
    /// `ĝ`: 0 for object, 1 for part.
    pub fn index(self) -> u8 {
        match self {
            Granularity::Object => 0,
            Granularity::Part => 1,
        }
    }

    pub fn from_index(g: u8) -> Result<Self> {
        match g {
            0 => Ok(Granularity::Object),
            1 => Ok(Granularity::Part),
            other => Err(Error::InvalidState(format!("granularity selector must be 0 or 1, got {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Object => "object",
            Granularity::Part => "part",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Granularity::Object),
            "part" => Ok(Granularity::Part),
            other => Err(invalid(format!("unknown granularity `{other}`"))),
        }
    }
}

/// RGB image with values in `[0,1]`, stored row-major as `[r, g, b]` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * 3 {
            return Err(invalid(format!("{} values for a {height}x{width}x3 image", values.len())));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite pixel value"));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let values = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.values[i..i + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut out = Self::filled(height, width, [0.0; 3]);
        for r in 0..height {
            let sr = (r * self.height) / height;
            for c in 0..width {
                let sc = (c * self.width) / width;
                out.set_pixel(r, c, self.pixel(sr, sc));
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let v = self.pixel(y as usize, x as usize);
            *px = image::Rgb(v.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| invalid(format!("png encode: {e}")))?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| invalid(format!("image decode: {e}")))?.to_rgb8();
        let (w, h) = img.dimensions();
        let values = img.pixels().flat_map(|p| p.0.map(|c| f64::from(c) / 255.0)).collect();
        Self::new(h as usize, w as usize, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn granularity_selector_domain() {
        assert_eq!(Granularity::from_index(0).unwrap(), Granularity::Object);
        assert_eq!(Granularity::from_index(1).unwrap(), Granularity::Part);
        assert!(matches!(Granularity::from_index(2), Err(Error::InvalidState(_))));
        assert_eq!("part".parse::<Granularity>().unwrap(), Granularity::Part);
    }

    #[test]
    fn png_round_trip_on_8bit_values() {
        let mut img = ImageTensor::filled(3, 5, [0.0, 0.2, 1.0]);
        img.set_pixel(1, 2, [1.0, 0.0, 0.6]);
        let back = ImageTensor::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
