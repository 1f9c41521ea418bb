//! In-memory RGB rasters; the slide and overlay representation.

use alloc::vec;
use alloc::vec::Vec;

use crate::fx;

/// 8-bit RGB image, row-major, origin at the top-left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32, fill: [u8; 3]) -> Self {
        let mut data = vec![0u8; (width as usize) * (height as usize) * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&fill);
        }
        Raster { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        if data.len() == (width as usize) * (height as usize) * 3 {
            Some(Raster { width, height, data })
        } else {
            None
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean brightness of a pixel in [0, 1]: the RGB average over 255.
    #[inline]
    pub fn brightness(&self, x: u32, y: u32) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        (r as f64 + g as f64 + b as f64) / (3.0 * 255.0)
    }

    /// Paint a filled axis-aligned ellipse, clipped to the image.
    pub fn fill_ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, rgb: [u8; 3]) {
        if rx <= 0.0 || ry <= 0.0 {
            return;
        }
        let x0 = fx::floor(cx - rx).max(0.0) as u32;
        let x1 = fx::ceil(cx + rx).min(self.width as f64 - 1.0) as u32;
        let y0 = fx::floor(cy - ry).max(0.0) as u32;
        let y1 = fx::ceil(cy + ry).min(self.height as f64 - 1.0) as u32;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.set_pixel(x, y, rgb);
                }
            }
        }
    }

    /// Paint a filled rectangle, clipped to the image.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, w: u32, h: u32, rgb: [u8; 3]) {
        let x1 = (x0 + w).min(self.width);
        let y1 = (y0 + h).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                self.set_pixel(x, y, rgb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_is_clipped_and_filled() {
        let mut r = Raster::new(10, 10, [255, 255, 255]);
        r.fill_ellipse(0.0, 0.0, 4.0, 4.0, [0, 0, 0]);
        assert_eq!(r.pixel(0, 0), [0, 0, 0]);
        assert_eq!(r.pixel(9, 9), [255, 255, 255]);
    }

    #[test]
    fn brightness_bounds() {
        let r = Raster::new(2, 2, [255, 255, 255]);
        assert_eq!(r.brightness(0, 0), 1.0);
        let r = Raster::new(2, 2, [0, 0, 0]);
        assert_eq!(r.brightness(1, 1), 0.0);
    }
}
