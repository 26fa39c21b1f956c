//! Grayscale raster images and the pixel operations the augmentation and
//! data pipelines share: crop, bilinear resize, horizontal flip, separable
//! Gaussian blur with reflect padding.

use crate::error::{Error, Result};

/// Row-major grayscale image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Input(format!(
                "{} pixels for {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Copy out the rectangle starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        debug_assert!(y0 + h <= self.height && x0 + w <= self.width);
        let mut pixels = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + x0..row + x0 + w]);
        }
        Image {
            height: h,
            width: w,
            pixels,
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(self.width) {
            pixels.extend(row.iter().rev());
        }
        Image {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// Bilinear resample to `oh x ow` using the half-pixel-center convention.
    /// Interpolation is written in lerp form, so constant images stay
    /// bit-exactly constant.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Image {
        if oh == self.height && ow == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / oh as f32;
        let sx = self.width as f32 / ow as f32;
        let mut pixels = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for ox in 0..ow {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                let top = lerp(self.get(y0, x0), self.get(y0, x1), tx);
                let bottom = lerp(self.get(y1, x0), self.get(y1, x1), tx);
                pixels.push(lerp(top, bottom, ty));
            }
        }
        Image {
            height: oh,
            width: ow,
            pixels,
        }
    }

    /// Separable Gaussian blur with a normalized odd-size kernel and reflect
    /// padding at the borders.
    pub fn gaussian_blur(&self, sigma: f32, kernel_size: usize) -> Image {
        let kernel = gaussian_kernel(sigma, kernel_size);
        let half = (kernel_size / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        // Horizontal pass.
        let mut tmp = vec![0.0f32; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kw) in kernel.iter().enumerate() {
                    let xi = reflect(x + k as isize - half, w);
                    acc += kw * self.pixels[(y * w) as usize + xi];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        // Vertical pass.
        let mut out = vec![0.0f32; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kw) in kernel.iter().enumerate() {
                    let yi = reflect(y + k as isize - half, h);
                    acc += kw * tmp[yi * self.width + x as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        Image {
            height: self.height,
            width: self.width,
            pixels: out,
        }
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Symmetric reflection of an out-of-range index into [0, n).
fn reflect(mut i: isize, n: isize) -> usize {
    debug_assert!(n > 0);
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1-D Gaussian kernel of odd length.
pub fn gaussian_kernel(sigma: f32, size: usize) -> Vec<f32> {
    debug_assert!(size % 2 == 1, "kernel size must be odd");
    let half = (size / 2) as f32;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights: Vec<f32> = (0..size)
        .map(|i| {
            let d = i as f32 - half;
            (-d * d * inv).exp()
        })
        .collect();
    let sum: f32 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one_across_sigma_range() {
        for sigma in [0.1f32, 0.5, 1.0, 1.7, 2.0] {
            let k = gaussian_kernel(sigma, 9);
            let sum: f32 = k.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sigma {sigma}: sum {sum}");
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let img = Image::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn resize_preserves_constants_exactly() {
        let img = Image::constant(10, 14, 0.37);
        let out = img.resize_bilinear(7, 7);
        assert!(out.pixels.iter().all(|&p| p == 0.37));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::constant(16, 16, 0.6);
        let out = img.gaussian_blur(1.3, 9);
        assert!(out.pixels.iter().all(|&p| (p - 0.6).abs() < 1e-6));
    }

    #[test]
    fn reflect_handles_deep_overshoot() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(-5, 4), 3);
        // Extended pattern for n = 4: ... 1 0 | 0 1 2 3 | 3 2 1 0 | 0 1 ...
        assert_eq!(reflect(7, 4), 0);
        assert_eq!(reflect(9, 4), 1);
    }

    #[test]
    fn crop_extracts_rectangle() {
        let img = Image::new(3, 3, (0..9).map(|i| i as f32 / 10.0).collect()).unwrap();
        let c = img.crop(1, 1, 2, 2);
        assert_eq!(c.pixels, vec![0.4, 0.5, 0.7, 0.8]);
    }
}
