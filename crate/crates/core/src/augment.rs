//! Stochastic two-view generation: seeded random crop-resize, horizontal
//! flip, and Gaussian blur.
//!
//! Every view is produced from its own RNG stream derived purely from
//! `(global_seed, epoch, sample_index, view_slot)`, so results never depend
//! on scheduling or worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Image;

/// RNG used for view sampling.
pub type ViewRng = ChaCha8Rng;

/// Parameters of the view-generation distribution.
#[derive(Clone, Debug)]
pub struct AugmentationConfig {
    /// Output side length in pixels.
    pub view_size: usize,
    /// Crop area as a fraction of the source area, [min, max].
    pub crop_area_range: (f64, f64),
    /// Crop aspect ratio (width / height), [min, max].
    pub crop_aspect_range: (f64, f64),
    pub flip_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma_range: (f64, f64),
    /// Odd Gaussian kernel size.
    pub blur_kernel: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            view_size: 112,
            crop_area_range: (0.2, 1.0),
            crop_aspect_range: (0.75, 4.0 / 3.0),
            flip_probability: 0.5,
            blur_probability: 0.5,
            blur_sigma_range: (0.1, 2.0),
            blur_kernel: 9,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.crop_area_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Input(format!("crop area range [{a0}, {a1}]")));
        }
        let (r0, r1) = self.crop_aspect_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Input(format!("crop aspect range [{r0}, {r1}]")));
        }
        if self.view_size < 8 {
            return Err(Error::Input(format!("view size {} < 8", self.view_size)));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::Input(format!(
                "blur kernel {} must be odd",
                self.blur_kernel
            )));
        }
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("blur_probability", self.blur_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Input(format!("{name} {p} outside [0, 1]")));
            }
        }
        let (s0, s1) = self.blur_sigma_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::Input(format!("blur sigma range [{s0}, {s1}]")));
        }
        Ok(())
    }
}

/// Which of the two per-image views this is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewSlot {
    First = 0,
    Second = 1,
}

/// One augmented view of a source image.
#[derive(Clone, Debug)]
pub struct View {
    /// `size * size` grayscale values in [0, 1].
    pub pixels: Vec<f32>,
    pub size: usize,
    pub source_index: usize,
    pub slot: ViewSlot,
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; the fixed 64-bit mixing function behind stream
/// derivation.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent RNG stream as a pure function of its arguments.
/// Distinct tuples give distinct streams up to 64-bit hash collisions.
pub fn derive_stream(global_seed: u64, epoch: u64, sample_index: u64, view_slot: u64) -> ViewRng {
    let mut h = splitmix64(global_seed);
    h = splitmix64(h ^ epoch);
    h = splitmix64(h ^ sample_index);
    h = splitmix64(h ^ view_slot);
    ViewRng::seed_from_u64(h)
}

/// Sample one view. The draw order is fixed: per crop attempt (area, aspect),
/// then the crop position, the flip coin, the blur coin, and finally sigma
/// when blurring; determinism follows from the stream alone.
pub fn sample_view(
    image: &Image,
    cfg: &AugmentationConfig,
    rng: &mut ViewRng,
    source_index: usize,
    slot: ViewSlot,
) -> Result<View> {
    let (h, w) = (image.height, image.width);
    let min_side = cfg.view_size.div_ceil(4);
    if h < min_side || w < min_side {
        return Err(Error::Input(format!(
            "image {h}x{w} smaller than minimum side {min_side} for view size {}",
            cfg.view_size
        )));
    }

    let cropped = sample_crop(image, cfg, rng);
    let mut view = cropped.resize_bilinear(cfg.view_size, cfg.view_size);
    if rng.gen_bool(cfg.flip_probability) {
        view = view.flip_horizontal();
    }
    if rng.gen_bool(cfg.blur_probability) {
        let sigma = rng.gen_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1);
        view = view.gaussian_blur(sigma as f32, cfg.blur_kernel);
    }
    Ok(View {
        pixels: view.pixels,
        size: cfg.view_size,
        source_index,
        slot,
    })
}

/// Rejection-sample a crop rectangle from the area/aspect ranges; after ten
/// failed attempts fall back to the largest centered square.
fn sample_crop(image: &Image, cfg: &AugmentationConfig, rng: &mut ViewRng) -> Image {
    let (h, w) = (image.height, image.width);
    let src_area = (h * w) as f64;
    for _ in 0..10 {
        let area = rng.gen_range(cfg.crop_area_range.0..=cfg.crop_area_range.1) * src_area;
        let aspect = rng.gen_range(cfg.crop_aspect_range.0..=cfg.crop_aspect_range.1);
        let cw = ((area * aspect).sqrt().round() as usize).max(1);
        let ch = ((area / aspect).sqrt().round() as usize).max(1);
        if cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            return image.crop(y0, x0, ch, cw);
        }
    }
    let side = h.min(w);
    image.crop((h - side) / 2, (w - side) / 2, side, side)
}
