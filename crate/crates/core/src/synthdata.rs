//! Synthetic binary segmentation data: one bright ellipse per image on a
//! softly textured, noisy background.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::mask::LabelMask;
use crate::rng::CounterRng;
use crate::segnet::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Semi-axis range in pixels, `[min, max]`.
    pub radius_range: [f64; 2],
    pub foreground_range: [f64; 2],
    pub background_range: [f64; 2],
    /// Amplitude of the sinusoidal background texture.
    pub texture_amplitude: f64,
    pub noise_stddev: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 64,
            height: 64,
            width: 64,
            radius_range: [6.0, 16.0],
            foreground_range: [0.45, 0.6],
            background_range: [0.25, 0.38],
            texture_amplitude: 0.03,
            noise_stddev: 0.03,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let [rmin, rmax] = self.radius_range;
        if self.count < 2 {
            return Err(invalid("dataset needs at least two samples so targets can come from another sample"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(invalid("image size must be positive"));
        }
        if !(rmin >= 3.0 && rmin <= rmax) {
            return Err(invalid(format!("radius range [{rmin}, {rmax}] must satisfy 3 <= min <= max")));
        }
        let limit = self.height.min(self.width) as f64 / 3.0;
        if rmax > limit {
            return Err(invalid(format!(
                "max radius {rmax} does not fit a {}x{} frame (limit {limit:.2})",
                self.height, self.width
            )));
        }
        let [flo, fhi] = self.foreground_range;
        let [blo, bhi] = self.background_range;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(flo) && unit(fhi) && unit(blo) && unit(bhi) && flo <= fhi && blo <= bhi) {
            return Err(invalid("intensity ranges must be ordered and inside [0, 1]"));
        }
        if flo <= bhi {
            return Err(invalid("foreground intensities must lie strictly above the background range"));
        }
        if !(self.noise_stddev >= 0.0 && self.texture_amplitude >= 0.0) {
            return Err(invalid("noise and texture amplitudes must be non-negative"));
        }
        Ok(())
    }
}

/// Geometry and intensities drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let u = (dx * c + dy * s) / self.semi_axes.0;
        let v = (-dx * s + dy * c) / self.semi_axes.1;
        u * u + v * v <= 1.0
    }

    /// Half extents `(ey, ex)` of the axis-aligned bounding box.
    fn half_extents(&self) -> (f64, f64) {
        let (a, b) = self.semi_axes;
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let ex = libm::sqrt(a * a * c * c + b * b * s * s);
        let ey = libm::sqrt(a * a * s * s + b * b * c * c);
        (ey, ex)
    }
}

pub fn generate(config: &GenConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.count)
        .map(|i| generate_one(config, i as u32).map(|(s, _)| s))
        .collect()
}

/// Draws sample `id`; each sample uses its own PRNG stream.
pub fn generate_one(config: &GenConfig, id: u32) -> Result<(Sample, Ellipse)> {
    let (h, w) = (config.height, config.width);
    let mut rng = CounterRng::stream(config.seed, id as u64);
    let [rmin, rmax] = config.radius_range;
    let semi_axes = (rng.uniform(rmin, rmax), rng.uniform(rmin, rmax));
    let angle = rng.uniform(0.0, core::f64::consts::PI);
    let mut ellipse = Ellipse { center: (0.0, 0.0), semi_axes, angle };
    let (ey, ex) = ellipse.half_extents();
    if 2.0 * ey > (h - 1) as f64 || 2.0 * ex > (w - 1) as f64 {
        return Err(invalid("ellipse does not fit inside the frame"));
    }
    ellipse.center = (
        rng.uniform(ey, (h - 1) as f64 - ey),
        rng.uniform(ex, (w - 1) as f64 - ex),
    );

    let fg = rng.uniform(config.foreground_range[0], config.foreground_range[1]);
    let bg = rng.uniform(config.background_range[0], config.background_range[1]);
    let tex = config.texture_amplitude;
    let (fy, fx) = (rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4));
    let (py, px) = (rng.uniform(0.0, core::f64::consts::TAU), rng.uniform(0.0, core::f64::consts::TAU));

    let mask = LabelMask::from_fn(h, w, |y, x| ellipse.contains(y as f64, x as f64) as u8);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let base = if mask.get(y, x) == 1 {
                fg
            } else {
                bg + tex * libm::sin(fy * y as f64 + py) * libm::sin(fx * x as f64 + px)
            };
            let noise = if config.noise_stddev > 0.0 { config.noise_stddev * rng.normal() } else { 0.0 };
            pixels.push((base + noise).clamp(0.0, 1.0) as f32);
        }
    }
    let image = Tensor::new(&[1, h, w], pixels)?;
    Ok((Sample::new(id, image, mask)?, ellipse))
}

/// Donor sample for the target mask: uniform over samples whose id differs
/// from `source_id`, fully determined by `seed`.
pub fn pick_target(dataset: &[Sample], source_id: u32, seed: u64) -> Result<&Sample> {
    if dataset.len() < 2 {
        return Err(invalid("need at least two samples to pick a target from another sample"));
    }
    let candidates: Vec<&Sample> = dataset.iter().filter(|s| s.id != source_id).collect();
    if candidates.is_empty() {
        return Err(invalid("every sample shares the source id"));
    }
    let mut rng = CounterRng::stream(seed, 0x7A26_0000 ^ source_id as u64);
    Ok(candidates[rng.below(candidates.len() as u64) as usize])
}

pub fn pick_target_mask(dataset: &[Sample], source_id: u32, seed: u64) -> Result<LabelMask> {
    pick_target(dataset, source_id, seed).map(|s| s.mask.clone())
}
