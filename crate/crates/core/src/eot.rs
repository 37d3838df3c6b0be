//! Expectation over transformation: random parameter jitter, brightness
//! scaling and box-filter down/up-sampling applied around compositing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::patch::{Genome, MaskBox};
use crate::raster::{composite, GrayImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EotConfig {
    /// Transform draws averaged per fitness evaluation.
    pub n_samples: usize,
    /// Multiplicative brightness factor interval.
    pub brightness_range: [f64; 2],
    /// Down-sampling scale interval; 1.0 leaves the image untouched.
    pub downsample_range: [f64; 2],
    /// Maximum absolute anchor shift in pixels, per axis.
    pub translate_px: f64,
    /// Maximum absolute pixel-value perturbation of every block.
    pub value_jitter: f64,
    pub seed: u64,
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            n_samples: 4,
            brightness_range: [0.9, 1.1],
            downsample_range: [0.5, 1.0],
            translate_px: 2.0,
            value_jitter: 0.05,
            seed: 0,
        }
    }
}

impl EotConfig {
    /// A single draw of the identity transform.
    pub fn identity() -> Self {
        Self {
            n_samples: 1,
            brightness_range: [1.0, 1.0],
            downsample_range: [1.0, 1.0],
            translate_px: 0.0,
            value_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(invalid("EOT n_samples must be at least 1"));
        }
        let [b0, b1] = self.brightness_range;
        if !(0.0 <= b0 && b0 <= b1 && b1.is_finite()) {
            return Err(invalid(format!("brightness range {:?} is invalid", self.brightness_range)));
        }
        let [d0, d1] = self.downsample_range;
        if !(0.0 < d0 && d0 <= d1 && d1 <= 1.0) {
            return Err(invalid(format!("downsample range {:?} must lie in (0, 1]", self.downsample_range)));
        }
        if !(self.translate_px >= 0.0 && self.translate_px.is_finite()) {
            return Err(invalid("translate_px must be non-negative"));
        }
        if !(self.value_jitter >= 0.0 && self.value_jitter <= 1.0) {
            return Err(invalid("value_jitter must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One concrete draw from the transform distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformInstance {
    pub brightness_factor: f64,
    pub downsample_factor: f64,
    pub dx: f64,
    pub dy: f64,
    pub dvalue: f64,
}

impl TransformInstance {
    pub const IDENTITY: Self = Self { brightness_factor: 1.0, downsample_factor: 1.0, dx: 0.0, dy: 0.0, dvalue: 0.0 };
}

#[inline]
fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Independent uniform draws for every field.
pub fn sample<R: Rng + ?Sized>(config: &EotConfig, rng: &mut R) -> TransformInstance {
    let brightness_factor = uniform(rng, config.brightness_range[0], config.brightness_range[1]);
    let downsample_factor = uniform(rng, config.downsample_range[0], config.downsample_range[1]);
    let dx = uniform(rng, -config.translate_px, config.translate_px);
    let dy = uniform(rng, -config.translate_px, config.translate_px);
    let dvalue = uniform(rng, -config.value_jitter, config.value_jitter);
    TransformInstance { brightness_factor, downsample_factor, dx, dy, dvalue }
}

/// Shifts anchors by `(dx, dy)` pixels and pixel values by `dvalue`, clamped to
/// the genome's bounds.
pub fn jitter_genome(t: &TransformInstance, genome: &Genome, mask: &MaskBox) -> Genome {
    let mut out = genome.clone();
    let clamp = |v: f64, d: usize| v.clamp(genome.bounds_lo[d], genome.bounds_hi[d]);
    for (i, b) in out.blocks.iter_mut().enumerate() {
        let base = i * crate::patch::GENES_PER_BLOCK;
        b.anchor_u = clamp(b.anchor_u + t.dx / mask.w as f64, base + crate::patch::ANCHOR_U_GENE);
        b.anchor_v = clamp(b.anchor_v + t.dy / mask.h as f64, base + crate::patch::ANCHOR_V_GENE);
        b.pixel_value = clamp(b.pixel_value + t.dvalue, base + crate::patch::PIXEL_VALUE_GENE);
    }
    out
}

/// Jitter, composite, scale brightness, then down/up-sample, in that order.
pub fn apply(t: &TransformInstance, x: &GrayImage, genome: &Genome, mask: &MaskBox) -> GrayImage {
    let jittered = jitter_genome(t, genome, mask);
    let mut img = composite(x, &jittered, mask);
    if t.brightness_factor != 1.0 {
        for v in img.data_mut() {
            *v = (*v * t.brightness_factor).clamp(0.0, 1.0);
        }
    }
    resample(&img, t.downsample_factor)
}

/// Area-weighted source taps for one axis: output cell `i` of `n_out` spans
/// `[i·n_in/n_out, (i+1)·n_in/n_out)` in source coordinates.
fn box_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let a = i as f64 * scale;
            let b = ((i + 1) as f64 * scale).min(n_in as f64);
            let span = b - a;
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|j| {
                    let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / span))
                })
                .collect()
        })
        .collect()
}

/// Box-filter down-sampling by `factor` followed by nearest-neighbour
/// up-sampling back to the original size.
pub fn resample(img: &GrayImage, factor: f64) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ow = ((w as f64 * factor).round() as usize).clamp(1, w.max(1));
    let oh = ((h as f64 * factor).round() as usize).clamp(1, h.max(1));
    if ow == w && oh == h {
        return img.clone();
    }
    let src = img.data();
    let htaps = box_taps(w, ow);
    let vtaps = box_taps(h, oh);

    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for (i, taps) in htaps.iter().enumerate() {
            tmp[y * ow + i] = taps.iter().map(|&(j, wt)| wt * src[y * w + j]).sum();
        }
    }
    let mut small = vec![0.0; ow * oh];
    for (r, taps) in vtaps.iter().enumerate() {
        for i in 0..ow {
            small[r * ow + i] = taps.iter().map(|&(j, wt)| wt * tmp[j * ow + i]).sum();
        }
    }

    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * oh as f64 / h as f64) as usize).min(oh - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * ow as f64 / w as f64) as usize).min(ow - 1);
            data.push(small[sy * ow + sx].clamp(0.0, 1.0));
        }
    }
    GrayImage::new(img.width(), img.height(), data).expect("resample preserves dims and range")
}
