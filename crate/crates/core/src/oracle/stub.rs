//! Analytic stand-in detectors with exactly computable responses.
//!
//! Both stubs hold a clean reference image and a list of registered target
//! boxes, and emit at most one person detection per target, placed exactly on
//! the target box.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Detection, Detector};
use crate::error::{invalid, Result};
use crate::patch::MaskBox;
use crate::raster::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StubKind {
    Coverage,
    Contrast,
}

impl StubKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StubKind::Coverage => "coverage",
            StubKind::Contrast => "contrast",
        }
    }
}

impl std::str::FromStr for StubKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coverage" => Ok(Self::Coverage),
            "contrast" => Ok(Self::Contrast),
            _ => Err(invalid(format!("unknown stub kind {s:?}; expected coverage or contrast"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubSpec {
    pub kind: StubKind,
    /// Sensitivity of confidence to the perturbation measure.
    pub lambda: f64,
    /// Coverage stub: a pixel counts as covered when it differs from the
    /// reference by more than this.
    pub tolerance: f64,
    /// Detections below this confidence are not emitted.
    pub emit_threshold: f64,
}

impl Default for StubSpec {
    fn default() -> Self {
        Self { kind: StubKind::Coverage, lambda: 2.0, tolerance: 0.1, emit_threshold: 0.5 }
    }
}

impl StubSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("stub lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(invalid("stub tolerance must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.emit_threshold) {
            return Err(invalid("stub emit threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn build(&self, reference: Option<GrayImage>, targets: Vec<MaskBox>) -> Result<Arc<dyn Detector>> {
        self.validate()?;
        Ok(match self.kind {
            StubKind::Coverage => Arc::new(CoverageStub::new(self.clone(), reference, targets)),
            StubKind::Contrast => {
                let reference = reference.ok_or_else(|| invalid("contrast stub needs a reference image"))?;
                Arc::new(ContrastStub::new(self.clone(), &reference, targets)?)
            }
        })
    }
}

fn check_dims(reference: &GrayImage, image: &GrayImage) -> Result<()> {
    if reference.dims() != image.dims() {
        return Err(invalid(format!(
            "image is {:?} but the stub reference is {:?}",
            image.dims(),
            reference.dims()
        )));
    }
    Ok(())
}

/// Confidence `clamp(1 − λ · covered / area, 0, 1)` per target, where a pixel is
/// covered when it differs from the reference by more than the tolerance.
/// Without a reference image the reference is all zeros.
pub struct CoverageStub {
    spec: StubSpec,
    reference: Option<GrayImage>,
    targets: Vec<MaskBox>,
}

impl CoverageStub {
    pub fn new(spec: StubSpec, reference: Option<GrayImage>, targets: Vec<MaskBox>) -> Self {
        Self { spec, reference, targets }
    }

    pub fn covered_pixels(&self, image: &GrayImage, target: &MaskBox) -> usize {
        let mut n = 0;
        for y in target.y..(target.y + target.h).min(image.height()) {
            for x in target.x..(target.x + target.w).min(image.width()) {
                let r = self.reference.as_ref().map_or(0.0, |r| r.get(x, y));
                if (image.get(x, y) - r).abs() > self.spec.tolerance {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn confidence(&self, image: &GrayImage, target: &MaskBox) -> f64 {
        let frac = self.covered_pixels(image, target) as f64 / target.area() as f64;
        (1.0 - self.spec.lambda * frac).clamp(0.0, 1.0)
    }
}

impl Detector for CoverageStub {
    fn name(&self) -> &str {
        "stub:coverage"
    }

    fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        if let Some(r) = &self.reference {
            check_dims(r, image)?;
        }
        Ok(self
            .targets
            .iter()
            .filter_map(|t| {
                let conf = self.confidence(image, t);
                (conf >= self.spec.emit_threshold).then(|| Detection::person(t.corners(), conf))
            })
            .collect())
    }
}

/// Confidence `clamp(1 − λ · (|m − m₀| + |s − s₀|), 0, 1)` per target, where
/// `(m, s)` are the mean and standard deviation of the target box and
/// `(m₀, s₀)` the same statistics on the reference image.
pub struct ContrastStub {
    spec: StubSpec,
    dims: (u32, u32),
    targets: Vec<(MaskBox, (f64, f64))>,
}

fn box_stats(image: &GrayImage, b: &MaskBox) -> (f64, f64) {
    let n = b.area() as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            let v = image.get(x, y);
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    (mean, (sq / n - mean * mean).max(0.0).sqrt())
}

impl ContrastStub {
    pub fn new(spec: StubSpec, reference: &GrayImage, targets: Vec<MaskBox>) -> Result<Self> {
        let (w, h) = reference.dims();
        for t in &targets {
            t.validate(w, h)?;
        }
        let targets = targets.into_iter().map(|t| (t, box_stats(reference, &t))).collect();
        Ok(Self { spec, dims: (w, h), targets })
    }

    pub fn confidence(&self, image: &GrayImage, target: &MaskBox, template: (f64, f64)) -> f64 {
        let (m, s) = box_stats(image, target);
        let d = (m - template.0).abs() + (s - template.1).abs();
        (1.0 - self.spec.lambda * d).clamp(0.0, 1.0)
    }
}

impl Detector for ContrastStub {
    fn name(&self) -> &str {
        "stub:contrast"
    }

    fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        if image.dims() != self.dims {
            return Err(invalid(format!("image is {:?} but the stub reference is {:?}", image.dims(), self.dims)));
        }
        Ok(self
            .targets
            .iter()
            .filter_map(|(t, tpl)| {
                let conf = self.confidence(image, t, *tpl);
                (conf >= self.spec.emit_threshold).then(|| Detection::person(t.corners(), conf))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{Block, Genome};
    use crate::raster::{composite, genome_coverage};

    fn scene() -> (GrayImage, MaskBox) {
        (GrayImage::filled(64, 64, 0.5), MaskBox::new(8, 8, 40, 40))
    }

    #[test]
    fn clean_image_detected_with_full_confidence() {
        let (img, target) = scene();
        let stub = CoverageStub::new(StubSpec::default(), Some(img.clone()), vec![target]);
        let d = stub.detect(&img).unwrap();
        assert_eq!(d, vec![Detection::person([8.0, 8.0, 48.0, 48.0], 1.0)]);
    }

    #[test]
    fn quarter_coverage_halves_confidence() {
        let img = GrayImage::filled(64, 64, 0.5);
        let target = MaskBox::new(8, 2, 20, 60);
        // at 90° the long side runs along +x over the full box width (20 px) and
        // the 0.74·20 = 14.8 px short side runs upward from row 32
        let genome = Genome {
            blocks: vec![Block::new(0.0, 0.5, 0.9, 1.0, 90.0)],
            bounds_lo: vec![0.0; 5],
            bounds_hi: [1.0, 1.0, 1.0, 1.0, 180.0].to_vec(),
        };
        let adv = composite(&img, &genome, &target);
        // brute force: centers with x+0.5 in [8, 28) and 32 − (y+0.5) in [0, 14.8)
        let brute = (0..64u32)
            .flat_map(|y| (0..64u32).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                (8.0..28.0).contains(&cx) && (0.0..14.8).contains(&(32.0 - cy))
            })
            .count();
        assert_eq!(brute, 300);
        assert_eq!(genome_coverage(&genome, &target, img.dims()).count(), brute);
        let stub = CoverageStub::new(StubSpec::default(), Some(img.clone()), vec![target]);
        assert_eq!(stub.covered_pixels(&adv, &target), 300);
        assert_eq!(stub.confidence(&adv, &target), 0.5);
        assert_eq!(stub.detect(&adv).unwrap().len(), 1);
    }

    #[test]
    fn heavy_coverage_suppresses_detection() {
        let (img, target) = scene();
        let mut adv = img.clone();
        for y in 8..28 {
            for x in 8..48 {
                adv.set(x, y, 0.1);
            }
        }
        let stub = CoverageStub::new(StubSpec::default(), Some(img), vec![target]);
        assert_eq!(stub.confidence(&adv, &target), 0.0);
        assert!(stub.detect(&adv).unwrap().is_empty());
    }

    #[test]
    fn no_reference_means_zero_background() {
        let target = MaskBox::new(0, 0, 16, 16);
        let stub = CoverageStub::new(StubSpec::default(), None, vec![target]);
        assert_eq!(stub.detect(&GrayImage::filled(32, 32, 0.0)).unwrap().len(), 1);
        assert!(stub.detect(&GrayImage::filled(32, 32, 1.0)).unwrap().is_empty());
    }

    #[test]
    fn contrast_stub_responds_to_perturbation() {
        let (img, target) = scene();
        let stub = ContrastStub::new(StubSpec { kind: StubKind::Contrast, ..StubSpec::default() }, &img, vec![target]).unwrap();
        assert_eq!(stub.detect(&img).unwrap()[0].confidence, 1.0);
        let mut adv = img.clone();
        for y in 8..48 {
            for x in 8..28 {
                adv.set(x, y, 0.9);
            }
        }
        // mean 0.7 (+0.2), std 0.2 (+0.2) → 1 − 2·0.4
        let c = stub.confidence(&adv, &target, (0.5, 0.0));
        assert!((c - 0.2).abs() < 1e-9, "{c}");
        assert!(stub.detect(&adv).unwrap().is_empty());
        assert!(stub.detect(&GrayImage::filled(10, 10, 0.5)).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(StubSpec { lambda: 0.0, ..StubSpec::default() }.validate().is_err());
        assert!(StubSpec { kind: StubKind::Contrast, ..StubSpec::default() }.build(None, vec![]).is_err());
    }
}
