//! Pixel-center rasterization of rotated rectangles and overwrite compositing.

use std::path::Path;

use crate::error::{invalid, Result};
use crate::patch::{block_to_rect, Genome, MaskBox, RotRect};

/// Single-channel image, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(invalid(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self { width, height, data: vec![value.clamp(0.0, 1.0); width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v.clamp(0.0, 1.0);
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// 8-bit encoding, `round(v * 255)` with halves rounding up.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| intensity_to_byte(v)).collect()
    }

    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width as usize * height as usize {
            return Err(invalid(format!(
                "pixel buffer has {} bytes, expected {}x{}",
                bytes.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data: bytes.iter().map(|&b| byte_to_intensity(b)).collect() })
    }

    /// The image as it would read back after an 8-bit round trip.
    pub fn quantized_8bit(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| byte_to_intensity(intensity_to_byte(v))).collect(),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = img.dimensions();
        Self::from_bytes(w, h, img.as_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width, self.height, self.to_bytes())
            .ok_or_else(|| invalid("image buffer size mismatch"))?;
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

#[inline]
pub fn intensity_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

#[inline]
pub fn byte_to_intensity(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Pixels whose centers fall inside a rectangle and inside the mask box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl CoverageMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn union_with(&mut self, other: &CoverageMask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    /// Covered pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }
}

/// Half-open containment test in the rectangle's own frame: a point is inside
/// when its projection on each side from the anchor corner lies in `[0, 1)` of the
/// side vector. Degenerate rectangles contain nothing.
struct RectFrame {
    origin: [f64; 2],
    e1: [f64; 2],
    e2: [f64; 2],
    n1: f64,
    n2: f64,
}

impl RectFrame {
    fn new(rect: &RotRect) -> Option<Self> {
        let [c0, c1, _, c3] = rect.corners;
        let e1 = [c1[0] - c0[0], c1[1] - c0[1]];
        let e2 = [c3[0] - c0[0], c3[1] - c0[1]];
        let n1 = e1[0] * e1[0] + e1[1] * e1[1];
        let n2 = e2[0] * e2[0] + e2[1] * e2[1];
        (n1 > 0.0 && n2 > 0.0).then_some(Self { origin: c0, e1, e2, n1, n2 })
    }

    #[inline]
    fn contains(&self, qx: f64, qy: f64) -> bool {
        let dx = qx - self.origin[0];
        let dy = qy - self.origin[1];
        let s = dx * self.e1[0] + dy * self.e1[1];
        let t = dx * self.e2[0] + dy * self.e2[1];
        s >= 0.0 && s < self.n1 && t >= 0.0 && t < self.n2
    }
}

/// Coverage of `rect` clipped to `mask` on an image of `dims = (width, height)`.
pub fn rasterize(rect: &RotRect, mask: &MaskBox, dims: (u32, u32)) -> CoverageMask {
    let (width, height) = dims;
    let mut out = CoverageMask::empty(width, height);
    let Some(frame) = RectFrame::new(rect) else {
        return out;
    };

    // candidate pixels: rectangle bounding box ∩ mask ∩ image
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in &rect.corners {
        min_x = min_x.min(c[0]);
        min_y = min_y.min(c[1]);
        max_x = max_x.max(c[0]);
        max_y = max_y.max(c[1]);
    }
    let x_lo = ((min_x - 0.5).floor().max(mask.x as f64)) as i64;
    let y_lo = ((min_y - 0.5).floor().max(mask.y as f64)) as i64;
    let x_hi = ((max_x - 0.5).ceil() as i64).min((mask.x + mask.w) as i64 - 1).min(width as i64 - 1);
    let y_hi = ((max_y - 0.5).ceil() as i64).min((mask.y + mask.h) as i64 - 1).min(height as i64 - 1);

    for y in y_lo.max(0)..=y_hi {
        let row = y as usize * width as usize;
        for x in x_lo.max(0)..=x_hi {
            if frame.contains(x as f64 + 0.5, y as f64 + 0.5) {
                out.bits[row + x as usize] = true;
            }
        }
    }
    out
}

/// Union of the clipped coverage of every block in `genome`.
pub fn genome_coverage(genome: &Genome, mask: &MaskBox, dims: (u32, u32)) -> CoverageMask {
    let mut acc = CoverageMask::empty(dims.0, dims.1);
    for b in &genome.blocks {
        acc.union_with(&rasterize(&block_to_rect(b, mask), mask, dims));
    }
    acc
}

/// Paints the blocks of `genome` onto a copy of `x`. Later blocks overwrite
/// earlier ones; uncovered pixels keep their input value.
pub fn composite(x: &GrayImage, genome: &Genome, mask: &MaskBox) -> GrayImage {
    let mut out = x.clone();
    let dims = x.dims();
    let w = dims.0 as usize;
    for b in &genome.blocks {
        let cov = rasterize(&block_to_rect(b, mask), mask, dims);
        let value = b.pixel_value.clamp(0.0, 1.0);
        for (px, py) in cov.pixels() {
            out.data[py as usize * w + px as usize] = value;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{rect_from_anchor, Block};
    use proptest::prelude::*;

    /// Brute-force reference: every pixel center against the four edge half-planes.
    /// The two edges at the anchor corner are inclusive, the far edges exclusive.
    fn brute_coverage(rect: &RotRect, mask: &MaskBox, w: u32, h: u32) -> Vec<bool> {
        let c = rect.corners;
        let cross = |a: [f64; 2], b: [f64; 2], q: [f64; 2]| (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
        let orient = cross(c[0], c[1], c[2]);
        let mut out = vec![false; (w * h) as usize];
        if orient == 0.0 {
            return out;
        }
        let sign = orient.signum();
        for y in 0..h {
            for x in 0..w {
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                let e01 = sign * cross(c[0], c[1], q) >= 0.0;
                let e12 = sign * cross(c[1], c[2], q) > 0.0;
                let e23 = sign * cross(c[2], c[3], q) > 0.0;
                let e30 = sign * cross(c[3], c[0], q) >= 0.0;
                let in_mask = x >= mask.x && x < mask.x + mask.w && y >= mask.y && y < mask.y + mask.h;
                out[(y * w + x) as usize] = e01 && e12 && e23 && e30 && in_mask;
            }
        }
        out
    }

    #[test]
    fn axis_aligned_coverage() {
        let rect = RotRect { corners: [[2.0, 2.0], [2.0, 6.0], [5.0, 6.0], [5.0, 2.0]] };
        let mask = MaskBox::new(0, 0, 8, 8);
        let cov = rasterize(&rect, &mask, (8, 8));
        let brute = brute_coverage(&rect, &mask, 8, 8);
        assert_eq!(cov.bits(), &brute[..]);
        assert_eq!(cov.count(), 12);
        for (x, y) in cov.pixels() {
            assert!((2..5).contains(&x) && (2..6).contains(&y));
        }
    }

    #[test]
    fn half_open_edges_on_pixel_centers() {
        // edges pass exactly through pixel centers at x = 2.5 and x = 4.5
        let rect = RotRect { corners: [[2.5, 2.5], [2.5, 4.5], [4.5, 4.5], [4.5, 2.5]] };
        let cov = rasterize(&rect, &MaskBox::new(0, 0, 8, 8), (8, 8));
        let got: Vec<_> = cov.pixels().collect();
        assert_eq!(got, vec![(2, 2), (3, 2), (2, 3), (3, 3)]);
    }

    #[test]
    fn outside_mask_and_degenerate_are_empty() {
        let rect = rect_from_anchor([40.0, 40.0], 10.0, 5.0, 20.0);
        assert_eq!(rasterize(&rect, &MaskBox::new(0, 0, 20, 20), (64, 64)).count(), 0);
        let flat = rect_from_anchor([10.0, 10.0], 0.0, 5.0, 20.0);
        assert_eq!(rasterize(&flat, &MaskBox::new(0, 0, 64, 64), (64, 64)).count(), 0);
        let tiny = rect_from_anchor([10.0, 10.0], 1e-9, 1e-9, 20.0);
        assert_eq!(rasterize(&tiny, &MaskBox::new(0, 0, 64, 64), (64, 64)).count(), 0);
    }

    #[test]
    fn zero_area_genome_is_identity() {
        let x = GrayImage::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let mask = MaskBox::new(0, 0, 4, 4);
        let g = Genome {
            blocks: vec![Block::new(0.2, 0.2, 0.9, 0.0, 45.0)],
            bounds_lo: vec![0.0; 5],
            bounds_hi: vec![1.0, 1.0, 1.0, 0.3, 180.0],
        };
        let out = composite(&x, &g, &mask);
        assert_eq!(out, x);
        assert_eq!(composite(&x, &Genome::empty(), &mask), x);
    }

    #[test]
    fn later_block_wins_on_overlap() {
        let x = GrayImage::filled(32, 32, 0.5);
        let mask = MaskBox::new(0, 0, 32, 32);
        let cold = Block::new(0.25, 0.25, 0.1, 0.25, 0.0);
        let hot = Block::new(0.25, 0.25, 0.9, 0.25, 0.0);
        let g = Genome { blocks: vec![cold, hot], bounds_lo: vec![0.0; 10], bounds_hi: vec![1.0; 10] };
        let out = composite(&x, &g, &mask);
        let hot_cov = rasterize(&block_to_rect(&hot, &mask), &mask, (32, 32));
        for (px, py) in hot_cov.pixels() {
            assert_eq!(out.get(px, py), 0.9);
        }
        // cold is narrower (0.45 vs 0.74), so it is fully hidden
        assert!(out.data().iter().all(|v| *v == 0.5 || *v == 0.9));
    }

    #[test]
    fn single_block_changes_exactly_covered_pixels() {
        let x = GrayImage::filled(64, 64, 0.3);
        let mask = MaskBox::new(8, 4, 40, 50);
        let b = Block::new(0.3, 0.4, 0.9, 0.25, 37.0);
        let g = Genome { blocks: vec![b], bounds_lo: vec![0.0; 5], bounds_hi: vec![1.0, 1.0, 1.0, 0.3, 180.0] };
        let out = composite(&x, &g, &mask);
        let n = brute_coverage(&block_to_rect(&b, &mask), &mask, 64, 64).iter().filter(|b| **b).count();
        assert!(n > 0);
        assert_eq!(out.data().iter().filter(|v| **v == 0.9).count(), n);
        assert_eq!(out.data().iter().filter(|v| **v == 0.3).count(), 64 * 64 - n);
    }

    #[test]
    fn byte_mapping_rounds_half_up() {
        assert_eq!(intensity_to_byte(0.0), 0);
        assert_eq!(intensity_to_byte(1.0), 255);
        assert_eq!(intensity_to_byte(0.5), 128); // 127.5 rounds up
        assert_eq!(intensity_to_byte(127.4999 / 255.0), 127);
        for b in 0..=255u8 {
            assert_eq!(intensity_to_byte(byte_to_intensity(b)), b);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = GrayImage::from_bytes(3, 2, &[0, 10, 128, 200, 254, 255]).unwrap();
        img.save_png(&p).unwrap();
        assert_eq!(GrayImage::load_png(&p).unwrap(), img);
    }

    fn arb_rect() -> impl Strategy<Value = RotRect> {
        (-10.0..74.0f64, -10.0..74.0f64, 0.0..40.0f64, 0.0..30.0f64, 0.0..=180.0f64)
            .prop_map(|(x, y, l, w, a)| rect_from_anchor([x, y], l, w, a))
    }

    proptest! {
        #[test]
        fn rasterize_matches_brute_force(rect in arb_rect(), mx in 0u32..40, my in 0u32..40, mw in 1u32..40, mh in 1u32..40) {
            let mask = MaskBox::new(mx, my, mw.min(64 - mx), mh.min(64 - my));
            let cov = rasterize(&rect, &mask, (64, 64));
            prop_assert_eq!(cov.bits(), &brute_coverage(&rect, &mask, 64, 64)[..]);
        }

        #[test]
        fn composite_stays_in_mask(u in 0.0..=1.0f64, v in 0.0..=1.0f64, l in 0.0..=0.3f64, a in 0.0..=180.0f64, c in 0.0..=1.0f64) {
            let x = GrayImage::filled(48, 48, 0.42);
            let mask = MaskBox::new(10, 6, 20, 30);
            let g = Genome { blocks: vec![Block::new(u, v, c, l * 3.0, a)], bounds_lo: vec![0.0; 5], bounds_hi: vec![1.0; 5] };
            let out = composite(&x, &g, &mask);
            for yy in 0..48 {
                for xx in 0..48 {
                    if !mask.contains_pixel(xx, yy) {
                        prop_assert_eq!(out.get(xx, yy), 0.42);
                    }
                }
            }
            prop_assert_eq!(composite(&x, &g, &mask), out);
        }
    }
}
