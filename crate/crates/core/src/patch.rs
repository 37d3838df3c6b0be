//! Infrared block parameterization, genome encoding and rotated-rectangle geometry.
//!
//! A block is anchored at its top-left corner `P`, given relative to the mask box
//! (`anchor_u`, `anchor_v` in `[0, 1]`). Its long side has length
//! `rel_length * mask.w` pixels and makes angle `angle_deg` with the downward image
//! vertical, measured clockwise. The short side follows from the hot/cold width
//! rule in [`width_for`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Genes per block, in order `(anchor_u, anchor_v, pixel_value, rel_length, angle_deg)`.
pub const GENES_PER_BLOCK: usize = 5;
pub const ANCHOR_U_GENE: usize = 0;
pub const ANCHOR_V_GENE: usize = 1;
pub const PIXEL_VALUE_GENE: usize = 2;
pub const REL_LENGTH_GENE: usize = 3;
pub const ANGLE_GENE: usize = 4;

/// Default upper bound on `rel_length`.
pub const DEFAULT_L_MAX: f64 = 0.30;

/// Ratio of block width to block length for hot blocks (`C >= 0.5`).
pub const HOT_WIDTH_RATIO: f64 = 0.74;
/// Ratio of block width to block length for cold blocks (`C < 0.5`).
pub const COLD_WIDTH_RATIO: f64 = 0.45;
/// Pixel value at and above which a block is treated as hot.
pub const HOT_THRESHOLD: f64 = 0.5;

pub const HOT_PIXEL_VALUE: f64 = 0.9;
pub const COLD_PIXEL_VALUE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub anchor_u: f64,
    pub anchor_v: f64,
    pub pixel_value: f64,
    pub rel_length: f64,
    pub angle_deg: f64,
}

impl Block {
    pub fn new(anchor_u: f64, anchor_v: f64, pixel_value: f64, rel_length: f64, angle_deg: f64) -> Self {
        Self { anchor_u, anchor_v, pixel_value, rel_length, angle_deg }
    }

    pub fn genes(&self) -> [f64; GENES_PER_BLOCK] {
        [self.anchor_u, self.anchor_v, self.pixel_value, self.rel_length, self.angle_deg]
    }

    pub fn from_genes(g: &[f64]) -> Self {
        Self::new(g[0], g[1], g[2], g[3], g[4])
    }

    /// Checks every field against its domain. A `rel_length` of zero is accepted
    /// and denotes a degenerate block that covers nothing.
    pub fn validate(&self, l_max: f64) -> Result<()> {
        let checks = [
            ("anchor_u", self.anchor_u, 0.0, 1.0),
            ("anchor_v", self.anchor_v, 0.0, 1.0),
            ("pixel_value", self.pixel_value, 0.0, 1.0),
            ("rel_length", self.rel_length, 0.0, l_max),
            ("angle_deg", self.angle_deg, 0.0, 180.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(invalid(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Pedestrian region that constrains block placement, in integer pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl MaskBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(invalid(format!("mask box {self:?} has zero extent")));
        }
        if self.x as u64 + self.w as u64 > width as u64 || self.y as u64 + self.h as u64 > height as u64 {
            return Err(invalid(format!("mask box {self:?} exceeds image {width}x{height}")));
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    #[inline]
    pub fn contains_pixel(&self, px: u32, py: u32) -> bool {
        px >= self.x && py >= self.y && px - self.x < self.w && py - self.y < self.h
    }

    /// Corner form `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.x as f64,
            self.y as f64,
            (self.x + self.w) as f64,
            (self.y + self.h) as f64,
        ]
    }
}

impl std::str::FromStr for MaskBox {
    type Err = crate::Error;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid(format!("bad mask box {s:?}: {e}")))?;
        match parts[..] {
            [x, y, w, h] => Ok(Self::new(x, y, w, h)),
            _ => Err(invalid(format!("mask box {s:?} must be x,y,w,h"))),
        }
    }
}

/// Four corners in `(x = column, y = row)` pixel coordinates, ordered
/// `[P, P + l·u, P + l·u + w·v, P + w·v]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotRect {
    pub corners: [[f64; 2]; 4],
}

impl RotRect {
    /// Lengths of the sides `c0→c1, c1→c2, c2→c3, c3→c0`.
    pub fn side_lengths(&self) -> [f64; 4] {
        let c = &self.corners;
        std::array::from_fn(|i| {
            let a = c[i];
            let b = c[(i + 1) % 4];
            (b[0] - a[0]).hypot(b[1] - a[1])
        })
    }
}

/// Block width in pixels for a block of long-side length `length_px`.
pub fn width_for(pixel_value: f64, length_px: f64) -> Result<f64> {
    if !(length_px > 0.0) || !length_px.is_finite() {
        return Err(invalid(format!("block length must be positive, got {length_px}")));
    }
    if !(0.0..=1.0).contains(&pixel_value) {
        return Err(invalid(format!("pixel value {pixel_value} outside [0, 1]")));
    }
    let ratio = if pixel_value >= HOT_THRESHOLD { HOT_WIDTH_RATIO } else { COLD_WIDTH_RATIO };
    Ok(ratio * length_px)
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(angle_deg: f64) -> (f64, f64) {
    let quarter = angle_deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        angle_deg.to_radians().sin_cos()
    }
}

/// Rotated rectangle of `block` placed inside `mask`.
///
/// A block with `rel_length == 0` collapses to its anchor point.
pub fn block_to_rect(block: &Block, mask: &MaskBox) -> RotRect {
    let px = mask.x as f64 + block.anchor_u * mask.w as f64;
    let py = mask.y as f64 + block.anchor_v * mask.h as f64;
    let length = block.rel_length * mask.w as f64;
    let width = width_for(block.pixel_value, length).unwrap_or(0.0);
    rect_from_anchor([px, py], length, width, block.angle_deg)
}

/// Rectangle from an anchor corner, side lengths and angle.
pub fn rect_from_anchor(anchor: [f64; 2], length: f64, width: f64, angle_deg: f64) -> RotRect {
    let (s, c) = sin_cos_deg(angle_deg);
    // long side runs along (sin a, cos a); y grows downward
    let u = [s, c];
    let v = [c, -s];
    let [px, py] = anchor;
    let p1 = [px + length * u[0], py + length * u[1]];
    let p2 = [p1[0] + width * v[0], p1[1] + width * v[1]];
    let p3 = [px + width * v[0], py + width * v[1]];
    RotRect { corners: [anchor, p1, p2, p3] }
}

/// How the pixel-value gene is constrained to a discrete set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantization {
    /// Continuous pixel values.
    None,
    /// Multiples of 0.1.
    Grid01,
    /// Only the hot (0.9) and cold (0.1) values.
    #[default]
    Physical,
}

impl std::str::FromStr for Quantization {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "grid01" => Ok(Self::Grid01),
            "physical" => Ok(Self::Physical),
            _ => Err(invalid(format!("unknown quantization {s:?}; expected none, grid01 or physical"))),
        }
    }
}

impl Quantization {
    /// Allowed values inside `[lo, hi]`, ascending. `None` for the continuous mode.
    fn grid_within(self, lo: f64, hi: f64) -> Option<Vec<f64>> {
        let all: Vec<f64> = match self {
            Quantization::None => return None,
            Quantization::Grid01 => (0..=10).map(|n| n as f64 / 10.0).collect(),
            Quantization::Physical => vec![COLD_PIXEL_VALUE, HOT_PIXEL_VALUE],
        };
        Some(all.into_iter().filter(|v| (lo..=hi).contains(v)).collect())
    }

    /// Snaps `c` to the nearest allowed value inside `[lo, hi]`, ties toward the
    /// larger value. Errors when no allowed value lies inside the interval.
    pub fn snap_within(self, c: f64, lo: f64, hi: f64) -> Result<f64> {
        let Some(grid) = self.grid_within(lo, hi) else {
            return Ok(c);
        };
        let mut best: Option<f64> = None;
        for g in grid {
            best = match best {
                Some(b) if (c - b).abs() < (c - g).abs() => Some(b),
                _ => Some(g),
            };
        }
        best.ok_or_else(|| invalid(format!("no {self:?} pixel value inside [{lo}, {hi}]")))
    }
}

/// Snaps an intensity to the discrete set of `mode`.
///
/// `Grid01` rounds to the nearest multiple of 0.1 with ties rounding up;
/// `Physical` picks the nearer of 0.1 and 0.9, with 0.5 going to 0.9.
pub fn quantize_pixel_value(c: f64, mode: Quantization) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) {
        return Err(invalid(format!("pixel value {c} outside [0, 1]")));
    }
    Ok(match mode {
        Quantization::None => c,
        // the epsilon absorbs representation error on decimal ties like 0.55
        Quantization::Grid01 => (c * 10.0 + 0.5 + 1e-9).floor() / 10.0,
        Quantization::Physical => {
            if c >= HOT_THRESHOLD {
                HOT_PIXEL_VALUE
            } else {
                COLD_PIXEL_VALUE
            }
        }
    })
}

/// `k` blocks together with per-gene bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Genome {
    pub blocks: Vec<Block>,
    pub bounds_lo: Vec<f64>,
    pub bounds_hi: Vec<f64>,
}

impl Genome {
    /// A genome with no blocks.
    pub fn empty() -> Self {
        Self { blocks: Vec::new(), bounds_lo: Vec::new(), bounds_hi: Vec::new() }
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn to_document(&self) -> GenomeDocument {
        GenomeDocument {
            k: self.k(),
            bounds: BoundsDocument { lo: self.bounds_lo.clone(), hi: self.bounds_hi.clone() },
            genes: encode(self),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GenomeDocument = serde_json::from_str(s)?;
        doc.into_genome()
    }
}

/// Flattens a genome into `5k` genes.
pub fn encode(genome: &Genome) -> Vec<f64> {
    genome.blocks.iter().flat_map(|b| b.genes()).collect()
}

/// Rebuilds a genome from a flat gene vector, checking lengths and bounds.
pub fn decode(genes: &[f64], bounds_lo: &[f64], bounds_hi: &[f64], k: usize) -> Result<Genome> {
    let dim = GENES_PER_BLOCK * k;
    if genes.len() != dim {
        return Err(invalid(format!("gene vector has length {}, expected {dim} for k = {k}", genes.len())));
    }
    if bounds_lo.len() != dim || bounds_hi.len() != dim {
        return Err(invalid(format!(
            "bounds have lengths {}/{}, expected {dim}",
            bounds_lo.len(),
            bounds_hi.len()
        )));
    }
    for d in 0..dim {
        if !(bounds_lo[d] <= genes[d] && genes[d] <= bounds_hi[d]) {
            return Err(invalid(format!(
                "gene {d} = {} outside [{}, {}]",
                genes[d], bounds_lo[d], bounds_hi[d]
            )));
        }
    }
    Ok(Genome {
        blocks: genes.chunks_exact(GENES_PER_BLOCK).map(Block::from_genes).collect(),
        bounds_lo: bounds_lo.to_vec(),
        bounds_hi: bounds_hi.to_vec(),
    })
}

/// On-disk genome form. Floats are written in shortest round-trip form, so a
/// write/read cycle is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenomeDocument {
    pub k: usize,
    pub bounds: BoundsDocument,
    pub genes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsDocument {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl GenomeDocument {
    pub fn into_genome(self) -> Result<Genome> {
        decode(&self.genes, &self.bounds.lo, &self.bounds.hi, self.k)
    }
}

/// Closed interval for one block parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }
}

/// Per-parameter bounds shared by every block of a genome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockBounds {
    pub anchor_u: Range,
    pub anchor_v: Range,
    pub pixel_value: Range,
    pub rel_length: Range,
    pub angle_deg: Range,
}

impl Default for BlockBounds {
    fn default() -> Self {
        Self {
            anchor_u: Range::new(0.0, 1.0),
            anchor_v: Range::new(0.0, 1.0),
            pixel_value: Range::new(0.0, 1.0),
            rel_length: Range::fixed(0.12),
            angle_deg: Range::new(0.0, 180.0),
        }
    }
}

impl BlockBounds {
    fn ranges(&self) -> [Range; GENES_PER_BLOCK] {
        [self.anchor_u, self.anchor_v, self.pixel_value, self.rel_length, self.angle_deg]
    }
}

/// Search space for the optimizer: block count, flat bounds and pixel-value quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenomeTemplate {
    pub k: usize,
    pub bounds_lo: Vec<f64>,
    pub bounds_hi: Vec<f64>,
    pub quantization: Quantization,
}

impl GenomeTemplate {
    pub fn new(k: usize, bounds: BlockBounds, quantization: Quantization) -> Result<Self> {
        Self::with_l_max(k, bounds, quantization, DEFAULT_L_MAX)
    }

    pub fn with_l_max(k: usize, bounds: BlockBounds, quantization: Quantization, l_max: f64) -> Result<Self> {
        let ranges = bounds.ranges();
        let lo: Vec<f64> = (0..k).flat_map(|_| ranges.map(|r| r.lo)).collect();
        let hi: Vec<f64> = (0..k).flat_map(|_| ranges.map(|r| r.hi)).collect();
        let template = Self { k, bounds_lo: lo, bounds_hi: hi, quantization };
        template.validate(l_max)?;
        Ok(template)
    }

    /// Checks `lo <= hi`, that bounds stay inside the block parameter domains and
    /// that every pixel-value interval holds at least one quantized value.
    pub fn validate(&self, l_max: f64) -> Result<()> {
        let dim = self.dim();
        if self.bounds_lo.len() != dim || self.bounds_hi.len() != dim {
            return Err(invalid("template bounds length does not match 5k"));
        }
        for d in 0..dim {
            let (lo, hi) = (self.bounds_lo[d], self.bounds_hi[d]);
            if !(lo <= hi) {
                return Err(invalid(format!("gene {d}: lower bound {lo} exceeds upper bound {hi}")));
            }
        }
        for b in 0..self.k {
            let lo = Block::from_genes(&self.bounds_lo[b * GENES_PER_BLOCK..]);
            let hi = Block::from_genes(&self.bounds_hi[b * GENES_PER_BLOCK..]);
            lo.validate(l_max)?;
            hi.validate(l_max)?;
            let d = b * GENES_PER_BLOCK + PIXEL_VALUE_GENE;
            self.quantization.snap_within(self.bounds_lo[d], self.bounds_lo[d], self.bounds_hi[d])?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        GENES_PER_BLOCK * self.k
    }

    /// True when every interval is a single point.
    pub fn is_point(&self) -> bool {
        self.bounds_lo.iter().zip(&self.bounds_hi).all(|(lo, hi)| lo == hi)
    }

    pub fn is_pixel_value_gene(d: usize) -> bool {
        d % GENES_PER_BLOCK == PIXEL_VALUE_GENE
    }

    /// Applies pixel-value quantization in place.
    pub fn snap(&self, genes: &mut [f64]) {
        if self.quantization == Quantization::None {
            return;
        }
        for d in (PIXEL_VALUE_GENE..genes.len()).step_by(GENES_PER_BLOCK) {
            // validate() guarantees a grid value inside the interval
            if let Ok(v) = self.quantization.snap_within(genes[d], self.bounds_lo[d], self.bounds_hi[d]) {
                genes[d] = v;
            }
        }
    }

    pub fn contains(&self, genes: &[f64]) -> bool {
        genes.len() == self.dim()
            && genes
                .iter()
                .zip(self.bounds_lo.iter().zip(&self.bounds_hi))
                .all(|(g, (lo, hi))| lo <= g && g <= hi)
    }

    pub fn decode(&self, genes: &[f64]) -> Result<Genome> {
        decode(genes, &self.bounds_lo, &self.bounds_hi, self.k)
    }
}
