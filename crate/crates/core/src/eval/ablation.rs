//! Grids of campaigns over block count, block length and pixel value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::campaign::{run_campaign, Aggregates, CampaignConfig};
use super::manifest::DatasetManifest;
use crate::error::{invalid, Result};
use crate::oracle::OracleProvider;
use crate::patch::{BlockBounds, GenomeTemplate, Quantization, Range};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub ks: Vec<usize>,
    pub lengths: Vec<f64>,
    /// When set, every cell fixes the pixel value at each listed value.
    #[serde(default)]
    pub pixel_values: Option<Vec<f64>>,
    /// Bounds for the parameters the grid does not fix.
    #[serde(default)]
    pub bounds: BlockBounds,
    #[serde(default)]
    pub quantization: Quantization,
}

impl AblationSpec {
    /// Block counts 4..=10 against lengths 6%..16%.
    pub fn block_grid() -> Self {
        Self {
            ks: (4..=10).collect(),
            lengths: vec![0.06, 0.08, 0.10, 0.12, 0.14, 0.16],
            pixel_values: None,
            bounds: BlockBounds::default(),
            quantization: Quantization::Physical,
        }
    }

    /// Pixel values 0.1..0.9 in steps of 0.2 at fixed `k` and length.
    pub fn pixel_value_sweep(k: usize, length: f64) -> Self {
        Self {
            ks: vec![k],
            lengths: vec![length],
            pixel_values: Some(vec![0.1, 0.3, 0.5, 0.7, 0.9]),
            bounds: BlockBounds::default(),
            quantization: Quantization::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.lengths.is_empty() {
            return Err(invalid("ablation grid needs at least one k and one length"));
        }
        if self.pixel_values.as_ref().is_some_and(Vec::is_empty) {
            return Err(invalid("ablation pixel-value axis is empty"));
        }
        Ok(())
    }

    /// `(k, length, pixel value)` for every cell, in row-major order.
    pub fn cells(&self) -> Vec<(usize, f64, Option<f64>)> {
        let cs: Vec<Option<f64>> = match &self.pixel_values {
            Some(v) => v.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let mut out = Vec::new();
        for &k in &self.ks {
            for &l in &self.lengths {
                for &c in &cs {
                    out.push((k, l, c));
                }
            }
        }
        out
    }

    pub fn template_for(&self, k: usize, length: f64, pixel_value: Option<f64>) -> Result<GenomeTemplate> {
        let mut bounds = self.bounds;
        bounds.rel_length = Range::fixed(length);
        let quantization = match pixel_value {
            Some(c) => {
                bounds.pixel_value = Range::fixed(c);
                Quantization::None
            }
            None => self.quantization,
        };
        GenomeTemplate::new(k, bounds, quantization)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub k: usize,
    pub length: f64,
    pub pixel_value: Option<f64>,
    pub aggregates: Option<Aggregates>,
    /// Set when the campaign for this cell failed.
    pub error: Option<String>,
}

impl AblationCell {
    fn file_name(&self) -> String {
        match self.pixel_value {
            Some(c) => format!("cell_k{}_L{}_C{}.json", self.k, self.length, c),
            None => format!("cell_k{}_L{}.json", self.k, self.length),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub spec: AblationSpec,
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, k: usize, length: f64, pixel_value: Option<f64>) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.k == k && c.length == length && c.pixel_value == pixel_value)
    }
}

/// Runs one campaign per grid cell. With `checkpoint_dir`, finished cells are
/// stored there and reused on the next call.
pub fn run_ablation(
    manifest: &DatasetManifest,
    provider: &OracleProvider,
    spec: &AblationSpec,
    base: &CampaignConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<AblationGrid> {
    spec.validate()?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut cells = Vec::new();
    for (k, length, pixel_value) in spec.cells() {
        let mut cell = AblationCell { k, length, pixel_value, aggregates: None, error: None };
        let ckpt = checkpoint_dir.map(|d| d.join(cell.file_name()));
        if let Some(p) = ckpt.as_ref().filter(|p| p.exists()) {
            if let Ok(done) = serde_json::from_str::<AblationCell>(&std::fs::read_to_string(p)?) {
                if done.error.is_none() {
                    cells.push(done);
                    continue;
                }
            }
        }
        let cfg = CampaignConfig { template: spec.template_for(k, length, pixel_value)?, ..base.clone() };
        match run_campaign(manifest, provider, &cfg, None) {
            Ok(report) => cell.aggregates = Some(report.aggregates),
            Err(failure) => {
                log::warn!("ablation cell k={k} L={length} C={pixel_value:?} failed: {}", failure.error);
                cell.error = Some(failure.error.to_string());
            }
        }
        if let Some(p) = &ckpt {
            std::fs::write(p, serde_json::to_string_pretty(&cell)?)?;
        }
        cells.push(cell);
    }
    Ok(AblationGrid { spec: spec.clone(), cells })
}
