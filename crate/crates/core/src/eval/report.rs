//! JSON, CSV and SVG output.

use std::fmt::Write as _;
use std::path::Path;

use super::ablation::AblationGrid;
use super::campaign::{Aggregates, EvalReport};
use crate::error::Result;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// One row per record, then aggregate rows whose first field starts with `#`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        w.write_record([
            "image",
            "target_index",
            "x",
            "y",
            "w",
            "h",
            "baseline_tp",
            "attacked",
            "success",
            "queries",
            "best_fitness",
        ])?;
        for r in &self.records {
            w.write_record([
                r.image.clone(),
                r.target_index.to_string(),
                r.target.x.to_string(),
                r.target.y.to_string(),
                r.target.w.to_string(),
                r.target.h.to_string(),
                r.baseline_tp.to_string(),
                r.attacked.to_string(),
                r.success.to_string(),
                r.queries.to_string(),
                opt(r.best_fitness),
            ])?;
        }
        let a: &Aggregates = &self.aggregates;
        for (k, v) in [
            ("# n_records", a.n_records.to_string()),
            ("# n_true_positive", a.n_true_positive.to_string()),
            ("# n_success", a.n_success.to_string()),
            ("# asr", opt(a.asr)),
            ("# ap_clean", opt(a.ap_clean)),
            ("# ap", opt(a.ap)),
            ("# mean_queries", a.mean_queries.to_string()),
        ] {
            w.write_record([k.to_owned(), v])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

const CELL: f64 = 64.0;
const MARGIN: f64 = 70.0;

fn shade(v: f64) -> String {
    // white → dark red as the value grows
    let v = v.clamp(0.0, 1.0);
    let g = (255.0 * (1.0 - v)).round() as u8;
    format!("rgb(255,{g},{g})")
}

impl AblationGrid {
    /// Heat map of ASR over block count (rows) and length (columns). With a
    /// pixel-value axis only the first value is shown.
    pub fn heatmap_svg(&self) -> String {
        let ks = &self.spec.ks;
        let ls = &self.spec.lengths;
        let c0 = self.spec.pixel_values.as_ref().and_then(|v| v.first().copied());
        let w = MARGIN + CELL * ls.len() as f64 + 10.0;
        let h = MARGIN + CELL * ks.len() as f64 + 10.0;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle">ASR by k and L</text>"#, w / 2.0);
        for (j, l) in ls.iter().enumerate() {
            let x = MARGIN + CELL * (j as f64 + 0.5);
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">L={:.0}%</text>"#, MARGIN - 8.0, l * 100.0);
        }
        for (i, k) in ks.iter().enumerate() {
            let y = MARGIN + CELL * i as f64;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">k={k}</text>"#, MARGIN - 8.0, y + CELL / 2.0 + 4.0);
            for (j, l) in ls.iter().enumerate() {
                let x = MARGIN + CELL * j as f64;
                let asr = self.cell(*k, *l, c0).and_then(|c| c.aggregates.as_ref()).and_then(|a| a.asr);
                let (fill, label) = match asr {
                    Some(v) => (shade(v), format!("{:.1}", v * 100.0)),
                    None => ("rgb(200,200,200)".to_owned(), "n/a".to_owned()),
                };
                let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="black"/>"#);
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#, x + CELL / 2.0, y + CELL / 2.0 + 4.0);
            }
        }
        s.push_str("</svg>\n");
        s
    }

    /// ASR and AP against pixel value for the first `(k, L)` pair.
    /// `None` when the grid has no pixel-value axis.
    pub fn pixel_value_svg(&self) -> Option<String> {
        let cs = self.spec.pixel_values.as_ref()?;
        let k = *self.spec.ks.first()?;
        let l = *self.spec.lengths.first()?;
        let (w, h) = (420.0, 300.0);
        let (x0, y0, pw, ph) = (50.0, 30.0, 340.0, 220.0);
        let (cmin, cmax) = (0.0, 1.0);
        let px = |c: f64| x0 + pw * (c - cmin) / (cmax - cmin);
        let py = |v: f64| y0 + ph * (1.0 - v.clamp(0.0, 1.0));
        let series = |f: &dyn Fn(&Aggregates) -> Option<f64>| -> Vec<(f64, f64)> {
            cs.iter()
                .filter_map(|&c| {
                    let a = self.cell(k, l, Some(c))?.aggregates.as_ref()?;
                    Some((c, f(a)?))
                })
                .collect()
        };
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">Pixel value sweep (k={k}, L={:.0}%)</text>"#, w / 2.0, l * 100.0);
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for &c in cs {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{c}</text>"#, px(c), y0 + ph + 16.0);
        }
        for (name, color, pts) in [
            ("ASR", "firebrick", series(&|a| a.asr)),
            ("AP", "steelblue", series(&|a| a.ap)),
        ] {
            let path: Vec<String> = pts.iter().map(|(c, v)| format!("{:.2},{:.2}", px(*c), py(*v))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"><title>{name}</title></polyline>"#, path.join(" "));
            for (c, v) in &pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(*c), py(*v));
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="firebrick">ASR</text><text x="{}" y="{}" fill="steelblue">AP</text>"#, x0 + 8.0, y0 + 14.0, x0 + 48.0, y0 + 14.0);
        s.push_str("</svg>\n");
        Some(s)
    }
}
