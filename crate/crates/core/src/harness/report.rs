use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::model::Model;
use crate::condition::ConditionCell;
use crate::error::{invalid, Result};
use crate::fusion::{FusionKind, Modality, NUM_MODALITIES};
use crate::scenes::Scene;
use crate::tensor::{read_checkpoint, write_checkpoint};

/// Mean CAA weights in percent, one row per weather × time cell present in the split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaaWeightTable {
    pub rows: Vec<(String, [f64; NUM_MODALITIES])>,
}

pub fn report_caa_weights(model: &Model, scenes: &[Scene]) -> Result<CaaWeightTable> {
    if model.cfg.fusion_kind != FusionKind::Caa {
        return Err(invalid(
            "report_caa_weights",
            format!("model uses {} fusion, not caa", model.cfg.fusion_kind.name()),
        ));
    }
    let eval = evaluate(model, scenes, false)?;
    let weights = eval
        .mean_weights
        .ok_or_else(|| invalid("report_caa_weights", "no fusion weights produced"))?;
    let rows = ConditionCell::all()
        .into_iter()
        .filter_map(|c| weights.get(&c.label()).map(|w| (c.label(), w.map(|v| 100.0 * v))))
        .collect();
    Ok(CaaWeightTable { rows })
}

const COLORS: [&str; NUM_MODALITIES] = ["#4e79a7", "#59a14f", "#e15759", "#f28e2b"];

impl CaaWeightTable {
    pub fn get(&self, label: &str) -> Option<[f64; NUM_MODALITIES]> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, w)| *w)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["cell".to_string()];
        header.extend(Modality::ALL.iter().map(|m| m.name().to_string()));
        w.write_record(header)?;
        for (label, vals) in &self.rows {
            let mut line = vec![label.clone()];
            line.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(line)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Stacked horizontal bars, one row per cell, one segment per modality.
    pub fn to_svg(&self) -> String {
        let (label_w, bar_w, row_h, top) = (120.0, 480.0, 30.0, 40.0);
        let height = top + row_h * self.rows.len() as f64 + 20.0;
        let width = label_w + bar_w + 20.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        );
        for (m, modality) in Modality::ALL.iter().enumerate() {
            let x = label_w + m as f64 * 110.0;
            let _ = writeln!(s, r#"<rect x="{x}" y="10" width="12" height="12" fill="{}"/>"#, COLORS[m]);
            let _ = writeln!(s, r#"<text x="{}" y="21">{}</text>"#, x + 16.0, modality.name());
        }
        for (r, (label, vals)) in self.rows.iter().enumerate() {
            let y = top + r as f64 * row_h;
            let _ = writeln!(s, r#"<text x="4" y="{}">{label}</text>"#, y + row_h * 0.6);
            let mut x = label_w;
            for (m, v) in vals.iter().enumerate() {
                let w = bar_w * v / 100.0;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{:.2}" fill="{}"/>"#,
                    row_h - 6.0,
                    COLORS[m]
                );
                if w > 28.0 {
                    let _ = writeln!(
                        s,
                        r##"<text x="{:.2}" y="{:.2}" fill="#fff" text-anchor="middle">{v:.0}</text>"##,
                        x + w / 2.0,
                        y + row_h * 0.55
                    );
                }
                x += w;
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

impl Model {
    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        write_checkpoint(&self.store, out)
    }

    /// Rebuilds the architecture from `self.cfg` and loads weights into it.
    pub fn read_checkpoint<R: Read>(&mut self, input: R) -> Result<()> {
        read_checkpoint(&mut self.store, input)
    }
}
