//! Attention export: per-head or layer-averaged weight matrices as JSON,
//! and an SVG page where one token is outlined and every other box is
//! shaded by how much that token attends to it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::doc_model::BBox;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Tolerance for the row-stochastic check.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub doc_id: String,
    pub layer: usize,
    /// `None` when heads are averaged.
    pub head: Option<usize>,
    pub tokens: Vec<String>,
    pub boxes: Vec<[f64; 4]>,
    pub weights: Vec<Vec<f64>>,
}

impl AttentionRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("attention record", e.to_string()))
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_error(&self) -> f64 {
        self.weights
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn dims(attention: &Tensor) -> Result<[usize; 4]> {
    match *attention.shape() {
        [l, h, a, b] if a == b => Ok([l, h, a, b]),
        _ => Err(Error::contract("attention must be layers × heads × len × len")),
    }
}

/// Weights of one head as `len × len` rows.
pub fn head_weights(attention: &Tensor, layer: usize, head: usize) -> Result<Vec<Vec<f64>>> {
    let [layers, heads, len, _] = dims(attention)?;
    if layer >= layers || head >= heads {
        return Err(Error::contract(format!(
            "layer {layer} / head {head} out of range ({layers} layers, {heads} heads)"
        )));
    }
    let base = (layer * heads + head) * len * len;
    let data = &attention.data()[base..base + len * len];
    Ok(data.chunks(len).map(|r| r.iter().map(|&w| w as f64).collect()).collect())
}

/// Mean of the per-head matrices of `layer`.
pub fn layer_average(attention: &Tensor, layer: usize) -> Result<Vec<Vec<f64>>> {
    let [_, heads, len, _] = dims(attention)?;
    let mut acc = vec![vec![0.0; len]; len];
    for h in 0..heads {
        for (a, r) in acc.iter_mut().zip(head_weights(attention, layer, h)?) {
            for (x, w) in a.iter_mut().zip(r) {
                *x += w;
            }
        }
    }
    for r in &mut acc {
        for x in r {
            *x /= heads as f64;
        }
    }
    Ok(acc)
}

/// Records for the requested layer/head selection. `layer = None` means
/// every layer, `head = None` every head; `average` replaces the heads of
/// each selected layer by their mean.
pub fn attention_records(
    attention: &Tensor,
    doc_id: &str,
    tokens: &[String],
    boxes: &[BBox],
    layer: Option<usize>,
    head: Option<usize>,
    average: bool,
) -> Result<Vec<AttentionRecord>> {
    let [layers, heads, len, _] = dims(attention)?;
    if tokens.len() != len || boxes.len() != len {
        return Err(Error::contract("tokens, boxes and attention differ in length"));
    }
    if layer.is_some_and(|l| l >= layers) {
        return Err(Error::contract(format!("layer {} out of range ({layers} layers)", layer.unwrap_or(0))));
    }
    if head.is_some_and(|h| h >= heads) {
        return Err(Error::contract(format!("head {} out of range ({heads} heads)", head.unwrap_or(0))));
    }
    let record = |layer, head, weights| AttentionRecord {
        doc_id: doc_id.to_string(),
        layer,
        head,
        tokens: tokens.to_vec(),
        boxes: boxes.iter().map(|b| b.to_array()).collect(),
        weights,
    };
    let mut out = Vec::new();
    for l in layer.map_or(0..layers, |l| l..l + 1) {
        if average {
            out.push(record(l, None, layer_average(attention, l)?));
        } else {
            for h in head.map_or(0..heads, |h| h..h + 1) {
                out.push(record(l, Some(h), head_weights(attention, l, h)?));
            }
        }
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Page rendering for the row of `selected`: that box outlined, the others
/// filled with opacity proportional to their weight (the row maximum maps
/// to full opacity).
pub fn render_svg(record: &AttentionRecord, page: &BBox, selected: usize) -> Result<String> {
    let row = record
        .weights
        .get(selected)
        .ok_or_else(|| Error::contract(format!("token {selected} out of range")))?;
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != selected || row.len() == 1)
        .map(|(_, &w)| w)
        .fold(0.0, f64::max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{} {} {} {}" width="{}" height="{}">"#,
        page.x1,
        page.y1,
        page.width(),
        page.height(),
        (page.width() * 800.0 / page.width().max(page.height())).round(),
        (page.height() * 800.0 / page.width().max(page.height())).round(),
    );
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="white"/>"#,
        page.x1,
        page.y1,
        page.width(),
        page.height()
    );
    let stroke = page.width().max(page.height()) / 400.0;
    for (j, (b, t)) in record.boxes.iter().zip(&record.tokens).enumerate() {
        let [x1, y1, x2, y2] = *b;
        let opacity = if max > 0.0 { row[j] / max } else { 0.0 };
        let style = if j == selected {
            format!(r#"fill="orange" fill-opacity="{:.4}" stroke="red" stroke-width="{stroke}""#, opacity.min(1.0))
        } else {
            format!(r#"fill="blue" fill-opacity="{:.4}" stroke="gray" stroke-width="{}""#, opacity.min(1.0), stroke / 4.0)
        };
        let _ = writeln!(
            s,
            r#"<rect x="{x1}" y="{y1}" width="{}" height="{}" {style}><title>{} {:.5}</title></rect>"#,
            x2 - x1,
            y2 - y1,
            xml_escape(t),
            row[j]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
