//! Per-step risk and attention export: JSON lines and an SVG heat map.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::error::Result;
use crate::model::{Prediction, PreparedWindow, Task};

/// One line of the JSON-lines export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode_id: String,
    pub patient_id: String,
    pub window: usize,
    /// 1-based step within the window.
    pub step: usize,
    /// Positive-class probability for the binary task.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub risk: Option<f64>,
    /// Full output: class distribution, or the regression value.
    pub output: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<Vec<f64>>,
    /// `K x W'` joint weights, when both alpha and beta exist.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_lab: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phi_lab: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_int: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phi_int: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m: Option<usize>,
}

pub fn step_records(task: Task, window: &PreparedWindow, pred: &Prediction) -> Vec<StepRecord> {
    pred.outputs
        .iter()
        .enumerate()
        .map(|(i, out)| {
            let tr = pred.traces.get(i).cloned().unwrap_or_default();
            StepRecord {
                episode_id: window.episode_id.clone(),
                patient_id: window.patient_id.clone(),
                window: window.index,
                step: i + 1,
                risk: (task == Task::Decomp).then(|| out[out.len() - 1]),
                output: out.clone(),
                a: tr.joint(),
                alpha: tr.alpha,
                beta: tr.beta,
                gamma_lab: tr.gamma_lab,
                phi_lab: tr.phi_lab,
                gamma_int: tr.gamma_int,
                phi_int: tr.phi_int,
                m: tr.m,
            }
        })
        .collect()
}

pub fn to_jsonl(records: &[StepRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// `K x W'` weights for the heat map: the joint map when present, else the
/// available time weights (guided ones averaged) spread by channel weights
/// or evenly. Variants without attention give `K` empty rows.
pub fn heat(trace: &AttentionTrace, k: usize) -> Vec<Vec<f64>> {
    if let Some(a) = trace.joint() {
        return a;
    }
    let guided: Vec<&Vec<f64>> = [&trace.gamma_lab, &trace.gamma_int].into_iter().flatten().collect();
    let time: Vec<f64> = if let Some(a) = &trace.alpha {
        a.clone()
    } else if let Some(first) = guided.first() {
        (0..first.len())
            .map(|j| guided.iter().map(|g| g[j]).sum::<f64>() / guided.len() as f64)
            .collect()
    } else {
        Vec::new()
    };
    let chan = trace.beta.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
    chan.iter().map(|b| time.iter().map(|t| b * t).collect()).collect()
}

/// Lower edges of the two highlighted bands.
pub const BAND_LOW: f64 = 0.01;
pub const BAND_HIGH: f64 = 0.02;

pub fn band(w: f64) -> &'static str {
    if w >= BAND_HIGH {
        "high"
    } else if w >= BAND_LOW {
        "mid"
    } else {
        "none"
    }
}

const CELL: f64 = 28.0;
const LABEL: f64 = 90.0;
const RISK_H: f64 = 80.0;

/// One panel per window: the risk trajectory over the final-step heat map,
/// channels as rows and steps as columns.
pub fn render_svg(channels: &[String], windows: &[(&PreparedWindow, &Prediction)]) -> String {
    let k = channels.len();
    let cols = windows.iter().map(|(_, p)| p.outputs.len()).max().unwrap_or(0);
    let panel_h = RISK_H + 30.0 + CELL * k as f64 + 30.0;
    let width = LABEL + CELL * cols as f64 + 20.0;
    let height = panel_h * windows.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        "<style>.cell{{fill:#1f4e9c}} .mid{{stroke:#e69f00;stroke-width:1.5}} .high{{stroke:#d62728;stroke-width:3}}</style>"
    );
    for (wi, (w, p)) in windows.iter().enumerate() {
        let top = wi as f64 * panel_h + 10.0;
        let steps = p.outputs.len();
        let _ = writeln!(
            s,
            r#"<g class="window" data-episode="{}" data-window="{}">"#,
            xml(&w.episode_id),
            w.index
        );
        let _ = writeln!(s, r#"<text x="4" y="{}">{} / {}</text>"#, top + 12.0, xml(&w.episode_id), w.index);
        let pts: Vec<String> = p
            .outputs
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let x = LABEL + CELL * (i as f64 + 0.5);
                let y = top + 20.0 + RISK_H * (1.0 - o[o.len() - 1].clamp(0.0, 1.0));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline class="risk" fill="none" stroke="#333" stroke-width="1.5" points="{}"/>"##,
            pts.join(" ")
        );
        let grid_top = top + RISK_H + 30.0;
        let trace = p.traces.last().cloned().unwrap_or_default();
        let h = heat(&trace, k);
        // The final-step weights cover the last W' steps.
        let offset = steps - h.first().map_or(0, Vec::len).min(steps);
        for (r, name) in channels.iter().enumerate() {
            let y = grid_top + CELL * r as f64;
            let _ = writeln!(s, r#"<text x="4" y="{:.1}">{}</text>"#, y + CELL * 0.65, xml(name));
            for j in 0..steps {
                let wgt = j
                    .checked_sub(offset)
                    .and_then(|c| h.get(r).and_then(|row| row.get(c)))
                    .copied()
                    .unwrap_or(0.0);
                let b = band(wgt);
                let class = if b == "none" { "cell".to_string() } else { format!("cell {b}") };
                let _ = writeln!(
                    s,
                    r#"<rect class="{class}" x="{:.1}" y="{y:.1}" width="{CELL}" height="{CELL}" fill-opacity="{:.4}" data-weight="{wgt:.6}"/>"#,
                    LABEL + CELL * j as f64,
                    wgt.clamp(0.0, 1.0)
                );
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn xml(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{random_window, tiny_config, tiny_schema};
    use crate::ingest::Timeline;
    use crate::model::{Model, Variant};

    fn predict(variant: Variant) -> (Vec<PreparedWindow>, Vec<Prediction>) {
        let s = tiny_schema();
        let m = Model::new(tiny_config(&s, variant, Task::Decomp), &s, &Timeline::fast(), 3).unwrap();
        let w = vec![random_window(&s, 12, &[2], &[5], 1), random_window(&s, 12, &[], &[], 2)];
        let p = m.predict(&w, true).unwrap();
        (w, p)
    }

    #[test]
    fn twelve_records_with_normalized_rows() {
        let (w, p) = predict(Variant::Raim0);
        let recs = step_records(Task::Decomp, &w[0], &p[0]);
        assert_eq!(recs.len(), 12);
        for r in &recs {
            let risk = r.risk.unwrap();
            assert!((0.0..=1.0).contains(&risk));
            let alpha = r.alpha.as_ref().unwrap();
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let a = r.a.as_ref().unwrap();
            assert_eq!(a.len(), 2);
            assert!(a.iter().all(|row| row.len() == alpha.len() && row.iter().all(|v| *v >= 0.0)));
        }
        let text = to_jsonl(&recs).unwrap();
        assert_eq!(text.lines().count(), 12);
        let back: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, recs[0]);
    }

    #[test]
    fn svg_has_k_by_twelve_cells_per_window() {
        for v in [Variant::Raim3, Variant::CnnRnn] {
            let (w, p) = predict(v);
            let names = vec!["wave".to_string(), "vital".to_string()];
            let pairs: Vec<_> = w.iter().zip(&p).collect();
            let svg = render_svg(&names, &pairs);
            assert_eq!(svg.matches("<rect class=\"cell").count(), 2 * 12 * 2);
            assert_eq!(svg.matches("<g class=\"window\"").count(), 2);
        }
    }

    #[test]
    fn bands() {
        assert_eq!(band(0.005), "none");
        assert_eq!(band(0.01), "mid");
        assert_eq!(band(0.0199), "mid");
        assert_eq!(band(0.02), "high");
        assert_eq!(band(0.07), "high");
    }

    #[test]
    fn heat_rows_sum_to_time_weights() {
        let tr = AttentionTrace {
            gamma_int: Some(vec![0.0, 0.25, 0.75]),
            beta: Some(vec![0.5, 0.5]),
            ..AttentionTrace::default()
        };
        let h = heat(&tr, 2);
        assert_eq!(h[0], vec![0.0, 0.125, 0.375]);
        assert_eq!(heat(&AttentionTrace::default(), 2), vec![Vec::<f64>::new(); 2]);
    }
}
