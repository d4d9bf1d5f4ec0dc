//! Evaluation reports, their CSV forms and the quality-versus-cost plot.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS: [&str; 4] = ["lpips", "ssim", "csim", "nme"];

/// Note attached to every report about how NME is scaled.
pub const NME_CONVENTION: &str =
    "nme = 10 * mean point distance / distance between target eye centres (eye centre = mean of the eye's landmarks)";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub lpips: f64,
    pub ssim: f64,
    pub csim: f64,
    pub nme: f64,
}

impl MetricValues {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "lpips" => Some(self.lpips),
            "ssim" => Some(self.ssim),
            "csim" => Some(self.csim),
            "nme" => Some(self.nme),
            _ => None,
        }
    }

    fn from_fn(mut f: impl FnMut(&str) -> f64) -> Self {
        MetricValues {
            lpips: f("lpips"),
            ssim: f("ssim"),
            csim: f("csim"),
            nme: f("nme"),
        }
    }

    pub fn mean(rows: &[MetricValues]) -> Self {
        Self::from_fn(|m| rows.iter().map(|r| r.get(m).unwrap()).sum::<f64>() / rows.len() as f64)
    }

    pub fn median(rows: &[MetricValues]) -> Self {
        Self::from_fn(|m| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.get(m).unwrap()).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRow {
    pub video_id: String,
    /// Number of target frames scored.
    pub frames: usize,
    #[serde(flatten)]
    pub metrics: MetricValues,
}

/// Which frames are scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolInfo {
    pub source_frame: usize,
    /// Frames between consecutive targets; one second of video by default.
    pub stride: Option<usize>,
    pub masked_targets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fingerprint: Option<String>,
    pub gmacs: Option<f64>,
    pub protocol: ProtocolInfo,
    pub nme_convention: String,
    pub rows: Vec<VideoRow>,
    pub mean: MetricValues,
    pub median: MetricValues,
    #[serde(default)]
    pub run: serde_json::Value,
}

impl EvalReport {
    pub fn new(label: &str, protocol: ProtocolInfo, rows: Vec<VideoRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("no videos were evaluated".into()));
        }
        let values: Vec<MetricValues> = rows.iter().map(|r| r.metrics).collect();
        Ok(EvalReport {
            label: label.to_string(),
            fingerprint: None,
            gmacs: None,
            protocol,
            nme_convention: NME_CONVENTION.into(),
            mean: MetricValues::mean(&values),
            median: MetricValues::median(&values),
            rows,
            run: serde_json::Value::Null,
        })
    }

    /// Per-video CSV with header `video_id,lpips,ssim,csim,nme`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["video_id", "lpips", "ssim", "csim", "nme"])?;
        for r in &self.rows {
            let m = r.metrics;
            w.write_record([
                r.video_id.clone(),
                format!("{:?}", m.lpips),
                format!("{:?}", m.ssim),
                format!("{:?}", m.csim),
                format!("{:?}", m.nme),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Read back a per-video CSV.
pub fn read_rows(path: &Path) -> Result<Vec<VideoRow>> {
    #[derive(Deserialize)]
    struct Raw {
        video_id: String,
        lpips: f64,
        ssim: f64,
        csim: f64,
        nme: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Raw>()
        .map(|row| {
            let row = row?;
            Ok(VideoRow {
                video_id: row.video_id,
                frames: 0,
                metrics: MetricValues {
                    lpips: row.lpips,
                    ssim: row.ssim,
                    csim: row.csim,
                    nme: row.nme,
                },
            })
        })
        .collect()
}

/// One point of the quality-versus-cost comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub gmacs: f64,
    pub lpips: f64,
    pub ssim: f64,
    pub csim: f64,
    pub nme: f64,
}

impl SummaryRow {
    pub fn from_report(r: &EvalReport) -> Self {
        SummaryRow {
            label: r.label.clone(),
            gmacs: r.gmacs.unwrap_or(f64::NAN),
            lpips: r.median.lpips,
            ssim: r.median.ssim,
            csim: r.median.csim,
            nme: r.median.nme,
        }
    }

    fn metric(&self, name: &str) -> f64 {
        match name {
            "lpips" => self.lpips,
            "ssim" => self.ssim,
            "csim" => self.csim,
            _ => self.nme,
        }
    }
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

const PANEL_W: f64 = 240.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 40.0;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.1 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Four scatter panels, one per metric, each plotting the median score of
/// every labelled model against its GMACs. Pure function of its input.
pub fn render_plot(rows: &[SummaryRow]) -> String {
    let cols = 2.0;
    let width = cols * (PANEL_W + 2.0 * MARGIN);
    let height = 2.0 * (PANEL_H + 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let (gx0, gx1) = range(rows.iter().map(|r| r.gmacs));
    for (i, metric) in METRICS.iter().enumerate() {
        let ox = (i % 2) as f64 * (PANEL_W + 2.0 * MARGIN) + MARGIN;
        let oy = (i / 2) as f64 * (PANEL_H + 2.0 * MARGIN) + MARGIN;
        let (y0, y1) = range(rows.iter().map(|r| r.metric(metric)));
        let _ = writeln!(
            s,
            r#"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{metric}</text>"#,
            ox + PANEL_W / 2.0,
            oy - 8.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">GMACs</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 28.0
        );
        for (v, x) in [(gx0, ox), (gx1, ox + PANEL_W)] {
            let _ = writeln!(
                s,
                r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.4}</text>"#,
                oy + PANEL_H + 14.0
            );
        }
        for (v, y) in [(y0, oy + PANEL_H), (y1, oy)] {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{v:.4}</text>"#, ox - 4.0);
        }
        for r in rows {
            let (gv, mv) = (r.gmacs, r.metric(metric));
            if !gv.is_finite() || !mv.is_finite() {
                continue;
            }
            let x = ox + (gv - gx0) / (gx1 - gx0) * PANEL_W;
            let y = oy + PANEL_H - (mv - y0) / (y1 - y0) * PANEL_H;
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3"/>"#);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                x + 5.0,
                y - 5.0,
                escape(&r.label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Regenerate the plot file from a summary CSV.
pub fn plot_from_csv(summary: &Path, svg: &Path) -> Result<()> {
    let rows = read_summary(summary)?;
    std::fs::write(svg, render_plot(&rows)).map_err(|e| Error::io(svg, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, v: f64) -> VideoRow {
        VideoRow {
            video_id: id.into(),
            frames: 3,
            metrics: MetricValues {
                lpips: v,
                ssim: 1.0 - v,
                csim: 0.5 * v,
                nme: 2.0 * v,
            },
        }
    }

    fn protocol() -> ProtocolInfo {
        ProtocolInfo {
            source_frame: 0,
            stride: None,
            masked_targets: false,
        }
    }

    #[test]
    fn aggregates_and_csv_roundtrip() {
        let rows = vec![row("a", 0.1), row("b", 0.4), row("c", 0.25)];
        let r = EvalReport::new("m", protocol(), rows.clone()).unwrap();
        for m in METRICS {
            let mean = rows.iter().map(|x| x.metrics.get(m).unwrap()).sum::<f64>() / 3.0;
            assert_eq!(r.mean.get(m).unwrap(), mean);
        }
        assert_eq!(r.median.lpips, 0.25);
        assert!(EvalReport::new("m", protocol(), vec![]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("video_id,lpips,ssim,csim,nme\n"));
        let back = read_rows(&p).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(a.metrics, b.metrics);
        }
    }

    #[test]
    fn plot_regenerates_identically() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("summary.csv");
        let rows = vec![
            SummaryRow {
                label: "small".into(),
                gmacs: 0.01,
                lpips: 0.3,
                ssim: 0.6,
                csim: 0.4,
                nme: 0.5,
            },
            SummaryRow {
                label: "small <updater>".into(),
                gmacs: 0.01,
                lpips: 0.25,
                ssim: 0.65,
                csim: 0.5,
                nme: 0.45,
            },
        ];
        write_summary(&rows, &csv).unwrap();
        let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
        plot_from_csv(&csv, &a).unwrap();
        plot_from_csv(&csv, &b).unwrap();
        let (a, b) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.matches("<circle").count(), 8);
        assert!(text.contains("small &lt;updater&gt;"));
        assert_eq!(render_plot(&rows), text);
    }
}
