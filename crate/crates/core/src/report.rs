//! CSV tables and SVG charts for experiment artifacts.
//!
//! Every table has a fixed header; floats are written in shortest
//! round-trip form, so reading a table back reproduces it exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{AttentionMap, EvalReport, SchemeComparison};
use crate::grid::SolutionField;
use crate::tensor::Tensor;
use crate::trainer::TrainLog;

/// `M,t,x,u_pred,u_exact`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    #[serde(rename = "M")]
    pub mobility: f64,
    pub t: f64,
    pub x: f64,
    pub u_pred: f64,
    pub u_exact: f64,
}

/// `M,t,x,u_exact`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRow {
    #[serde(rename = "M")]
    pub mobility: f64,
    pub t: f64,
    pub x: f64,
    pub u_exact: f64,
}

/// `M,t,x,u_fv,u_exact`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FvRow {
    #[serde(rename = "M")]
    pub mobility: f64,
    pub t: f64,
    pub x: f64,
    pub u_fv: f64,
    pub u_exact: f64,
}

/// `i,j,alpha`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub i: usize,
    pub j: usize,
    pub alpha: f64,
}

/// `i,entropy`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub i: usize,
    pub entropy: f64,
}

/// `epoch,loss,seconds`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// `M,t,l2,linf,l2_outside,linf_outside,shock_exact,shock_estimate,shock_error_cells`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "M")]
    pub mobility: f64,
    pub t: f64,
    pub l2: f64,
    pub linf: f64,
    pub l2_outside: f64,
    pub linf_outside: f64,
    pub shock_exact: f64,
    pub shock_estimate: f64,
    pub shock_error_cells: f64,
}

/// `x,u_central,u_upwind,u_exact`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub x: f64,
    pub u_central: f64,
    pub u_upwind: f64,
    pub u_exact: f64,
}

pub use crate::eval::ResolutionRow;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    fs::write(path, csv_string(rows)?)?;
    Ok(())
}

/// Rows as CSV text. An empty table still carries no header, since the
/// header comes from the first row.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV of numbers is UTF-8"))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn profile_rows(report: &EvalReport) -> Vec<ProfileRow> {
    let mut rows = Vec::new();
    for p in &report.profiles {
        for ((&x, &u_pred), &u_exact) in p.x.iter().zip(&p.predicted).zip(&p.exact) {
            rows.push(ProfileRow {
                mobility: report.mobility,
                t: p.t,
                x,
                u_pred,
                u_exact,
            });
        }
    }
    rows
}

pub fn metrics_rows(report: &EvalReport) -> Vec<MetricsRow> {
    report
        .errors
        .iter()
        .map(|e| MetricsRow {
            mobility: report.mobility,
            t: e.t,
            l2: e.l2,
            linf: e.linf,
            l2_outside: e.l2_outside,
            linf_outside: e.linf_outside,
            shock_exact: e.shock_exact,
            shock_estimate: e.shock_estimate,
            shock_error_cells: e.shock_error_cells,
        })
        .collect()
}

pub fn analytic_rows(field: &SolutionField) -> Vec<AnalyticRow> {
    let mut rows = Vec::with_capacity(field.values().len());
    for (j, &t) in field.t.iter().enumerate() {
        for (i, &x) in field.x.iter().enumerate() {
            rows.push(AnalyticRow {
                mobility: field.mobility,
                t,
                x,
                u_exact: field.at(j, i),
            });
        }
    }
    rows
}

pub fn attention_rows(map: &AttentionMap) -> Vec<AttentionRow> {
    let cols = map.alpha.shape()[1];
    map.alpha
        .data()
        .iter()
        .enumerate()
        .map(|(k, &alpha)| AttentionRow {
            i: k / cols + 1,
            j: k % cols + 1,
            alpha,
        })
        .collect()
}

pub fn entropy_rows(map: &AttentionMap) -> Vec<EntropyRow> {
    map.entropy
        .iter()
        .enumerate()
        .map(|(i, &entropy)| EntropyRow { i: i + 1, entropy })
        .collect()
}

pub fn loss_rows(log: &TrainLog) -> Vec<LossRow> {
    log.losses
        .iter()
        .zip(&log.seconds)
        .enumerate()
        .map(|(k, (&loss, &seconds))| LossRow {
            epoch: log.first_epoch + k,
            loss,
            seconds,
        })
        .collect()
}

pub fn comparison_rows(cmp: &SchemeComparison) -> Vec<ComparisonRow> {
    (0..cmp.x.len())
        .map(|i| ComparisonRow {
            x: cmp.x[i],
            u_central: cmp.central[i],
            u_upwind: cmp.upwind[i],
            u_exact: cmp.exact[i],
        })
        .collect()
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

/// An 800×600 line chart.
#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

impl LineChart {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_y: false,
            series: Vec::new(),
        }
    }

    pub fn to_svg(&self) -> String {
        let ty = |y: f64| if self.log_y { y.max(f64::MIN_POSITIVE).log10() } else { y };
        let points = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = bounds(points().map(|p| p.0));
        let (y0, y1) = bounds(points().map(|p| ty(p.1)));
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| MARGIN_TOP + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="30" text-anchor="middle" font-size="18">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for k in 0..=5 {
            let f = k as f64 / 5.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (gx, gy) = (MARGIN_LEFT + f * pw, MARGIN_TOP + (1.0 - f) * ph);
            let y_text = if self.log_y { format!("1e{yv:.1}") } else { format!("{yv:.3}") };
            let _ = writeln!(
                svg,
                r##"<line x1="{gx:.2}" y1="{MARGIN_TOP}" x2="{gx:.2}" y2="{:.2}" stroke="#ddd"/><text x="{gx:.2}" y="{:.2}" text-anchor="middle" font-size="12">{xv:.3}</text>"##,
                MARGIN_TOP + ph,
                MARGIN_TOP + ph + 18.0
            );
            let _ = writeln!(
                svg,
                r##"<line x1="{MARGIN_LEFT}" y1="{gy:.2}" x2="{:.2}" y2="{gy:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="12">{y_text}</text>"##,
                MARGIN_LEFT + pw,
                MARGIN_LEFT - 6.0,
                gy + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            HEIGHT - 15.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="20" y="{:.2}" text-anchor="middle" font-size="14" transform="rotate(-90 20 {:.2})">{}</text>"#,
            MARGIN_TOP + ph / 2.0,
            MARGIN_TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
                path.join(" ")
            );
            let ly = MARGIN_TOP + 20.0 + 22.0 * k as f64;
            let lx = MARGIN_LEFT + pw + 10.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#,
                lx + 25.0,
                lx + 30.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// An 800×600 heat map of a matrix, row 0 at the top, white → dark blue.
pub fn heatmap_svg(title: &str, matrix: &Tensor, x_label: &str, y_label: &str) -> String {
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let (lo, hi) = bounds(matrix.data().iter().copied());
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let (cw, ch) = (pw / cols as f64, ph / rows as f64);
    let shade = |v: f64| {
        let f = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        let c = |white: f64, dark: f64| (white + f * (dark - white)).round() as u8;
        format!("#{:02x}{:02x}{:02x}", c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0))
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="30" text-anchor="middle" font-size="18">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for i in 0..rows {
        for j in 0..cols {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                MARGIN_LEFT + j as f64 * cw,
                MARGIN_TOP + i as f64 * ch,
                cw + 0.05,
                ch + 0.05,
                shade(matrix.at(i, j))
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.2}" text-anchor="middle" font-size="14" transform="rotate(-90 20 {:.2})">{}</text>"#,
        MARGIN_TOP + ph / 2.0,
        MARGIN_TOP + ph / 2.0,
        escape(y_label)
    );
    let lx = MARGIN_LEFT + pw + 20.0;
    for k in 0..=10 {
        let f = k as f64 / 10.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.2}" y="{:.2}" width="20" height="{:.2}" fill="{}"/>"#,
            MARGIN_TOP + (1.0 - f) * (ph - ph / 11.0),
            ph / 11.0,
            shade(lo + f * (hi - lo))
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12">{hi:.3}</text><text x="{:.2}" y="{:.2}" font-size="12">{lo:.3}</text>"#,
        lx + 26.0,
        MARGIN_TOP + 12.0,
        lx + 26.0,
        MARGIN_TOP + ph
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_the_documented_headers() {
        let text = csv_string(&[ProfileRow {
            mobility: 2.0,
            t: 0.1,
            x: 0.5,
            u_pred: 0.25,
            u_exact: 0.0,
        }])
        .unwrap();
        assert!(text.starts_with("M,t,x,u_pred,u_exact\n"));
        let text = csv_string(&[AttentionRow { i: 1, j: 2, alpha: 0.5 }]).unwrap();
        assert!(text.starts_with("i,j,alpha\n"));
        let text = csv_string(&[LossRow {
            epoch: 0,
            loss: 1.0,
            seconds: 0.1,
        }])
        .unwrap();
        assert!(text.starts_with("epoch,loss,seconds\n"));
        let text = csv_string(&[ResolutionRow {
            dx: 0.01,
            dt: 0.01,
            residual: 1e-4,
        }])
        .unwrap();
        assert!(text.starts_with("dx,dt,residual\n"));
        let text = csv_string(&[AnalyticRow {
            mobility: 2.0,
            t: 0.0,
            x: 0.0,
            u_exact: 1.0,
        }])
        .unwrap();
        assert!(text.starts_with("M,t,x,u_exact\n"));
    }

    #[test]
    fn line_chart_is_well_formed() {
        let mut chart = LineChart::new("loss", "epoch", "loss");
        chart.log_y = true;
        chart.series.push(Series::new("a<b", vec![(0.0, 1.0), (1.0, 0.1)]));
        chart.series.push(Series::new("flat", vec![(0.0, 2.0), (1.0, 2.0)]).dashed());
        let svg = chart.to_svg();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg, chart.to_svg());
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let m = Tensor::matrix(2, 3, vec![0.0, 0.5, 1.0, 0.2, 0.3, 0.4]).unwrap();
        let svg = heatmap_svg("alpha", &m, "j", "i");
        assert!(svg.contains(r##"fill="#ffffff""##));
        assert!(svg.contains(r##"fill="#08306b""##));
    }
}
