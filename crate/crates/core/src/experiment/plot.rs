//! Static SVG plots of run outputs. Deliberately plain: axes, ticks, lines,
//! bars, points.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::csv::Table;
use crate::datasets::sigmoid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    LossCurves,
    SvDecay,
    SphereHist,
    SigmoidScatter,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [PlotKind::LossCurves, PlotKind::SvDecay, PlotKind::SphereHist, PlotKind::SigmoidScatter];

    pub fn as_str(&self) -> &'static str {
        match self {
            PlotKind::LossCurves => "loss-curves",
            PlotKind::SvDecay => "sv-decay",
            PlotKind::SphereHist => "sphere-hist",
            PlotKind::SigmoidScatter => "sigmoid-scatter",
        }
    }
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown plot kind `{s}`")))
    }
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 52.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone)]
enum Mark {
    Line { dashed: bool },
    Points,
    Bars { width: f64 },
}

#[derive(Debug, Clone)]
struct Series {
    label: String,
    xs: Vec<f64>,
    ys: Vec<f64>,
    mark: Mark,
}

#[derive(Debug, Clone, Default)]
struct Panel {
    title: String,
    x_label: String,
    log_y: bool,
    series: Vec<Series>,
    /// Vertical reference line.
    x_ref: Option<f64>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

fn range(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    if hi - lo < 1e-300 {
        let pad = lo.abs().max(1.0) * 0.5;
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

impl Panel {
    fn render(&self, out: &mut String, ox: f64) {
        let ty = |v: f64| if self.log_y { if v > 0.0 { v.log10() } else { f64::NAN } } else { v };
        let xr = range(self.series.iter().flat_map(|s| s.xs.iter().copied()).chain(self.x_ref));
        let yr = range(self.series.iter().flat_map(|s| s.ys.iter().map(|&v| ty(v))).chain(
            self.series.iter().any(|s| matches!(s.mark, Mark::Bars { .. })).then_some(0.0),
        ));
        let (x0, y0, w, h) = (ox + MARGIN, MARGIN * 0.6, PANEL_W - MARGIN * 1.3, PANEL_H - MARGIN * 1.4);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#, x0 + w / 2.0, y0 - 8.0, esc(&self.title));
        let _ = writeln!(out, r##"<rect x="{x0:.1}" y="{y0:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#444"/>"##);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#, x0 + w / 2.0, y0 + h + 32.0, esc(&self.x_label));
        let (Some((xa, xb)), Some((ya, yb))) = (xr, yr) else {
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">no finite data</text>"#, x0 + w / 2.0, y0 + h / 2.0);
            return;
        };
        let px = |x: f64| x0 + (x - xa) / (xb - xa) * w;
        let py = |y: f64| y0 + h - (y - ya) / (yb - ya) * h;
        for i in 0..=4 {
            let xv = xa + (xb - xa) * i as f64 / 4.0;
            let yv = ya + (yb - ya) * i as f64 / 4.0;
            let ylab = if self.log_y { format!("1e{:.1}", yv) } else { tick_label(yv) };
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#, px(xv), y0 + h + 14.0, tick_label(xv));
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#, x0 - 4.0, py(yv) + 3.0, ylab);
        }
        if let Some(xr) = self.x_ref {
            let _ = writeln!(out, r##"<line x1="{0:.1}" x2="{0:.1}" y1="{1:.1}" y2="{2:.1}" stroke="#888" stroke-dasharray="3,3"/>"##, px(xr), y0, y0 + h);
        }
        for (k, s) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<(f64, f64)> = s.xs.iter().zip(&s.ys).map(|(&x, &y)| (x, ty(y))).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            match s.mark {
                Mark::Line { dashed } => {
                    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
                    let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
                    let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#, path.join(" "));
                }
                Mark::Points => {
                    for &(x, y) in &pts {
                        let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="1.3" fill="{color}" fill-opacity="0.5"/>"#, px(x), py(y));
                    }
                }
                Mark::Bars { width } => {
                    for &(x, y) in &pts {
                        let (l, r) = (px(x - width / 2.0), px(x + width / 2.0));
                        let _ = writeln!(out, r#"<rect x="{l:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="0.7"/>"#, py(y), (r - l).max(0.5), py(0.0) - py(y));
                    }
                }
            }
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}">{}</text>"#, x0 + 6.0, y0 + 14.0 + 12.0 * k as f64, esc(&s.label));
        }
    }
}

fn svg(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len() as f64;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    out.push('\n');
    out.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    out.push('\n');
    for (i, p) in panels.iter().enumerate() {
        p.render(&mut out, PANEL_W * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

fn line(label: &str, xs: Vec<f64>, ys: Vec<f64>) -> Series {
    Series {
        label: label.into(),
        xs,
        ys,
        mark: Mark::Line { dashed: false },
    }
}

fn non_empty(t: &Table, what: &str) -> Result<()> {
    if t.rows.is_empty() {
        return Err(Error::Schema(format!("{what} has no rows")));
    }
    Ok(())
}

/// Smoothed loss, decoder std, and reconstruction error against time.
pub fn loss_curves(t: &Table) -> Result<String> {
    non_empty(t, "trajectory")?;
    let time = t.column("time")?;
    let loss = t.column("loss_avg").or_else(|_| t.column("loss"))?;
    let eps = t.column("eps")?;
    let rec = t.column("recon_mse")?;
    Ok(svg(&[
        Panel {
            title: "VAE loss".into(),
            x_label: "step".into(),
            series: vec![line("loss", time.clone(), loss)],
            ..Default::default()
        },
        Panel {
            title: "decoder std".into(),
            x_label: "step".into(),
            log_y: true,
            series: vec![line("eps", time.clone(), eps)],
            ..Default::default()
        },
        Panel {
            title: "reconstruction error".into(),
            x_label: "step".into(),
            log_y: true,
            series: vec![line("recon_mse", time, rec)],
            ..Default::default()
        },
    ]))
}

/// Singular-value tail and its exponential bound, log scale.
pub fn sv_decay(t: &Table) -> Result<String> {
    non_empty(t, "decay report")?;
    let time = t.column("time")?;
    let tail = t.column("tail")?;
    let bound = t.column("bound")?;
    let mut series = vec![line("singular-value tail", time.clone(), tail)];
    if let Ok(lhs) = t.column("lhs") {
        series.push(line("complement projection", time.clone(), lhs));
    }
    series.push(Series {
        label: "C exp(-t/K)".into(),
        xs: time,
        ys: bound,
        mark: Mark::Line { dashed: true },
    });
    Ok(svg(&[Panel {
        title: "decoder rank decay".into(),
        x_label: "t".into(),
        log_y: true,
        series,
        ..Default::default()
    }]))
}

/// Counts of `values` in `bins` equal bins over their range.
pub fn histogram(values: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let (lo, hi) = range(values.iter().copied()).unwrap_or((0.0, 1.0));
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1.0;
    }
    let centers = (0..bins).map(|k| lo + (k as f64 + 0.5) * width).collect();
    (centers, counts, width)
}

fn check_width(samples: &DMatrix<f64>, need: usize) -> Result<()> {
    if samples.nrows() == 0 {
        return Err(Error::Schema("samples have no rows".into()));
    }
    if samples.ncols() < need {
        return Err(Error::Schema(format!("missing column `x{need}`")));
    }
    Ok(())
}

/// Histogram of the norms of the first `r* + 1` coordinates, with the unit
/// sphere marked.
pub fn sphere_hist(samples: &DMatrix<f64>, r_star: usize) -> Result<String> {
    check_width(samples, r_star + 1)?;
    let norms: Vec<f64> = samples.row_iter().map(|r| r.columns(0, r_star + 1).norm()).collect();
    let (xs, ys, width) = histogram(&norms, 40);
    let inside = norms.iter().filter(|&&n| n < 1.0).count() as f64 / norms.len() as f64;
    Ok(svg(&[Panel {
        title: "norms of generated samples".into(),
        x_label: format!("norm of first {} coordinates ({:.0}% below 1)", r_star + 1, 100.0 * inside),
        series: vec![Series {
            label: "count".into(),
            xs,
            ys,
            mark: Mark::Bars { width },
        }],
        x_ref: Some(1.0),
        ..Default::default()
    }]))
}

/// `⟨a*, x_{1..r*}⟩` against `x_{r*+1}`, with the true link overlaid.
pub fn sigmoid_scatter(samples: &DMatrix<f64>, a_star: &DVector<f64>) -> Result<String> {
    let rs = a_star.len();
    check_width(samples, rs + 1)?;
    let proj: Vec<f64> = samples.row_iter().map(|r| r.columns(0, rs).transpose().dot(a_star)).collect();
    let last: Vec<f64> = samples.column(rs).iter().copied().collect();
    let (lo, hi) = range(proj.iter().copied()).unwrap_or((-1.0, 1.0));
    let grid: Vec<f64> = (0..=100).map(|k| lo + (hi - lo) * k as f64 / 100.0).collect();
    let truth: Vec<f64> = grid.iter().map(|&u| sigmoid(u)).collect();
    Ok(svg(&[Panel {
        title: "generated samples vs ground truth".into(),
        x_label: format!("<a*, x[1..{rs}]>"),
        series: vec![
            Series {
                label: format!("generated x{}", rs + 1),
                xs: proj,
                ys: last,
                mark: Mark::Points,
            },
            Series {
                label: "sigmoid link".into(),
                xs: grid,
                ys: truth,
                mark: Mark::Line { dashed: true },
            },
        ],
        ..Default::default()
    }]))
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let (c, n, w) = histogram(&v, 10);
        assert_eq!(n.iter().sum::<f64>(), 100.0);
        assert_eq!(c.len(), 10);
        assert!((w - 0.99).abs() < 1e-12);
    }

    #[test]
    fn missing_column_is_named() {
        let t = Table::parse("time,tail,lhs\n0,1,2\n").unwrap();
        assert!(matches!(sv_decay(&t), Err(Error::Schema(m)) if m.contains("`bound`")));
        let empty = Table::parse("time,loss,eps,recon_mse\n").unwrap();
        assert!(matches!(loss_curves(&empty), Err(Error::Schema(_))));
    }

    #[test]
    fn renders_svg() {
        let t = Table::parse("time,tail,lhs,bound\n0,1,2,2\n1,0.1,0.5,1\n2,0,0.1,0.5\n").unwrap();
        let s = sv_decay(&t).unwrap();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 3);
    }
}
