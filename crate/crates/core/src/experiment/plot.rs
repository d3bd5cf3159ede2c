//! Fairness-versus-accuracy scatter plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::{write_text, AggregateRow, Metric, Scope};
use crate::error::{Error, Result};
use crate::models::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub variant: Variant,
    pub backbone: String,
    pub backbone_index: usize,
    pub balanced_accuracy: f64,
    pub fairness: f64,
}

/// One point per aggregated row of `scope` with both means defined.
pub fn tradeoff_points(rows: &[AggregateRow], metric: Metric, scope: Scope) -> Vec<PlotPoint> {
    rows.iter()
        .filter(|r| r.scope == scope)
        .filter_map(|r| {
            Some(PlotPoint {
                variant: r.variant,
                backbone: r.backbone.clone(),
                backbone_index: r.backbone_index,
                balanced_accuracy: r.get(Metric::BalancedAccuracy)?.mean,
                fairness: r.get(metric)?.mean,
            })
        })
        .collect()
}

pub fn points_csv(points: &[PlotPoint], metric: Metric) -> String {
    let mut out = format!("variant,backbone,balanced_accuracy,{}\n", metric.key());
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            p.variant.key(),
            p.backbone.replace(',', ";"),
            p.balanced_accuracy,
            p.fairness
        );
    }
    out
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn color(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "#4d4d4d",
        Variant::FairDisco => "#1f77b4",
        Variant::Tabe => "#d62728",
        Variant::Vae => "#2ca02c",
    }
}

/// SVG path of the marker for the backbone at `index` centred on (x, y).
/// The second backbone gets a rhombus.
fn marker(index: usize, x: f64, y: f64, r: f64, fill: &str) -> String {
    match index % 4 {
        0 => format!(r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}" stroke="black" stroke-width="1"/>"#),
        1 => format!(
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{fill}" stroke="black" stroke-width="1"/>"#,
            x,
            y - 1.3 * r,
            x + 1.3 * r,
            y,
            x,
            y + 1.3 * r,
            x - 1.3 * r,
            y
        ),
        2 => format!(
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}" stroke="black" stroke-width="1"/>"#,
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        _ => format!(
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{fill}" stroke="black" stroke-width="1"/>"#,
            x,
            y - 1.2 * r,
            x + 1.1 * r,
            y + 0.8 * r,
            x - 1.1 * r,
            y + 0.8 * r
        ),
    }
}

/// Axis range padded around the data and snapped to tenths within [0, 1].
fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let lo = ((lo - 0.05) * 10.0).floor() / 10.0;
    let hi = ((hi + 0.05) * 10.0).ceil() / 10.0;
    (lo.max(0.0), hi.min(1.0).max(lo.max(0.0) + 0.1))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of balanced accuracy (x) against the fairness metric (y).
pub fn render_svg(points: &[PlotPoint], metric: Metric, title: &str) -> Result<String> {
    if points.is_empty() {
        return Err(Error::invalid("trade-off plot needs at least one point"));
    }
    let (x0, x1) = axis_range(points.iter().map(|p| p.balanced_accuracy));
    let (y0, y1) = axis_range(points.iter().map(|p| p.fairness));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |v: f64| LEFT + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| TOP + ph - (v - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="DejaVu Sans, sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let ticks = |lo: f64, hi: f64| {
        let n = ((hi - lo) * 10.0).round() as usize;
        (0..=n).map(move |i| lo + i as f64 * (hi - lo) / n as f64)
    };
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{t:.1}</text>"##,
            TOP,
            TOP + ph,
            TOP + ph + 18.0
        );
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{t:.1}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Balanced accuracy</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        metric.title()
    );
    for p in points {
        let _ = writeln!(
            s,
            "{}",
            marker(p.backbone_index, sx(p.balanced_accuracy), sy(p.fairness), 6.0, color(p.variant))
        );
    }

    let lx = WIDTH - RIGHT + 20.0;
    let mut ly = TOP + 10.0;
    let mut variants: Vec<Variant> = points.iter().map(|p| p.variant).collect();
    variants.sort_by_key(|v| Variant::ALL.iter().position(|x| x == v));
    variants.dedup();
    for v in variants {
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly - 6.0,
            color(v),
            lx + 20.0,
            ly + 4.0,
            v.display_name()
        );
        ly += 20.0;
    }
    ly += 10.0;
    let mut backbones: Vec<(usize, &str)> = points.iter().map(|p| (p.backbone_index, p.backbone.as_str())).collect();
    backbones.sort();
    backbones.dedup();
    for (i, b) in backbones {
        let _ = writeln!(
            s,
            r#"{}<text x="{:.1}" y="{:.1}">{}</text>"#,
            marker(i, lx + 6.0, ly, 6.0, "white"),
            lx + 20.0,
            ly + 4.0,
            escape(b)
        );
        ly += 20.0;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Rasterize an SVG document to PNG bytes.
pub fn svg_to_png(svg: &str) -> Result<Vec<u8>> {
    let mut opt = resvg::usvg::Options::default();
    opt.fontdb_mut().load_system_fonts();
    let tree = resvg::usvg::Tree::from_str(svg, &opt).map_err(|e| Error::invalid(format!("svg: {e}")))?;
    let size = tree.size().to_int_size();
    let mut pixmap = resvg::tiny_skia::Pixmap::new(size.width(), size.height())
        .ok_or_else(|| Error::invalid("empty plot canvas"))?;
    resvg::render(&tree, resvg::tiny_skia::Transform::default(), &mut pixmap.as_mut());
    let img = image::RgbaImage::from_raw(size.width(), size.height(), pixmap.data().to_vec())
        .ok_or_else(|| Error::invalid("plot buffer size mismatch"))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Files written by [`render_tradeoff_plot`].
#[derive(Debug, Clone)]
pub struct PlotFiles {
    pub svg: PathBuf,
    pub png: PathBuf,
    pub csv: PathBuf,
    pub points: usize,
}

/// Write `<stem>.svg`, `<stem>.png` and `<stem>.csv` into `dir`.
pub fn render_tradeoff_plot(
    rows: &[AggregateRow],
    metric: Metric,
    scope: Scope,
    dir: &Path,
    stem: &str,
) -> Result<PlotFiles> {
    let points = tradeoff_points(rows, metric, scope);
    let title = format!("{} vs balanced accuracy ({})", metric.title(), scope.key());
    let svg = render_svg(&points, metric, &title)?;
    let files = PlotFiles {
        svg: dir.join(format!("{stem}.svg")),
        png: dir.join(format!("{stem}.png")),
        csv: dir.join(format!("{stem}.csv")),
        points: points.len(),
    };
    write_text(&files.svg, &svg)?;
    write_text(&files.csv, &points_csv(&points, metric))?;
    let png = svg_to_png(&svg)?;
    std::fs::write(&files.png, png).map_err(|e| Error::io(&files.png, e))?;
    Ok(files)
}
