//! Learning curves: mean across seeds with a min/max band, rendered as SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::metrics::read_rows;

/// Aggregate over seeds at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

/// Combines per-seed `(step, return)` series. Steps missing from some seeds
/// are aggregated over the seeds that have them.
pub fn aggregate(label: &str, runs: &[Vec<(u64, f64)>]) -> Curve {
    let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for &(s, v) in run {
            by_step.entry(s).or_default().push(v);
        }
    }
    let points = by_step
        .into_iter()
        .map(|(step, vs)| CurvePoint {
            step,
            mean: vs.iter().sum::<f64>() / vs.len() as f64,
            min: vs.iter().copied().fold(f64::INFINITY, f64::min),
            max: vs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            seeds: vs.len(),
        })
        .collect();
    Curve {
        label: label.to_string(),
        points,
    }
}

/// Reads one evaluation CSV per seed.
pub fn load_curve(label: &str, paths: &[&Path]) -> Result<Curve> {
    let mut runs = Vec::with_capacity(paths.len());
    for p in paths {
        let rows = read_rows(p)?;
        runs.push(rows.iter().map(|r| (r.step, r.episode_reward)).collect());
    }
    Ok(aggregate(label, &runs))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG with one mean polyline and one shaded band per curve.
pub fn render_svg(title: &str, curves: &[Curve]) -> Result<String> {
    let pts: Vec<&CurvePoint> = curves.iter().flat_map(|c| &c.points).collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let (w, h, m) = (640.0, 400.0, 50.0);
    let x0 = pts.iter().map(|p| p.step).min().expect("points") as f64;
    let x1 = pts.iter().map(|p| p.step).max().expect("points") as f64;
    let y0 = pts.iter().map(|p| p.min).fold(f64::INFINITY, f64::min);
    let y1 = pts.iter().map(|p| p.max).fold(f64::NEG_INFINITY, f64::max);
    let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{m}" y="{}" font-family="sans-serif" font-size="11">{x0}</text><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{x1}</text>"#,
        h - m + 16.0,
        w - m,
        h - m + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{y0:.1}</text><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{y1:.1}</text>"#,
        m - 4.0,
        h - m,
        m - 4.0,
        m + 4.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.max)));
        let lower = c
            .points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.min)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            w - m - 120.0,
            m + 16.0 * (i as f64 + 1.0),
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(path: &Path, title: &str, curves: &[Curve]) -> Result<()> {
    let svg = render_svg(title, curves)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}
