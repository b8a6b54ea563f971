//! Dependency-free SVG scatter plots of particle ensembles.

use std::fmt::Write as _;
use std::path::Path;

use distill_core::score_fields::RingSpec;

use crate::config::PlotOptions;
use crate::error::CliError;

/// Maps data coordinates in `[-bounds, bounds]²` to pixels in `[0, size]²`, y up.
pub fn to_pixels(p: &[f64], bounds: f64, size: f64) -> (f64, f64) {
    ((p[0] + bounds) / (2.0 * bounds) * size, (bounds - p[1]) / (2.0 * bounds) * size)
}

fn panel(out: &mut String, positions: &[Vec<f64>], rings: Option<&RingSpec>, opts: &PlotOptions, title: Option<&str>) {
    let (b, s) = (opts.bounds, opts.panel_size);
    let _ = writeln!(out, r##"<rect class="frame" x="0" y="0" width="{s}" height="{s}" fill="#ffffff" stroke="#999999" stroke-width="0.5"/>"##);
    if let Some(spec) = rings {
        let (cx, cy) = to_pixels(&[0.0, 0.0], b, s);
        for &r in &spec.radii {
            let pr = r / (2.0 * b) * s;
            let _ = writeln!(
                out,
                r##"<circle class="ring" cx="{cx:.2}" cy="{cy:.2}" r="{pr:.2}" fill="none" stroke="#c0392b" stroke-width="0.6"/>"##
            );
        }
    }
    for p in positions {
        let (x, y) = to_pixels(p, b, s);
        let _ = writeln!(
            out,
            r##"<circle class="particle" cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="#1f4e79" fill-opacity="0.6"/>"##,
            opts.point_radius
        );
    }
    if let Some(t) = title {
        let _ = writeln!(out, r##"<text x="4" y="14" font-family="sans-serif" font-size="11" fill="#333333">{}</text>"##, escape(t));
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n{body}</svg>\n"
    )
}

pub fn render_ensemble(positions: &[Vec<f64>], rings: Option<&RingSpec>, opts: &PlotOptions, title: Option<&str>) -> String {
    let mut body = String::new();
    panel(&mut body, positions, rings, opts, title);
    document(opts.panel_size, opts.panel_size, &body)
}

/// Grid of panels: one row per entry of `rows`, one column per snapshot.
pub fn render_overview(rows: &[(String, Vec<(usize, Vec<Vec<f64>>)>)], rings: Option<&RingSpec>, opts: &PlotOptions) -> String {
    let s = opts.panel_size;
    let cols = rows.iter().map(|(_, snaps)| snaps.len()).max().unwrap_or(0);
    let mut body = String::new();
    for (i, (name, snaps)) in rows.iter().enumerate() {
        for (j, (tau, pos)) in snaps.iter().enumerate() {
            let _ = writeln!(body, r#"<g transform="translate({:.1},{:.1})">"#, j as f64 * s, i as f64 * s);
            panel(&mut body, pos, rings, opts, Some(&format!("{name} τ={tau}")));
            body.push_str("</g>\n");
        }
    }
    document(cols as f64 * s, rows.len() as f64 * s, &body)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<(), CliError> {
    std::fs::write(path, svg).map_err(|e| CliError::io(path, e))
}

pub fn plot_ensemble(
    positions: &[Vec<f64>],
    rings: Option<&RingSpec>,
    opts: &PlotOptions,
    title: Option<&str>,
    out_path: &Path,
) -> Result<(), CliError> {
    if let Some(p) = positions.iter().find(|p| p.len() != 2) {
        return Err(CliError::Validation(format!("plots need 2D points, got dimension {}", p.len())));
    }
    write_svg(out_path, &render_ensemble(positions, rings, opts, title))
}
