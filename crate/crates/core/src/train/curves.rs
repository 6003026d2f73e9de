//! Static SVG line charts for training logs. The CSV stays the source of
//! truth; the chart is a quick look.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 48.0;
/// Columns that are bookkeeping rather than curves.
const SKIPPED: &[&str] = &["wall_ms"];

#[derive(Clone, Debug, PartialEq)]
pub struct LogColumns {
    pub x_name: String,
    pub x: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

/// Reads a training or validation log: the first column is the x axis.
pub fn read_log_columns(path: &Path) -> Result<LogColumns> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 2 {
        return Err(Error::Validation(format!(
            "{}: need an x column and at least one series",
            path.display()
        )));
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Validation(format!(
                    "{}: row {}: {:?} is not a number",
                    path.display(),
                    row + 1,
                    field
                ))
            })?;
            cols[c].push(v);
        }
    }
    let x = cols.remove(0);
    let series = headers[1..]
        .iter()
        .cloned()
        .zip(cols)
        .filter(|(n, _)| !SKIPPED.contains(&n.as_str()))
        .collect();
    Ok(LogColumns {
        x_name: headers[0].clone(),
        x,
        series,
    })
}

fn range(v: &[f64]) -> (f64, f64) {
    let lo = v
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::INFINITY, f64::min);
    let hi = v
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    match (lo.is_finite(), hi > lo) {
        (false, _) => (0.0, 1.0),
        (true, false) => (lo - 0.5, lo + 0.5),
        (true, true) => (lo, hi),
    }
}

/// One stacked panel per series, each with its own y range.
pub fn render_svg(cols: &LogColumns) -> String {
    let n = cols.series.len().max(1) as f64;
    let width = PANEL_W + 2.0 * MARGIN;
    let height = n * (PANEL_H + MARGIN) + MARGIN;
    let (x0, x1) = range(&cols.x);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (name, ys)) in cols.series.iter().enumerate() {
        let top = MARGIN + i as f64 * (PANEL_H + MARGIN);
        let (y0, y1) = range(ys);
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * PANEL_W;
        let py = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#999"/>"##
        );
        let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}">{name}</text>"#, top - 6.0);
        let _ = writeln!(s, r#"<text x="4" y="{}">{y1:.3}</text>"#, top + 10.0);
        let _ = writeln!(s, r#"<text x="4" y="{}">{y0:.3}</text>"#, top + PANEL_H);
        let points: Vec<String> = cols
            .x
            .iter()
            .zip(ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.2" points="{}"/>"##,
            points.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">{} ({x0} to {x1})</text>"#,
        MARGIN,
        height - 12.0,
        cols.x_name
    );
    s.push_str("</svg>\n");
    s
}

/// Writes the chart to `svg` and a copy of the log beside it (same stem,
/// `.csv`) unless that would overwrite the log itself. Returns the CSV path.
pub fn emit_curves(log: &Path, svg: &Path) -> Result<PathBuf> {
    let cols = read_log_columns(log)?;
    if let Some(dir) = svg.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = std::fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let mut chart = render_svg(&cols);
    if let Some(h) = text.lines().find_map(|l| l.strip_prefix("# config_hash:")) {
        chart = chart.replacen('\n', &format!("\n<!-- config_hash: {} -->\n", h.trim()), 1);
    }
    std::fs::write(svg, chart).map_err(|e| Error::io(svg, e))?;
    let csv = svg.with_extension("csv");
    let same = match (log.canonicalize(), csv.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if !same {
        std::fs::copy(log, &csv).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(csv)
}
