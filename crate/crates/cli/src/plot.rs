//! Minimal SVG line charts for run logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use repdib::metrics::{coverage_curve, parse_trajectory};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

/// Polyline chart of `points` with axis extents and labels.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if points.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for (v, anchor, x, y) in [
        (x0, "start", PAD, H - PAD + 16.0),
        (x1, "end", W - PAD, H - PAD + 16.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{}</text>"#, fmt_tick(v));
    }
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, y + 4.0, fmt_tick(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    if !points.is_empty() {
        let mut d = String::new();
        for (i, &(x, y)) in points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, d.trim_end());
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 100.0).round() / 100.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `(x, y)` pairs from two named columns of a CSV file; rows with an empty
/// `y` are skipped.
fn csv_columns(path: &Path, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .with_context(|| format!("{} has no column `{name}`; columns: {}", path.display(), header.join(", ")))
    };
    let (xi, yi) = (find(x)?, find(y)?);
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            bail!("{}:{}: expected {} fields", path.display(), n + 2, header.len());
        }
        if f[yi].is_empty() {
            continue;
        }
        out.push((f[xi].parse()?, f[yi].parse()?));
    }
    Ok(out)
}

/// Mean evaluation return per evaluation frame.
pub fn eval_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut by_frame: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (frame, ret) in csv_columns(path, "frame", "return")? {
        let e = by_frame.entry(frame as u64).or_default();
        e.0 += ret;
        e.1 += 1;
    }
    Ok(by_frame.into_iter().map(|(f, (s, n))| (f as f64, s / n as f64)).collect())
}

/// Charts for the run in `dir`: one metrics column, the evaluation curve
/// and pretraining coverage.
pub fn plot_run(dir: &Path, column: &str, force: bool) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: String, svg: String| -> Result<()> {
        let path = dir.join(name);
        crate::write_new(&path, &svg, force)?;
        written.push(path);
        Ok(())
    };

    let metrics = csv_columns(&dir.join("metrics.csv"), "step", column)?;
    emit(format!("metrics_{column}.svg"), line_chart(column, "frame", column, &metrics))?;

    let eval = eval_curve(&dir.join("eval.csv"))?;
    emit("eval.svg".into(), line_chart("evaluation return", "frame", "mean return", &eval))?;

    let rows = parse_trajectory(BufReader::new(File::open(dir.join("trajectory.csv"))?))?;
    let curve: Vec<(f64, f64)> = coverage_curve(&rows)
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64, c))
        .collect();
    emit("coverage.svg".into(), line_chart("pretraining coverage", "logged step", "fraction of cells", &curve))?;
    Ok(written)
}
