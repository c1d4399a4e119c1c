use std::fmt::Write;
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::run::{CliResult, Failure, Plot};

#[derive(Debug, Deserialize)]
struct ResultFile {
    command: String,
    #[serde(default)]
    summary: Value,
    points: Vec<Value>,
    assertions: Vec<AssertionRow>,
    #[serde(default)]
    plots: Vec<Plot>,
}

#[derive(Debug, Deserialize)]
struct AssertionRow {
    name: String,
    passed: bool,
    #[serde(default)]
    detail: String,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn series(points: &[Value], x: &str, y: &str) -> Vec<(f64, f64)> {
    points
        .iter()
        .filter_map(|p| Some((p.get(x)?.as_f64()?, p.get(y)?.as_f64()?)))
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .collect()
}

/// One polyline per `y` column, points in the order given.
fn render(plot: &Plot, points: &[Value]) -> Option<String> {
    let lines: Vec<(String, Vec<(f64, f64)>)> = plot
        .y
        .iter()
        .map(|y| (y.clone(), series(points, &plot.x, y)))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    if lines.is_empty() {
        return None;
    }
    let all = lines.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<polyline points="{m},{m} {m},{b} {r},{b}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="14">{}</text>"#,
        MARGIN,
        MARGIN / 2.0,
        plot.name
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{} [{x0:.4}, {x1:.4}]</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0,
        plot.x
    );
    for (k, (name, pts)) in lines.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"><title>{name}</title></polyline>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name} [{y0:.4}, {y1:.4}]</text>"#,
            WIDTH - 2.0 * MARGIN - 80.0,
            MARGIN / 2.0 + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn summary_table(r: &ResultFile) -> String {
    let mut s = format!("# {}\n\n| assertion | result | detail |\n|---|---|---|\n", r.command);
    for a in &r.assertions {
        let _ = writeln!(
            s,
            "| {} | {} | {} |",
            a.name,
            if a.passed { "pass" } else { "FAIL" },
            a.detail
        );
    }
    if r.assertions.is_empty() {
        s.push_str("| (none) | | |\n");
    }
    let _ = write!(
        s,
        "\n```json\n{}\n```\n",
        serde_json::to_string_pretty(&r.summary).unwrap_or_default()
    );
    s
}

/// Renders `run_dir/result.json` into `out_dir`: one SVG per plot and
/// `summary.md`. No SVG is written when there are no points.
pub fn report(run_dir: &Path, out_dir: &Path) -> CliResult<Value> {
    let path = run_dir.join("result.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::at(&path, e))?;
    let r: ResultFile = serde_json::from_str(&text).map_err(|e| Failure::at(&path, e))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Failure::at(out_dir, e))?;
    let mut svgs = Vec::new();
    if !r.points.is_empty() {
        for plot in &r.plots {
            if let Some(svg) = render(plot, &r.points) {
                let name = format!("{}.svg", plot.name);
                let p = out_dir.join(&name);
                std::fs::write(&p, svg).map_err(|e| Failure::at(&p, e))?;
                svgs.push(name);
            }
        }
    }
    let p = out_dir.join("summary.md");
    std::fs::write(&p, summary_table(&r)).map_err(|e| Failure::at(&p, e))?;
    Ok(json!({
        "command": r.command,
        "svgs": svgs,
        "assertions": r.assertions.iter().map(|a| json!({"name": a.name, "passed": a.passed})).collect::<Vec<_>>(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_skips_missing_columns() {
        let plot = Plot::new("p", "x", &["y", "z"]);
        let pts = vec![json!({"x": 0, "y": 1.0}), json!({"x": 1, "y": null})];
        let svg = render(&plot, &pts).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(render(&Plot::new("p", "x", &["w"]), &pts).is_none());
    }
}
