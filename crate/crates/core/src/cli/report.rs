//! SVG figures from score tables: RMSE by lead time, RMSE by landcover, and a
//! cube × landcover RMSE grid per table.

use std::fmt::Write;

use crate::evaluation::ScoreTable;
use crate::minicube::{Landcover, STEP_DAYS};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn header(out: &mut String, width: f64, height: f64, title: &str, hashes: &[&str]) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#);
    let _ = writeln!(out, "<metadata>config_hash: {}</metadata>", hashes.join(","));
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, width / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(out, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.3}</text>"#,
            x0 - 4.0
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{x_label}</text>"#, (x0 + x1) / 2.0, H - 16.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

fn empty_note(out: &mut String) {
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">no scored pixels</text>"#, W / 2.0, H / 2.0);
}

fn legend(out: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, W - MARGIN - 150.0, y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(out, r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="11">{}</text>"#, W - MARGIN - 135.0, escape(n));
    }
}

fn label(t: &ScoreTable) -> String {
    if t.shuffled {
        format!("{} (shuffled)", t.model_id)
    } else {
        t.model_id.clone()
    }
}

/// Pooled RMSE per lead time, one polyline per table.
pub fn horizon_svg(tables: &[ScoreTable]) -> String {
    let hashes: Vec<&str> = tables.iter().map(|t| t.config_hash.as_str()).collect();
    let mut out = String::new();
    header(&mut out, W, H, "RMSE by lead time", &hashes);
    let steps = tables.iter().map(|t| t.horizon_rmse.len()).max().unwrap_or(0);
    let y_max = tables.iter().flat_map(|t| t.horizon_rmse.iter().flatten()).fold(0.0f64, |a, &b| a.max(b));
    axes(&mut out, "lead time (days)", "RMSE", if y_max > 0.0 { y_max * 1.1 } else { 1.0 });
    if steps == 0 || y_max == 0.0 {
        empty_note(&mut out);
    }
    let y_top = if y_max > 0.0 { y_max * 1.1 } else { 1.0 };
    let x = |k: usize| MARGIN + (W - 2.0 * MARGIN) * (k as f64 + 0.5) / steps.max(1) as f64;
    let y = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * v / y_top;
    for k in (0..steps).step_by(steps.div_ceil(10).max(1)) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            x(k),
            H - MARGIN + 14.0,
            (k + 1) * STEP_DAYS
        );
    }
    for (i, t) in tables.iter().enumerate() {
        let pts: Vec<String> =
            t.horizon_rmse.iter().enumerate().filter_map(|(k, v)| v.map(|v| format!("{:.2},{:.2}", x(k), y(v)))).collect();
        if !pts.is_empty() {
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, pts.join(" "), PALETTE[i % PALETTE.len()]);
        }
    }
    legend(&mut out, &tables.iter().map(label).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bars of per-landcover RMSE.
pub fn landcover_svg(tables: &[ScoreTable]) -> String {
    let hashes: Vec<&str> = tables.iter().map(|t| t.config_hash.as_str()).collect();
    let mut out = String::new();
    header(&mut out, W, H, "RMSE by landcover", &hashes);
    let mut classes: Vec<Landcover> = tables.iter().flat_map(|t| t.per_landcover.iter().map(|l| l.landcover)).collect();
    classes.sort();
    classes.dedup();
    let y_max = tables.iter().flat_map(|t| t.per_landcover.iter().map(|l| l.metrics.rmse)).fold(0.0f64, f64::max);
    let y_top = if y_max > 0.0 { y_max * 1.1 } else { 1.0 };
    axes(&mut out, "landcover", "RMSE", y_top);
    if classes.is_empty() {
        empty_note(&mut out);
    }
    let group = (W - 2.0 * MARGIN) / classes.len().max(1) as f64;
    let bar = group * 0.8 / tables.len().max(1) as f64;
    for (g, lc) in classes.iter().enumerate() {
        let gx = MARGIN + group * g as f64 + group * 0.1;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            H - MARGIN + 14.0,
            lc.name()
        );
        for (i, t) in tables.iter().enumerate() {
            if let Some(l) = t.per_landcover.iter().find(|l| l.landcover == *lc) {
                let h = (H - 2.0 * MARGIN) * l.metrics.rmse / y_top;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    gx + bar * i as f64,
                    H - MARGIN - h,
                    bar,
                    h,
                    PALETTE[i % PALETTE.len()]
                );
            }
        }
    }
    legend(&mut out, &tables.iter().map(label).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Heat grid of RMSE, one row per minicube and one column per landcover class.
pub fn score_grid_svg(table: &ScoreTable) -> String {
    let mut cubes: Vec<&str> = table.rows.iter().map(|r| r.cube_id.as_str()).collect();
    cubes.dedup();
    let mut classes: Vec<Landcover> = table.rows.iter().map(|r| r.landcover).collect();
    classes.sort();
    classes.dedup();
    let cell = 14.0;
    let left = 200.0;
    let width = left + cell * classes.len() as f64 + 20.0;
    let height = 80.0 + cell * cubes.len() as f64;
    let mut out = String::new();
    header(&mut out, width.max(320.0), height.max(120.0), &format!("RMSE grid: {}", label(table)), &[&table.config_hash]);
    if table.rows.is_empty() {
        let _ = writeln!(out, r#"<text x="160" y="70" font-family="sans-serif" font-size="14" text-anchor="middle">no scored pixels</text>"#);
    }
    let max = table.rows.iter().map(|r| r.metrics.rmse).fold(0.0f64, f64::max).max(1e-12);
    for (j, lc) in classes.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="56" font-family="sans-serif" font-size="9" text-anchor="middle">{}</text>"#,
            left + cell * (j as f64 + 0.5),
            &lc.name()[..3]
        );
    }
    for (i, cube) in cubes.iter().enumerate() {
        let y = 64.0 + cell * i as f64;
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="9" text-anchor="end">{}</text>"#, left - 4.0, y + cell * 0.75, escape(cube));
        for r in table.rows.iter().filter(|r| r.cube_id == *cube) {
            let j = classes.iter().position(|c| *c == r.landcover).expect("class listed");
            let shade = (255.0 * (1.0 - r.metrics.rmse / max)).round().clamp(0.0, 255.0) as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="rgb(255,{shade},{shade})"><title>{:.4}</title></rect>"#,
                left + cell * j as f64,
                r.metrics.rmse
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{aggregate, Metrics, PixelScore};

    fn table(id: &str) -> ScoreTable {
        let s = |cube: &str, lc, rmse| PixelScore {
            cube_id: cube.into(),
            pixel: 0,
            landcover: lc,
            metrics: Metrics { r2: 0.5, rmse, nse: 0.1, abs_bias: 0.01 },
            valid_target: 12,
            valid_context: 5,
        };
        let mut t = aggregate(id, "abc", &[s("a", Landcover::Forest, 0.1), s("b", Landcover::Cropland, 0.2)]);
        t.horizon_rmse = vec![Some(0.1), Some(0.15), None, Some(0.2)];
        t
    }

    #[test]
    fn one_curve_per_table() {
        let svg = horizon_svg(&[table("m1"), table("m2")]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("config_hash: abc,abc"));
        assert_eq!(svg, horizon_svg(&[table("m1"), table("m2")]));
    }

    #[test]
    fn empty_tables_render_a_note() {
        let empty = aggregate("m", "h", &[]);
        assert!(horizon_svg(std::slice::from_ref(&empty)).contains("no scored pixels"));
        assert!(landcover_svg(std::slice::from_ref(&empty)).contains("no scored pixels"));
        assert!(score_grid_svg(&empty).contains("no scored pixels"));
    }

    #[test]
    fn bars_and_cells_match_rows() {
        let t = table("m");
        assert_eq!(landcover_svg(std::slice::from_ref(&t)).matches("<rect x").count(), 2 + 1);
        assert_eq!(score_grid_svg(&t).matches("<title>").count(), 2);
    }
}
