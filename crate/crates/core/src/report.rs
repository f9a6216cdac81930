//! CSV and minimal SVG report emission. All CSVs are header-first with a
//! fixed column order; writes are atomic.

use crate::blob::atomic_write;
use crate::error::Result;
use std::path::Path;

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Single-series line chart (used for loss curves).
pub fn write_svg_line(path: &Path, title: &str, ys: &[f64]) -> Result<()> {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let n = ys.len().max(2);
    let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let ymax = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(ymin + 1e-9);
    let sx = (w - 2.0 * pad) / (n - 1) as f64;
    let sy = (h - 2.0 * pad) / (ymax - ymin);
    let points: Vec<String> = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| format!("{:.2},{:.2}", pad + i as f64 * sx, h - pad - (y - ymin) * sy))
        .collect();
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>",
            "<text x=\"{pad}\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{title}</text>",
            "<text x=\"{pad}\" y=\"{ytop}\" font-family=\"monospace\" font-size=\"10\">{ymax:.4}</text>",
            "<text x=\"{pad}\" y=\"{ybot}\" font-family=\"monospace\" font-size=\"10\">{ymin:.4}</text>",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{pts}\"/>",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        title = title,
        ytop = pad - 4.0,
        ybot = h - pad + 14.0,
        ymax = ymax,
        ymin = ymin,
        pts = points.join(" ")
    );
    atomic_write(path, svg.as_bytes())
}

/// Grouped bar chart over labeled value triples (fusion coefficients).
pub fn write_svg_bars(path: &Path, title: &str, labels: &[String], triples: &[[f64; 3]]) -> Result<()> {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let groups = triples.len().max(1);
    let group_w = (w - 2.0 * pad) / groups as f64;
    let bar_w = (group_w * 0.8) / 3.0;
    let colors = ["#c44e52", "#55a868", "#4c72b0"];
    let mut bars = String::new();
    for (g, t) in triples.iter().enumerate() {
        for (k, &v) in t.iter().enumerate() {
            let bh = v.clamp(0.0, 1.0) * (h - 2.0 * pad);
            let x = pad + g as f64 * group_w + k as f64 * bar_w + group_w * 0.1;
            bars.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                x,
                h - pad - bh,
                bar_w * 0.9,
                bh,
                colors[k]
            ));
        }
        if let Some(label) = labels.get(g) {
            bars.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"10\">{}</text>",
                pad + g as f64 * group_w + group_w * 0.1,
                h - pad + 14.0,
                label
            ));
        }
    }
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>",
            "<text x=\"{pad}\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{title}</text>",
            "{bars}",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        title = title,
        bars = bars
    );
    atomic_write(path, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_is_header_first_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            vec!["1".to_string(), "0.5".to_string()],
            vec!["2".to_string(), "0.25".to_string()],
        ];
        write_csv(&path, &["step", "loss"], &rows).unwrap();
        let a = std::fs::read(&path).unwrap();
        write_csv(&path, &["step", "loss"], &rows).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("step,loss\n1,0.5\n"));
    }

    #[test]
    fn svg_emitters_produce_wellformed_documents() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("loss.svg");
        write_svg_line(&lp, "loss", &[1.0, 0.5, 0.4, 0.3]).unwrap();
        let text = std::fs::read_to_string(&lp).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));

        let bp = dir.path().join("bars.svg");
        write_svg_bars(
            &bp,
            "coefficients",
            &["img0".into()],
            &[[0.2, 0.5, 0.3]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&bp).unwrap();
        assert!(text.contains("<rect") && text.trim_end().ends_with("</svg>"));
    }
}
