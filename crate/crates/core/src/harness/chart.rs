//! CSV and SVG output for the UQ-versus-beta curve.

use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub beta: f64,
    pub uq: f64,
    pub rq: f64,
    pub sq: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("beta,UQ,RQ,SQ\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.beta, r.uq, r.rq, r.sq);
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn px(beta: f64) -> f64 {
    PAD + beta * (W - 2.0 * PAD)
}

fn py(v: f64) -> f64 {
    H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD)
}

/// Line chart with both axes spanning `[0, 1]`: UQ solid, RQ and SQ dashed.
pub fn curve_svg(rows: &[CurveRow], title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let (x, y) = (px(t), py(t));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{t:.1}</text>"##,
            py(0.0),
            py(1.0),
            py(0.0) + 16.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{t:.1}</text>"##,
            px(0.0),
            px(1.0),
            px(0.0) - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">beta</text>"#,
        W / 2.0,
        H - 10.0
    );
    let series: [(&str, &str, &str, fn(&CurveRow) -> f64); 3] = [
        ("UQ", "#1f77b4", "", |r| r.uq),
        ("RQ", "#2ca02c", r#" stroke-dasharray="4 3""#, |r| r.rq),
        ("SQ", "#d62728", r#" stroke-dasharray="2 3""#, |r| r.sq),
    ];
    for (k, (name, color, dash, get)) in series.iter().enumerate() {
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", px(r.beta), py(get(r)))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = PAD + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{name}</text>"#,
            W - PAD + 6.0
        );
    }
    for r in rows {
        let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"/>"##, px(r.beta), py(r.uq));
    }
    s.push_str("</svg>\n");
    s
}
