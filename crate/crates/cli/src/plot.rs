//! Minimal SVG line chart of aggregation time against projected dimension.

use std::fmt::Write as _;

use vladbuff_core::bench::BenchReport;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Points sorted by `d_prime`, with one-stddev error bars.
pub fn time_vs_dim(report: &BenchReport) -> String {
    let mut pts: Vec<_> = report.configs.iter().collect();
    pts.sort_by_key(|e| e.d_prime);
    let x_max = pts.iter().map(|e| e.d_prime as f64).fold(1.0, f64::max);
    let y_max = pts.iter().map(|e| e.mean_ms + e.stddev_ms).fold(0.0, f64::max).max(1e-9) * 1.1;
    let sx = |x: f64| LEFT + x / x_max * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - y / y_max * (H - TOP - BOTTOM);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = sy(v);
        writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, x0 - 6.0, y + 4.0).unwrap();
    }
    for e in &pts {
        let x = sx(e.d_prime as f64);
        writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, y0 + 16.0, e.d_prime).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">projected dimension D'</text>"#, (x0 + x1) / 2.0, H - 10.0).unwrap();
    writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">aggregation time (ms)</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0).unwrap();
    let path: Vec<String> = pts.iter().map(|e| format!("{:.1},{:.1}", sx(e.d_prime as f64), sy(e.mean_ms))).collect();
    writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" ")).unwrap();
    for e in &pts {
        let x = sx(e.d_prime as f64);
        let (lo, hi) = (sy((e.mean_ms - e.stddev_ms).max(0.0)), sy(e.mean_ms + e.stddev_ms));
        writeln!(s, r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="steelblue"/>"#).unwrap();
        writeln!(s, r#"<circle cx="{x:.1}" cy="{:.1}" r="4" fill="{}"><title>D'={} mean {:.3} ms</title></circle>"#, sy(e.mean_ms), if e.unstable { "orange" } else { "steelblue" }, e.d_prime, e.mean_ms).unwrap();
    }
    writeln!(s, r#"<text x="{x0}" y="18">{}</text>"#, escape(&report.environment)).unwrap();
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use vladbuff_core::bench::BenchEntry;

    #[test]
    fn one_marker_per_config() {
        let e = |d_prime, mean_ms| BenchEntry {
            d_prime,
            n: 8,
            c: 2,
            projected: true,
            threads: 1,
            mean_ms,
            stddev_ms: 0.1,
            runs: 30,
            unstable: false,
        };
        let r = BenchReport {
            configs: vec![e(64, 1.0), e(768, 5.0), e(192, 2.0)],
            environment: "a<b".into(),
        };
        let svg = time_vs_dim(&r);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
