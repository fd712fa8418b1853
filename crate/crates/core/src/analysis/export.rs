//! CSV and SVG renderings of histograms.

use std::fmt::Write;

use super::Histogram;

/// `bin_start,bin_end,count` rows, one per bin.
pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_start,bin_end,count\n");
    for (i, count) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "{},{},{count}", h.edges[i], h.edges[i + 1]);
    }
    out
}

/// Paired histogram on shared edges: baseline in green, contended in red.
/// Both histograms must have identical edges.
pub fn histogram_svg(title: &str, baseline: &Histogram, contended: &Histogram) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    debug_assert_eq!(baseline.edges, contended.edges);
    let edges = &baseline.edges;
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let peak = baseline
        .counts
        .iter()
        .chain(&contended.counts)
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let x = |v: f64| PAD + (v - lo) / span * (W - 2.0 * PAD);
    let y = |c: u64| H - PAD - c as f64 / peak * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    for (h, colour) in [(baseline, "green"), (contended, "red")] {
        for (i, &c) in h.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let (x0, x1) = (x(edges[i]), x(edges[i + 1]));
            let top = y(c);
            let _ = writeln!(
                svg,
                r#"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{colour}" fill-opacity="0.5"/>"#,
                (x1 - x0).max(0.5),
                H - PAD - top
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD
    );
    for (v, anchor) in [(lo, "start"), (hi, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{v} ns</text>"#,
            x(v),
            H - PAD + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="green">isolation</text>"#,
        W - PAD - 120.0,
        PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="red">contended</text>"#,
        W - PAD - 120.0,
        PAD + 14.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
