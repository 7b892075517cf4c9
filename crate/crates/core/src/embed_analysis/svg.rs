//! Minimal static SVG plots. Output depends only on the inputs, so reruns are
//! byte-identical.

use std::fmt::Write;

use ndarray::Array2;

use super::EmbeddingMatrix;

const PALETTE: [&str; 16] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// t-SNE layout: filled circles for training subjects, crosses for unseen
/// ones, colour by profile code.
pub fn scatter_svg(e: &EmbeddingMatrix, y: &Array2<f64>, title: &str) -> String {
    let (w, h, pad) = (640.0, 520.0, 50.0);
    let range = |k: usize| {
        let col = y.column(k);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo - 0.05 * span, span * 1.1)
    };
    let ((x0, xs), (y0, ys)) = (range(0), range(1));
    let plot_w = w - 2.0 * pad - 120.0;
    let plot_h = h - 2.0 * pad;
    let px = |v: f64| pad + (v - x0) / xs * plot_w;
    let py = |v: f64| h - pad - (v - y0) / ys * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{pad}" y="25" font-size="15">{}</text>"#, escape(title));
    let _ = writeln!(
        out,
        r##"<rect x="{pad}" y="{pad}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#999"/>"##
    );
    for i in 0..e.len() {
        let colour = PALETTE[e.profiles[i].index()];
        let (cx, cy) = (px(y[[i, 0]]), py(y[[i, 1]]));
        if e.unseen[i] {
            let _ = writeln!(
                out,
                r#"<path d="M{:.2},{:.2}l10,10m0,-10l-10,10" stroke="{colour}" stroke-width="2.5"><title>{} (unseen)</title></path>"#,
                cx - 5.0,
                cy - 5.0,
                escape(&e.row_ids[i])
            );
        } else {
            let _ = writeln!(
                out,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="5" fill="{colour}" fill-opacity="0.8"><title>{}</title></circle>"#,
                escape(&e.row_ids[i])
            );
        }
    }
    let mut codes: Vec<_> = e.profiles.to_vec();
    codes.sort();
    codes.dedup();
    let lx = w - pad - 100.0;
    let _ = writeln!(out, r#"<text x="{lx}" y="{}">code (d s m a)</text>"#, pad);
    for (k, code) in codes.iter().enumerate() {
        let ly = pad + 18.0 * (k as f64 + 1.0);
        let _ = writeln!(
            out,
            r#"<circle cx="{}" cy="{}" r="5" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            lx + 5.0,
            ly - 4.0,
            PALETTE[code.index()],
            lx + 15.0,
            ly,
            code.label()
        );
    }
    let ly = pad + 18.0 * (codes.len() as f64 + 2.0);
    let _ = writeln!(
        out,
        r##"<path d="M{},{}l10,10m0,-10l-10,10" stroke="#333" stroke-width="2.5"/><text x="{}" y="{}">unseen</text>"##,
        lx,
        ly - 9.0,
        lx + 15.0,
        ly
    );
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub bars: Vec<Bar>,
}

/// Grouped bar chart of values in `[0, y_max]`; series are coloured by their
/// position within each group.
pub fn bar_chart(title: &str, groups: &[BarGroup], y_max: f64) -> String {
    let series = groups.iter().map(|g| g.bars.len()).max().unwrap_or(0).max(1);
    let (pad, bar_w, gap) = (50.0, 28.0, 24.0);
    let group_w = bar_w * series as f64 + gap;
    let w = 2.0 * pad + group_w * groups.len().max(1) as f64 + 140.0;
    let h = 360.0;
    let plot_h = h - 2.0 * pad - 20.0;
    let base = h - pad - 20.0;
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{pad}" y="25" font-size="15">{}</text>"#, escape(title));
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let yy = base - plot_h * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{pad}" x2="{}" y1="{yy:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            w - pad - 140.0,
            pad - 5.0,
            yy + 4.0
        );
    }
    for (gi, g) in groups.iter().enumerate() {
        let gx = pad + gap / 2.0 + group_w * gi as f64;
        for (bi, bar) in g.bars.iter().enumerate() {
            let v = if bar.value.is_finite() {
                bar.value.clamp(0.0, y_max)
            } else {
                0.0
            };
            let bh = plot_h * v / y_max;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{}" height="{:.2}" fill="{}"><title>{} {}: {:.4}</title></rect>"#,
                gx + bar_w * bi as f64,
                base - bh,
                bar_w - 2.0,
                bh,
                PALETTE[bi % PALETTE.len()],
                escape(&g.label),
                escape(&bar.label),
                bar.value
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + bar_w * series as f64 / 2.0,
            base + 16.0,
            escape(&g.label)
        );
    }
    if let Some(first) = groups.iter().max_by_key(|g| g.bars.len()) {
        let lx = w - pad - 120.0;
        for (bi, bar) in first.bars.iter().enumerate() {
            let ly = pad + 18.0 * bi as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                ly,
                PALETTE[bi % PALETTE.len()],
                lx + 15.0,
                ly + 9.0,
                escape(&bar.label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
