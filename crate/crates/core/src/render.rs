//! SVG overlays of selected regions on the analysis grid.

use std::fmt::Write as _;

use crate::candidates::Source;
use crate::geometry::GridSpec;
use crate::trace::Insertion;

/// Stroke colours by selection rank: red, purple and blue for the first three picks, then
/// orange, green, brown, pink, grey, olive and cyan, repeating.
pub const PALETTE: [&str; 10] =
    ["#d62728", "#9467bd", "#1f77b4", "#ff7f0e", "#2ca02c", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

pub fn rank_color(rank: usize) -> &'static str {
    PALETTE[rank % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grid lines over the image, plus one ranked rectangle with a source badge per region of
/// `insertion`.
pub fn render_svg(grid: &GridSpec, image_href: Option<&str>, insertion: Option<&Insertion>) -> String {
    let (w, h) = (grid.width, grid.height);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    if let Some(href) = image_href {
        let href = escape(href);
        let _ = writeln!(out, r#"  <image href="{href}" xlink:href="{href}" x="0" y="0" width="{w}" height="{h}"/>"#);
    }
    let _ = writeln!(out, r##"  <g class="grid" stroke="#ffffff" stroke-opacity="0.6" stroke-width="1">"##);
    let g = grid.grid_size;
    for i in 1..g {
        let x = grid.cell_bbox(0, i).expect("cell in range").x0;
        let y = grid.cell_bbox(i, 0).expect("cell in range").y0;
        let _ = writeln!(out, r#"    <line x1="{x}" y1="0" x2="{x}" y2="{h}"/>"#);
        let _ = writeln!(out, r#"    <line x1="0" y1="{y}" x2="{w}" y2="{y}"/>"#);
    }
    let _ = writeln!(out, "  </g>");
    if let Some(ins) = insertion {
        for (rank, (region, source)) in ins.regions.iter().zip(&ins.sources).enumerate() {
            let b = region.bbox;
            let color = rank_color(rank);
            let badge = match source {
                Source::Attention => "attn",
                Source::Exploratory => "exp",
            };
            let _ = writeln!(
                out,
                r#"  <rect class="region" data-rank="{}" data-source="{badge}" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                rank + 1,
                b.x0,
                b.y0,
                b.x1 - b.x0,
                b.y1 - b.y0
            );
            let _ = writeln!(
                out,
                r#"  <text class="badge" x="{}" y="{}" font-family="sans-serif" font-size="10" fill="{color}">{} {badge}</text>"#,
                b.x0 + 2,
                b.y0 + 11,
                rank + 1
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
