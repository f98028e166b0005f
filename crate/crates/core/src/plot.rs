//! Minimal self-contained SVG output for heatmaps, scatter overlays and
//! categorical maps.

use std::fmt::Write as _;

use crate::analysis::{DecisionMap, Grid};
use crate::Point;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const PANEL: f64 = 320.0;
const MARGIN: f64 = 30.0;
// Heatmaps are drawn on at most this many cells per axis.
const MAX_CELLS: usize = 101;

pub fn category_color(k: usize) -> &'static str {
    PALETTE[k % PALETTE.len()]
}

/// Sequential color ramp on `t` in [0, 1] (dark blue to yellow).
pub fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let lerp = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

/// Incrementally built SVG document.
pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{fill}" stroke="{stroke}" stroke-width="0.8"/>"#
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, content: &str) {
        let escaped = content.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size}">{escaped}</text>"#
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n",
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}

/// Maps data coordinates of a square grid into one panel.
struct Panel {
    x0: f64,
    y0: f64,
    lo: f64,
    hi: f64,
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.lo) / (self.hi - self.lo) * PANEL
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + PANEL - (y - self.lo) / (self.hi - self.lo) * PANEL
    }
}

// Grid indices drawn along one axis, thinned to at most MAX_CELLS.
fn thinned(res: usize) -> (Vec<usize>, f64) {
    let stride = res.div_ceil(MAX_CELLS).max(1);
    let idx: Vec<usize> = (0..res).step_by(stride).collect();
    let cell = PANEL / idx.len() as f64;
    (idx, cell)
}

fn cell_fill(svg: &mut Svg, grid: &Grid, panel: &Panel, color: impl Fn(usize) -> String) {
    let (idx, cell) = thinned(grid.resolution);
    for (r, &row) in idx.iter().enumerate() {
        for (c, &col) in idx.iter().enumerate() {
            let fill = color(row * grid.resolution + col);
            let y = panel.y0 + PANEL - (r + 1) as f64 * cell;
            svg.rect(panel.x0 + c as f64 * cell, y, cell + 0.3, cell + 0.3, &fill);
        }
    }
}

/// A named set of points drawn over a heatmap.
pub struct Overlay<'a> {
    pub label: &'a str,
    pub points: &'a [Point],
}

/// Heatmap of `values` (row-major over `grid`, normalized to their range)
/// with scatter overlays in categorical colors.
pub fn heatmap_with_points(title: &str, grid: &Grid, values: &[f64], overlays: &[Overlay]) -> String {
    let legend_h = 18.0 * overlays.len() as f64;
    let mut svg = Svg::new(PANEL + 2.0 * MARGIN + 160.0, PANEL + 2.0 * MARGIN + legend_h.max(0.0));
    svg.text(MARGIN, MARGIN - 10.0, 14.0, title);
    let panel = Panel {
        x0: MARGIN,
        y0: MARGIN,
        lo: grid.lo,
        hi: grid.hi,
    };
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (vmin, vmax) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };
    cell_fill(&mut svg, grid, &panel, |i| ramp((values[i] - vmin) / span));
    for (k, o) in overlays.iter().enumerate() {
        let color = category_color(k);
        for p in o.points {
            if p.len() >= 2 && (grid.lo..=grid.hi).contains(&p[0]) && (grid.lo..=grid.hi).contains(&p[1]) {
                svg.circle(panel.px(p[0]), panel.py(p[1]), 3.5, color, "black");
            }
        }
        let ly = MARGIN + 12.0 + 18.0 * k as f64;
        svg.circle(PANEL + MARGIN + 20.0, ly - 4.0, 5.0, color, "black");
        svg.text(PANEL + MARGIN + 30.0, ly, 12.0, o.label);
    }
    svg.finish()
}

/// Side-by-side categorical panels of PF-ODE destination modes.
pub fn decision_panels(maps: &[DecisionMap]) -> String {
    let n = maps.len().max(1) as f64;
    let mut svg = Svg::new(n * (PANEL + MARGIN) + MARGIN, PANEL + 2.0 * MARGIN + 10.0);
    for (i, m) in maps.iter().enumerate() {
        let panel = Panel {
            x0: MARGIN + i as f64 * (PANEL + MARGIN),
            y0: MARGIN,
            lo: m.grid.lo,
            hi: m.grid.hi,
        };
        cell_fill(&mut svg, &m.grid, &panel, |c| match m.ode_mode[c] {
            Some(k) => category_color(k).to_string(),
            None => "#808080".to_string(),
        });
        svg.text(
            panel.x0,
            MARGIN - 10.0,
            13.0,
            &format!("sigma_t = {} (agreement {:.4})", m.sigma_t, m.agreement),
        );
    }
    svg.finish()
}
