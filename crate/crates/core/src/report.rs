//! SVG rendering of map sets: four panels with fixed color scales and bars.
//!
//! Scales: HA and E2A use a cyclic hue wheel over [-90, 90] degrees (so the
//! two ends share a color), MD a black-red-yellow-white ramp over
//! [0, 2.5e-3] mm^2/s, FA grayscale over [0, 1]. Masked-out pixels render as
//! the dark background. Output contains no timestamps: rendering the same
//! subject twice gives identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::Result;
use crate::maps::MapSet;

pub const MD_SCALE_MAX: f64 = 2.5e-3;

const PIXEL: usize = 3;
const PANEL_GAP: usize = 18;
const BAR_WIDTH: usize = 12;
const LABEL_H: usize = 16;
const FOOTER_H: usize = 18;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    ((r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
}

/// Cyclic angle colormap: -90 and +90 degrees map to the same hue.
fn angle_color(deg: f64) -> (u8, u8, u8) {
    let hue = (deg + 90.0) / 180.0 * 360.0;
    hsv_to_rgb(hue, 0.9, 0.95)
}

/// Black-red-yellow-white ramp on t in [0, 1].
fn hot_color(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let r = (t * 3.0).clamp(0.0, 1.0);
    let g = (t * 3.0 - 1.0).clamp(0.0, 1.0);
    let b = (t * 3.0 - 2.0).clamp(0.0, 1.0);
    ((r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
}

fn gray_color(t: f64) -> (u8, u8, u8) {
    let v = (t.clamp(0.0, 1.0) * 255.0) as u8;
    (v, v, v)
}

struct Panel<'a> {
    title: &'a str,
    img: &'a Array2<f64>,
    mask: &'a Array2<bool>,
    color: fn(f64) -> (u8, u8, u8),
    min: f64,
    max: f64,
    unit: &'a str,
}

fn panel_color(panel: &Panel, v: f64) -> (u8, u8, u8) {
    (panel.color)((v - panel.min) / (panel.max - panel.min))
}

fn render_panel(svg: &mut String, panel: &Panel, x0: usize, y0: usize) {
    let (rows, cols) = panel.img.dim();
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" fill=\"#ddd\" font-family=\"monospace\" font-size=\"12\">{} [{}]</text>",
        x0,
        y0 + 12,
        panel.title,
        panel.unit
    );
    let img_y = y0 + LABEL_H;
    let _ = write!(
        svg,
        "<rect x=\"{x0}\" y=\"{img_y}\" width=\"{}\" height=\"{}\" fill=\"#101010\"/>",
        cols * PIXEL,
        rows * PIXEL
    );
    for r in 0..rows {
        for c in 0..cols {
            if !panel.mask[(r, c)] {
                continue;
            }
            let (cr, cg, cb) = panel_color(panel, panel.img[(r, c)]);
            let _ = write!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{PIXEL}\" height=\"{PIXEL}\" fill=\"#{cr:02x}{cg:02x}{cb:02x}\"/>",
                x0 + c * PIXEL,
                img_y + r * PIXEL
            );
        }
    }
    // Color bar: 32 bands top (max) to bottom (min).
    let bar_x = x0 + cols * PIXEL + 4;
    let bar_h = rows * PIXEL;
    let bands = 32;
    for band in 0..bands {
        let t = 1.0 - (band as f64 + 0.5) / bands as f64;
        let (cr, cg, cb) = (panel.color)(t);
        let _ = write!(
            svg,
            "<rect x=\"{bar_x}\" y=\"{}\" width=\"{BAR_WIDTH}\" height=\"{}\" fill=\"#{cr:02x}{cg:02x}{cb:02x}\"/>",
            img_y + band * bar_h / bands,
            bar_h.div_ceil(bands)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" fill=\"#aaa\" font-family=\"monospace\" font-size=\"9\">{}</text>",
        bar_x + BAR_WIDTH + 2,
        img_y + 8,
        format_scale(panel.max)
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" fill=\"#aaa\" font-family=\"monospace\" font-size=\"9\">{}</text>",
        bar_x + BAR_WIDTH + 2,
        img_y + bar_h,
        format_scale(panel.min)
    );
}

fn format_scale(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.0}")
    }
}

/// Render the four maps into an SVG document.
pub fn render_map_set(maps: &MapSet, footer: &str) -> String {
    let (rows, cols) = maps.mask.dim();
    let panel_w = cols * PIXEL + 4 + BAR_WIDTH + 36;
    let panel_h = rows * PIXEL + LABEL_H;
    let width = 2 * panel_w + PANEL_GAP;
    let height = 2 * panel_h + PANEL_GAP + FOOTER_H;

    let panels = [
        Panel {
            title: "HA",
            img: &maps.ha,
            mask: &maps.mask,
            color: |t| angle_color(t * 180.0 - 90.0),
            min: -90.0,
            max: 90.0,
            unit: "deg",
        },
        Panel {
            title: "E2A",
            img: &maps.e2a,
            mask: &maps.mask,
            color: |t| angle_color(t * 180.0 - 90.0),
            min: -90.0,
            max: 90.0,
            unit: "deg",
        },
        Panel {
            title: "MD",
            img: &maps.md,
            mask: &maps.mask,
            color: hot_color,
            min: 0.0,
            max: MD_SCALE_MAX,
            unit: "mm^2/s",
        },
        Panel {
            title: "FA",
            img: &maps.fa,
            mask: &maps.mask,
            color: gray_color,
            min: 0.0,
            max: 1.0,
            unit: "1",
        },
    ];

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = write!(
        svg,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"#202020\"/>"
    );
    for (i, panel) in panels.iter().enumerate() {
        let x0 = (i % 2) * (panel_w + PANEL_GAP);
        let y0 = (i / 2) * (panel_h + PANEL_GAP);
        render_panel(&mut svg, panel, x0, y0);
    }
    let _ = write!(
        svg,
        "<text x=\"0\" y=\"{}\" fill=\"#888\" font-family=\"monospace\" font-size=\"10\">{}</text>",
        height - 6,
        footer
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn write_map_svg(path: &Path, maps: &MapSet, footer: &str) -> Result<()> {
    std::fs::write(path, render_map_set(maps, footer))?;
    Ok(())
}
