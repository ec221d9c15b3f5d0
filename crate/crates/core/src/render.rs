//! Minimal built-in rasterizer: heatmap PNGs with a fixed viridis-like
//! ramp (nodata drawn white) and annotated bar charts using a 5x7 bitmap
//! font. Output bytes are deterministic for identical inputs.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::raster::RasterGrid;
use crate::Result;

/// Anchor points of the color ramp.
const RAMP: [(f64, [u8; 3]); 9] = [
    (0.000, [68, 1, 84]),
    (0.125, [71, 44, 122]),
    (0.250, [59, 81, 139]),
    (0.375, [44, 113, 142]),
    (0.500, [33, 144, 141]),
    (0.625, [39, 173, 129]),
    (0.750, [92, 200, 99]),
    (0.875, [170, 220, 50]),
    (1.000, [253, 231, 37]),
];

/// Ramp color at `t` in [0, 1].
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    for w in RAMP.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return [
                (c0[0] as f64 + f * (c1[0] as f64 - c0[0] as f64)).round() as u8,
                (c0[1] as f64 + f * (c1[1] as f64 - c0[1] as f64)).round() as u8,
                (c0[2] as f64 + f * (c1[2] as f64 - c0[2] as f64)).round() as u8,
            ];
        }
    }
    RAMP[8].1
}

/// Render one band as a heatmap; values map linearly from [lo, hi] into the
/// ramp and nodata pixels are white.
pub fn render_heatmap(grid: &RasterGrid, band: usize, lo: f64, hi: f64) -> RgbImage {
    let mut img = RgbImage::new(grid.width as u32, grid.height as u32);
    let values = grid.band(band);
    for r in 0..grid.height {
        for c in 0..grid.width {
            let v = values[r * grid.width + c];
            let px = if grid.is_nodata(v) {
                [255u8, 255, 255]
            } else {
                ramp_color(((v as f64) - lo) / (hi - lo).max(1e-12))
            };
            img.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    img
}

pub fn save_heatmap_png(
    path: &Path,
    grid: &RasterGrid,
    band: usize,
    lo: f64,
    hi: f64,
) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    render_heatmap(grid, band, lo, hi)
        .save(path)
        .map_err(|e| crate::Error::Format(format!("png encode failed: {e}")))
}

// 5x7 glyphs, one u8 row each, low 5 bits used.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1e, 0x01, 0x01, 0x0e, 0x01, 0x01, 0x1e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        '%' => [0x19, 0x1a, 0x02, 0x04, 0x08, 0x0b, 0x13],
        'M' => [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
        't' => [0x04, 0x04, 0x0e, 0x04, 0x04, 0x05, 0x02],
        'C' => [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
        _ => [0; 7],
    }
}

/// Draw text with the bitmap font at integer scale.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let px = cx + (col as i64) * scale as i64 + sx as i64;
                            let py = y + (row as i64) * scale as i64 + sy as i64;
                            if px >= 0
                                && py >= 0
                                && (px as u32) < img.width()
                                && (py as u32) < img.height()
                            {
                                img.put_pixel(px as u32, py as u32, Rgb(color));
                            }
                        }
                    }
                }
            }
        }
        cx += 6 * scale as i64;
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

/// One bar of a chart.
#[derive(Debug, Clone)]
pub struct Bar {
    pub value: f64,
    /// Short label under the bar (supported glyphs only).
    pub label: String,
    /// Annotation above the bar, e.g. a delta.
    pub annotation: String,
}

/// Render a simple bar chart: light background, baseline axis, evenly
/// spaced bars with labels below and annotations above.
pub fn render_bar_chart(bars: &[Bar], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([250, 250, 250]));
    if bars.is_empty() {
        return img;
    }
    let max = bars.iter().map(|b| b.value).fold(0.0f64, f64::max).max(1e-12);
    let margin = 24u32;
    let top = 26u32;
    let bottom = height.saturating_sub(22);
    let plot_h = (bottom - top) as f64;
    let slot = (width - 2 * margin) as f64 / bars.len() as f64;
    let bar_w = (slot * 0.6) as u32;

    // Baseline.
    fill_rect(&mut img, margin, bottom, width - margin, bottom + 1, [40, 40, 40]);

    for (i, bar) in bars.iter().enumerate() {
        let h = ((bar.value / max) * plot_h).round() as u32;
        let x0 = margin + (i as f64 * slot + (slot - bar_w as f64) / 2.0) as u32;
        let y0 = bottom.saturating_sub(h);
        let color = ramp_color(0.15 + 0.7 * i as f64 / bars.len().max(1) as f64);
        fill_rect(&mut img, x0, y0, x0 + bar_w, bottom, color);
        draw_text(
            &mut img,
            x0 as i64,
            (y0 as i64 - 10).max(2),
            &bar.annotation,
            1,
            [30, 30, 30],
        );
        draw_text(&mut img, x0 as i64, bottom as i64 + 4, &bar.label, 1, [30, 30, 30]);
    }
    img
}

pub fn save_bar_chart_png(path: &Path, bars: &[Bar], width: u32, height: u32) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    render_bar_chart(bars, width, height)
        .save(path)
        .map_err(|e| crate::Error::Format(format!("png encode failed: {e}")))
}
