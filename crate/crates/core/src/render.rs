//! Raster output: precision-recall plots and probability-map grids, drawn
//! directly into RGB buffers with an 8x8 bitmap font.

use std::io::Cursor;
use std::path::Path;

use font8x8::UnicodeFonts;
use image::{ImageFormat, Rgb, RgbImage};

use crate::metrics::PRPoint;
use crate::persistence::atomic_write;
use crate::types::{ImageTensor, MaskTensor, ProbMap};
use crate::{Error, Result};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
    for yy in y..y + h {
        for xx in x..x + w {
            put(img, xx, yy, c);
        }
    }
}

/// Bresenham line, `thick` pixels wide.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: i64) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let off = thick / 2;
    loop {
        fill_rect(img, x - off, y - off, thick, thick, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, c: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        let glyph = font8x8::BASIC_FONTS.get(ch).unwrap_or([0; 8]);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    put(img, x + 8 * i as i64 + col, y + row as i64, c);
                }
            }
        }
    }
}

fn text_width(s: &str) -> i64 {
    8 * s.chars().count() as i64
}

/// Encodes as PNG and writes atomically. PNG encoding is deterministic, so
/// identical buffers give identical files.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    atomic_write(path, &bytes)
}

/// One backbone's curves, one per strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct PrPanel {
    pub title: String,
    pub curves: Vec<(String, Vec<PRPoint>)>,
}

const PLOT: i64 = 300;
const MARGIN_L: i64 = 56;
const MARGIN_R: i64 = 16;
const MARGIN_T: i64 = 28;
const MARGIN_B: i64 = 44;

/// Precision (vertical) against recall (horizontal), both on `[0, 1]`,
/// panels side by side.
pub fn render_pr_plot(panels: &[PrPanel]) -> Result<RgbImage> {
    if panels.is_empty() || panels.iter().all(|p| p.curves.is_empty()) {
        return Err(Error::EmptyInput("pr curves"));
    }
    let panel_w = MARGIN_L + PLOT + MARGIN_R;
    let legend_rows = panels.iter().map(|p| p.curves.len()).max().unwrap_or(0) as i64;
    let height = MARGIN_T + PLOT + MARGIN_B + 12 * legend_rows + 8;
    let mut img = RgbImage::from_pixel((panel_w * panels.len() as i64) as u32, height as u32, WHITE);
    for (pi, panel) in panels.iter().enumerate() {
        let ox = pi as i64 * panel_w + MARGIN_L;
        let oy = MARGIN_T;
        let to_px = |r: f64, p: f64| {
            (
                ox + (r.clamp(0.0, 1.0) * PLOT as f64).round() as i64,
                oy + PLOT - (p.clamp(0.0, 1.0) * PLOT as f64).round() as i64,
            )
        };
        for k in 0..=4 {
            let v = f64::from(k) / 4.0;
            let (gx, gy) = to_px(v, v);
            line(&mut img, (gx, oy), (gx, oy + PLOT), GRID, 1);
            line(&mut img, (ox, gy), (ox + PLOT, gy), GRID, 1);
            let label = format!("{v:.2}");
            text(&mut img, gx - text_width(&label) / 2, oy + PLOT + 6, &label, BLACK);
            text(&mut img, ox - text_width(&label) - 6, gy - 4, &label, BLACK);
        }
        line(&mut img, (ox, oy), (ox, oy + PLOT), BLACK, 1);
        line(&mut img, (ox, oy + PLOT), (ox + PLOT, oy + PLOT), BLACK, 1);
        line(&mut img, (ox + PLOT, oy), (ox + PLOT, oy + PLOT), BLACK, 1);
        line(&mut img, (ox, oy), (ox + PLOT, oy), BLACK, 1);
        text(&mut img, ox + (PLOT - text_width(&panel.title)) / 2, 8, &panel.title, BLACK);
        text(&mut img, ox + (PLOT - text_width("Recall")) / 2, oy + PLOT + 20, "Recall", BLACK);
        text(&mut img, ox - MARGIN_L + 2, oy - 14, "Precision", BLACK);

        for (ci, (label, curve)) in panel.curves.iter().enumerate() {
            let color = PALETTE[ci % PALETTE.len()];
            let pts: Vec<(i64, i64)> = curve
                .iter()
                .filter(|p| p.precision.is_finite() && p.recall.is_finite())
                .map(|p| to_px(p.recall, p.precision))
                .collect();
            if pts.len() == 1 {
                fill_rect(&mut img, pts[0].0 - 3, pts[0].1 - 3, 7, 7, color);
            }
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], color, 2);
            }
            let ly = oy + PLOT + 36 + 12 * ci as i64;
            fill_rect(&mut img, ox, ly, 16, 8, color);
            text(&mut img, ox + 22, ly, label, BLACK);
        }
    }
    Ok(img)
}

pub fn emit_pr_plot(panels: &[PrPanel], path: &Path) -> Result<()> {
    save_png(&render_pr_plot(panels)?, path)
}

/// One row of a probability-map grid: the input, its ground truth and one
/// map per column label.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGridRow {
    pub label: String,
    pub image: ImageTensor,
    pub mask: MaskTensor,
    pub maps: Vec<Option<ProbMap>>,
}

const LABEL_W: i64 = 112;
const HEADER_H: i64 = 20;
const GAP: i64 = 4;

/// Grid with columns `Input`, `GT`, then `columns`; probabilities map
/// linearly from 0 (black) to 1 (white). Missing maps stay blank.
pub fn render_prob_grid(columns: &[String], rows: &[ProbGridRow]) -> Result<RgbImage> {
    let first = rows.first().ok_or(Error::EmptyInput("probability grid rows"))?;
    let (h, w) = (first.image.height(), first.image.width());
    let scale = (96 / h.max(w)).max(1) as i64;
    let (tw, th) = (w as i64 * scale, h as i64 * scale);
    let cols = 2 + columns.len() as i64;
    let cell_w = tw.max(text_width("Input")).max(columns.iter().map(|c| text_width(c)).max().unwrap_or(0)) + GAP;
    let width = LABEL_W + cols * cell_w;
    let height = HEADER_H + rows.len() as i64 * (th + GAP);
    let mut img = RgbImage::from_pixel(width as u32, height as u32, WHITE);
    let headers = ["Input".to_string(), "GT".to_string()].into_iter().chain(columns.iter().cloned());
    for (c, label) in headers.enumerate() {
        text(&mut img, LABEL_W + c as i64 * cell_w, 6, &label, BLACK);
    }
    for (r, row) in rows.iter().enumerate() {
        if row.maps.len() != columns.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} maps", columns.len()),
                found: format!("{} maps", row.maps.len()),
            });
        }
        let y0 = HEADER_H + r as i64 * (th + GAP);
        text(&mut img, 4, y0 + th / 2 - 4, &row.label, BLACK);
        let mut tile = |c: i64, f: &dyn Fn(usize) -> Rgb<u8>| {
            let x0 = LABEL_W + c * cell_w;
            for y in 0..th {
                for x in 0..tw {
                    let i = (y / scale) as usize * w + (x / scale) as usize;
                    put(&mut img, x0 + x, y0 + y, f(i));
                }
            }
        };
        let px = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let data = row.image.data();
        tile(0, &|i| Rgb([px(data[i]), px(data[h * w + i]), px(data[2 * h * w + i])]));
        tile(1, &|i| if row.mask.is_set(i) { WHITE } else { BLACK });
        for (c, map) in row.maps.iter().enumerate() {
            if let Some(m) = map {
                if (m.height(), m.width()) != (h, w) {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{h}x{w}"),
                        found: format!("{}x{}", m.height(), m.width()),
                    });
                }
                let d = m.data();
                tile(2 + c as i64, &|i| {
                    let v = px(d[i]);
                    Rgb([v, v, v])
                });
            }
        }
    }
    Ok(img)
}

pub fn emit_prob_maps(columns: &[String], rows: &[ProbGridRow], path: &Path) -> Result<()> {
    save_png(&render_prob_grid(columns, rows)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(threshold: f64, precision: f64, recall: f64) -> PRPoint {
        PRPoint { threshold, precision, recall }
    }

    #[test]
    fn pr_plot_handles_single_points_and_writes_png() {
        let panels = vec![PrPanel {
            title: "UNet".into(),
            curves: vec![
                ("Backbone".into(), vec![pt(0.0, 0.2, 1.0), pt(0.5, 0.8, 0.6), pt(1.0, 1.0, 0.0)]),
                ("Proposed".into(), vec![pt(0.5, 0.5, 0.5)]),
            ],
        }];
        let img = render_pr_plot(&panels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pr.png");
        emit_pr_plot(&panels, &p).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert_eq!(back, img);
        assert!(render_pr_plot(&[]).is_err());
    }

    #[test]
    fn prob_grid_layout_and_mapping() {
        let image = ImageTensor::new(16, 16, vec![0.5; 3 * 256]).unwrap();
        let mask = MaskTensor::from_bits(16, 16, &[true; 256]).unwrap();
        let cols: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let row = ProbGridRow {
            label: "UNet".into(),
            image,
            mask,
            maps: vec![Some(ProbMap::filled(16, 16, 0.0)), Some(ProbMap::filled(16, 16, 1.0))],
        };
        let img = render_prob_grid(&cols, &[row.clone(), row]).unwrap();
        let scale = 6;
        let cell_w = (16 * scale).max(40) + GAP;
        assert_eq!(img.width() as i64, LABEL_W + 4 * cell_w);
        assert_eq!(img.height() as i64, HEADER_H + 2 * (16 * scale + GAP));
        let at = |c: i64| *img.get_pixel((LABEL_W + c * cell_w + 5) as u32, (HEADER_H + 30) as u32);
        assert_eq!(at(1), WHITE);
        assert_eq!(at(2), BLACK);
        assert_eq!(at(3), WHITE);
        assert_eq!(at(0), Rgb([128, 128, 128]));
    }
}
