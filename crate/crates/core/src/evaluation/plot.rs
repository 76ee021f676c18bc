//! Minimal PNG charts: accuracy curves per epoch and mean coordinator
//! weights. Axes run from 0 to 1 vertically; there is no text rendering, so
//! colours identify series (audio red, text green, video blue, fused
//! black) and faint horizontal lines mark quarters.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::report::RunReport;
use crate::error::{CompError, Result};
use crate::model::Stage;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const STAGE_LINE: Rgb<u8> = Rgb([170, 170, 170]);
pub const MODALITY_COLOURS: [Rgb<u8>; 3] = [Rgb([214, 39, 40]), Rgb([44, 160, 44]), Rgb([31, 119, 180])];
pub const FUSED_COLOUR: Rgb<u8> = Rgb([0, 0, 0]);

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, WHITE),
        };
        for q in 1..=4 {
            let y = c.y(q as f64 / 4.0);
            c.line((MARGIN as f64, y), ((WIDTH - MARGIN) as f64, y), GRID);
        }
        let (x0, y0) = (MARGIN as f64, c.y(0.0));
        c.line((x0, y0), ((WIDTH - MARGIN) as f64, y0), AXIS);
        c.line((x0, y0), (x0, c.y(1.0)), AXIS);
        c
    }

    fn plot_w(&self) -> f64 {
        (WIDTH - 2 * MARGIN) as f64
    }

    fn y(&self, v: f64) -> f64 {
        let h = (HEIGHT - 2 * MARGIN) as f64;
        (HEIGHT - MARGIN) as f64 - v.clamp(0.0, 1.0) * h
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    /// Bresenham line, drawn two pixels thick.
    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            self.put(x0, y0 + 1, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn rect(&mut self, x0: f64, x1: f64, y0: f64, y1: f64, c: Rgb<u8>) {
        for x in x0.round() as i64..x1.round() as i64 {
            for y in y1.min(y0).round() as i64..y1.max(y0).round() as i64 {
                self.put(x, y, c);
            }
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| CompError::Plot(format!("{}: {e}", path.display())))
    }
}

/// Per-modality (and fused) evaluation accuracy over all epochs of both
/// stages. A grey vertical line marks the start of stage two.
pub fn plot_modality_curves(report: &RunReport, path: &Path) -> Result<()> {
    let curves = &report.epoch_curves;
    if curves.is_empty() {
        return Err(CompError::Plot("report has no epoch curves".into()));
    }
    let mut canvas = Canvas::new();
    let steps = (curves.len().max(2) - 1) as f64;
    let x = |i: usize, c: &Canvas| MARGIN as f64 + c.plot_w() * i as f64 / steps;
    if let Some(boundary) = curves.iter().position(|e| e.stage == Stage::Two) {
        if boundary > 0 {
            let bx = x(boundary, &canvas);
            let (top, bottom) = (canvas.y(1.0), canvas.y(0.0));
            canvas.line((bx, top), (bx, bottom), STAGE_LINE);
        }
    }
    for (u, name) in ["a", "t", "v"].iter().enumerate() {
        let pts: Vec<(f64, f64)> = curves
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.per_modality_acc.get(*name).map(|&v| (x(i, &canvas), canvas.y(v))))
            .collect();
        for w in pts.windows(2) {
            canvas.line(w[0], w[1], MODALITY_COLOURS[u]);
        }
    }
    let fused: Vec<(f64, f64)> = curves
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.fused_acc.map(|v| (x(i, &canvas), canvas.y(v))))
        .collect();
    for w in fused.windows(2) {
        canvas.line(w[0], w[1], FUSED_COLOUR);
    }
    canvas.save(path)
}

/// Bars of the mean coordinator weight of each modality.
pub fn plot_coordinator_weights(weights: [f64; 3], path: &Path) -> Result<()> {
    let mut canvas = Canvas::new();
    let slot = canvas.plot_w() / 3.0;
    for (u, &w) in weights.iter().enumerate() {
        let x0 = MARGIN as f64 + slot * u as f64 + slot * 0.2;
        let x1 = x0 + slot * 0.6;
        let (top, bottom) = (canvas.y(w), canvas.y(0.0));
        canvas.rect(x0, x1, top, bottom, MODALITY_COLOURS[u]);
    }
    canvas.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_use_modality_colours() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        plot_coordinator_weights([0.5, 0.3, 0.2], &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        let slot = (WIDTH - 2 * MARGIN) as f64 / 3.0;
        let cx = (MARGIN as f64 + slot * 0.5) as u32;
        assert_eq!(*img.get_pixel(cx, HEIGHT - MARGIN - 5), MODALITY_COLOURS[0]);
    }
}
