//! PNG line charts.
//!
//! Charts carry no text: axes, grid, one polyline per series with point
//! markers. Colours follow series order.

use std::path::Path;

use image::{Rgb, RgbImage};
use plotters::prelude::*;
use plotters_backend::{BackendColor, BackendCoord, DrawingErrorKind};

use crate::error::{HjsccError, Result};

/// Drawing backend over an in-memory RGB buffer.
struct PixelBackend<'a> {
    img: &'a mut RgbImage,
}

#[derive(Debug)]
struct NoError;

impl std::fmt::Display for NoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("pixel backend")
    }
}

impl std::error::Error for NoError {}

impl DrawingBackend for PixelBackend<'_> {
    type ErrorType = NoError;

    fn get_size(&self) -> (u32, u32) {
        self.img.dimensions()
    }

    fn ensure_prepared(&mut self) -> std::result::Result<(), DrawingErrorKind<NoError>> {
        Ok(())
    }

    fn present(&mut self) -> std::result::Result<(), DrawingErrorKind<NoError>> {
        Ok(())
    }

    fn draw_pixel(
        &mut self,
        point: BackendCoord,
        color: BackendColor,
    ) -> std::result::Result<(), DrawingErrorKind<NoError>> {
        let (w, h) = self.img.dimensions();
        if point.0 < 0 || point.1 < 0 || point.0 as u32 >= w || point.1 as u32 >= h {
            return Ok(());
        }
        let p = self.img.get_pixel_mut(point.0 as u32, point.1 as u32);
        let a = color.alpha.clamp(0.0, 1.0);
        let (r, g, b) = color.rgb;
        for (c, v) in p.0.iter_mut().zip([r, g, b]) {
            *c = (f64::from(*c) * (1.0 - a) + f64::from(v) * a).round() as u8;
        }
        Ok(())
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

fn padded_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

fn draw_err<E: std::fmt::Debug>(e: E) -> HjsccError {
    HjsccError::Io(std::io::Error::other(format!("plot: {e:?}")))
}

/// Render `series` (lists of `(x, y)` points) to a PNG at `path`.
pub fn line_chart(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let mut img = RgbImage::from_pixel(640, 480, Rgb([255, 255, 255]));
    {
        let root = PixelBackend { img: &mut img }.into_drawing_area();
        let (x0, x1) = padded_range(series.iter().flatten().map(|p| p.0));
        let (y0, y1) = padded_range(series.iter().flatten().map(|p| p.1));
        let mut chart = ChartBuilder::on(&root)
            .margin(24)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(draw_err)?;
        let grid = RGBColor(225, 225, 225);
        for k in 1..5 {
            let y = y0 + (y1 - y0) * k as f64 / 5.0;
            chart
                .draw_series(std::iter::once(PathElement::new(vec![(x0, y), (x1, y)], grid)))
                .map_err(draw_err)?;
        }
        chart
            .draw_series(std::iter::once(PathElement::new(
                vec![(x0, y1), (x0, y0), (x1, y0)],
                BLACK.stroke_width(2),
            )))
            .map_err(draw_err)?;
        for (i, s) in series.iter().enumerate() {
            let c = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(s.iter().copied(), c.stroke_width(2)))
                .map_err(draw_err)?;
            chart
                .draw_series(s.iter().map(|&p| Circle::new(p, 4, c.filled())))
                .map_err(draw_err)?;
        }
        root.present().map_err(draw_err)?;
    }
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            std::fs::create_dir_all(d)?;
        }
    }
    img.save(path)?;
    Ok(())
}
