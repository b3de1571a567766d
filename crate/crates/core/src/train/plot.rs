//! Loss-curve rendering: training loss in blue, validation loss in red, on a
//! log-scaled y axis.

use image::{Rgb, RgbImage};

use super::TrainingHistory;
use crate::error::{Error, Result};

const MARGIN: u32 = 24;
const TRAIN: Rgb<u8> = Rgb([40, 90, 200]);
const VAL: Rgb<u8> = Rgb([210, 50, 40]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

pub fn render_loss_plot(history: &TrainingHistory, width: u32, height: u32) -> Result<RgbImage> {
    if width < 2 * MARGIN + 16 || height < 2 * MARGIN + 16 {
        return Err(Error::arg(format!("plot size {width}x{height} is too small")));
    }
    if history.is_empty() {
        return Err(Error::MissingData("history has no steps".into()));
    }
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let positive = |v: f64| v.is_finite() && v > 0.0;
    let ys: Vec<f64> = history
        .steps
        .iter()
        .map(|s| s.train_loss)
        .chain(history.evals.iter().map(|e| e.val_loss))
        .filter(|&v| positive(v))
        .map(f64::log10)
        .collect();
    let (mut lo, mut hi) = ys.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    if ys.is_empty() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x0 = history.steps[0].iteration as f64;
    let x1 = (history.steps.last().unwrap().iteration as f64).max(x0 + 1.0);
    let (pw, ph) = ((width - 2 * MARGIN) as f64, (height - 2 * MARGIN) as f64);
    let to_px = |it: usize, v: f64| {
        let x = MARGIN as f64 + (it as f64 - x0) / (x1 - x0) * pw;
        let y = MARGIN as f64 + (hi - v.log10()) / (hi - lo) * ph;
        (x, y)
    };

    for decade in lo.ceil() as i32..=hi.floor() as i32 {
        let y = MARGIN as f64 + (hi - decade as f64) / (hi - lo) * ph;
        line(&mut img, (MARGIN as f64, y), (MARGIN as f64 + pw, y), GRID);
    }
    let (left, bottom) = (MARGIN as f64, MARGIN as f64 + ph);
    line(&mut img, (left, MARGIN as f64), (left, bottom), AXIS);
    line(&mut img, (left, bottom), (left + pw, bottom), AXIS);

    let train: Vec<(f64, f64)> = history
        .steps
        .iter()
        .filter(|s| positive(s.train_loss))
        .map(|s| to_px(s.iteration, s.train_loss))
        .collect();
    polyline(&mut img, &train, TRAIN);
    let val: Vec<(f64, f64)> = history
        .evals
        .iter()
        .filter(|e| positive(e.val_loss))
        .map(|e| to_px(e.iteration, e.val_loss))
        .collect();
    polyline(&mut img, &val, VAL);
    for &(x, y) in &val {
        for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            put(&mut img, x.round() as i64 + dx, y.round() as i64 + dy, VAL);
        }
    }
    Ok(img)
}

/// Render and write a PNG.
pub fn save_loss_plot(history: &TrainingHistory, path: impl AsRef<std::path::Path>, width: u32, height: u32) -> Result<()> {
    let path = path.as_ref();
    render_loss_plot(history, width, height)?.save(path)?;
    Ok(())
}

fn polyline(img: &mut RgbImage, pts: &[(f64, f64)], color: Rgb<u8>) {
    if pts.len() == 1 {
        put(img, pts[0].0.round() as i64, pts[0].1.round() as i64, color);
    }
    for w in pts.windows(2) {
        line(img, w[0], w[1], color);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        put(img, x.round() as i64, y.round() as i64, color);
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}
