use image::{Rgb, RgbImage};
use srcverify::splicing::{ScoreSequence, SpliceReport};

const CELL: u32 = 40;
const WIDTH: u32 = 800;
const HEIGHT: u32 = 300;
const MARGIN: u32 = 20;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([160, 160, 160]);
const RAW: Rgb<u8> = Rgb([190, 190, 190]);
const SMOOTH: Rgb<u8> = Rgb([31, 119, 180]);
const MINIMUM: Rgb<u8> = Rgb([214, 39, 40]);

/// Three-stop ramp (purple, teal, yellow) over `[0, 1]`.
fn ramp(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 3] = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let (lo, hi, t) = if v < 0.5 { (0, 1, v * 2.0) } else { (1, 2, v * 2.0 - 1.0) };
    let c = |k: usize| (STOPS[lo][k] + t * (STOPS[hi][k] - STOPS[lo][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// One square per matrix cell, row `i` at the top.
pub fn heatmap(values: &[Vec<f64>]) -> RgbImage {
    let n = values.len().max(1) as u32;
    RgbImage::from_fn(n * CELL, n * CELL, |x, y| {
        let (i, j) = ((y / CELL) as usize, (x / CELL) as usize);
        let v = values.get(i).and_then(|row| row.get(j)).copied().unwrap_or(0.0);
        if x % CELL == 0 || y % CELL == 0 {
            WHITE
        } else {
            ramp(v)
        }
    })
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
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

/// Raw (grey) and smoothed (blue) similarity over the track on a `[0, 1]` axis, with a
/// red marker at each detected minimum.
pub fn score_curve(seq: &ScoreSequence, report: &SpliceReport) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, WHITE);
    let (w, h) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let n = seq.raw.len();
    let px = |i: usize| MARGIN as i64 + (w * i as f64 / (n.max(2) - 1) as f64).round() as i64;
    let py = |v: f64| MARGIN as i64 + (h * (1.0 - v.clamp(0.0, 1.0))).round() as i64;

    let (left, right) = (MARGIN as i64, (WIDTH - MARGIN) as i64);
    line(&mut img, (left, py(0.0)), (right, py(0.0)), AXIS);
    line(&mut img, (left, py(1.0)), (right, py(1.0)), AXIS);
    line(&mut img, (left, py(0.0)), (left, py(1.0)), AXIS);
    for m in &report.minima {
        line(&mut img, (px(m.index), py(0.0)), (px(m.index), py(1.0)), MINIMUM);
    }
    for (values, color) in [(&seq.raw, RAW), (&seq.smoothed, SMOOTH)] {
        for i in 1..values.len() {
            line(&mut img, (px(i - 1), py(values[i - 1])), (px(i), py(values[i])), color);
        }
    }
    img
}
