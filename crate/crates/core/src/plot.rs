//! Static PNG rendering: metric curves, image grids, prompt spectra and
//! confusion heatmaps. No text is drawn; the numbers behind every figure are
//! also written as JSON/CSV by the callers.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::eval::ConfusionMatrix;
use crate::spectral::display_shift;
use crate::train::EpochRecord;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const MARGIN: u32 = 24;

/// Distinguishable series colours, cycled.
pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

fn blend(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        blend(img, x, y, c);
        blend(img, x, y + 1, c);
    }
}

/// Line chart over the joint data range. Non-finite points are skipped.
pub fn line_chart(series: &[Series], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    let finite = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in finite() {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let plot_w = width.saturating_sub(2 * MARGIN).max(1) as f64;
    let plot_h = height.saturating_sub(2 * MARGIN).max(1) as f64;
    for k in 0..=4 {
        let y = MARGIN as i64 + (plot_h * k as f64 / 4.0) as i64;
        draw_line(
            &mut img,
            (MARGIN as i64, y),
            ((width - MARGIN) as i64, y),
            GRID,
        );
    }
    let origin = (MARGIN as i64, (height - MARGIN) as i64);
    draw_line(&mut img, origin, ((width - MARGIN) as i64, origin.1), AXIS);
    draw_line(&mut img, origin, (MARGIN as i64, MARGIN as i64), AXIS);
    if !x_lo.is_finite() {
        return img;
    }
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let y_span = if y_hi > y_lo { y_hi - y_lo } else { 1.0 };
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN as i64 + ((x - x_lo) / x_span * plot_w).round() as i64,
            (height - MARGIN) as i64 - ((y - y_lo) / y_span * plot_h).round() as i64,
        )
    };
    for s in series {
        let c = Rgb(s.color);
        let pts: Vec<_> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&p| to_px(p))
            .collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], c);
        }
        for &(x, y) in &pts {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    blend(&mut img, x + dx, y + dy, c);
                }
            }
        }
    }
    img
}

fn series_of(
    records: &[EpochRecord],
    color: [u8; 3],
    f: impl Fn(&EpochRecord) -> Option<f64>,
) -> Series {
    Series {
        points: records
            .iter()
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
            .collect(),
        color,
    }
}

/// Mean total, target and distillation loss of exploit epochs, and mean
/// inversion loss of explore epochs. Each curve is scaled to its own
/// maximum so all four share one axis.
pub fn loss_curves(records: &[EpochRecord]) -> RgbImage {
    use crate::train::Phase;
    let exploit: Vec<_> = records
        .iter()
        .filter(|r| r.phase == Phase::Exploit)
        .cloned()
        .collect();
    let explore: Vec<_> = records
        .iter()
        .filter(|r| r.phase == Phase::Explore)
        .cloned()
        .collect();
    let mut series = vec![
        series_of(&exploit, PALETTE[0], |r| Some(r.loss.mean)),
        series_of(&exploit, PALETTE[1], |r| {
            r.target_loss.as_ref().map(|s| s.mean)
        }),
        series_of(&exploit, PALETTE[2], |r| {
            r.distill_loss.as_ref().map(|s| s.mean)
        }),
        series_of(&explore, PALETTE[3], |r| {
            r.inversion_loss.as_ref().map(|s| s.mean)
        }),
    ];
    for s in &mut series {
        let peak = s.points.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        if peak > 0.0 {
            s.points.iter_mut().for_each(|p| p.1 /= peak);
        }
    }
    line_chart(&series, 640, 360)
}

/// Validation accuracy, balanced accuracy, MCC and macro-F1 per exploit
/// epoch, on a shared `[min, max]` axis.
pub fn validation_curves(records: &[EpochRecord]) -> RgbImage {
    let series = vec![
        series_of(records, PALETTE[0], |r| r.val.as_ref().map(|v| v.accuracy)),
        series_of(records, PALETTE[1], |r| {
            r.val.as_ref().map(|v| v.balanced_accuracy)
        }),
        series_of(records, PALETTE[2], |r| r.val.as_ref().map(|v| v.mcc)),
        series_of(records, PALETTE[4], |r| r.val.as_ref().map(|v| v.macro_f1)),
    ];
    line_chart(&series, 640, 360)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `C x H x W` tile with values in `[0, 1]` (clamped) as RGB; single-channel
/// tiles are grey.
fn tile_pixel(tile: &Array3<f64>, y: usize, x: usize) -> Rgb<u8> {
    let c = tile.dim().0;
    let at = |k: usize| to_u8(tile[[k.min(c - 1), y, x]]);
    Rgb([at(0), at(1), at(2)])
}

/// Row-major grid of equally sized tiles separated by a 2 px white border,
/// each pixel repeated `scale` times.
pub fn image_grid(tiles: &[Array3<f64>], cols: usize, scale: u32) -> RgbImage {
    const BORDER: u32 = 2;
    if tiles.is_empty() || cols == 0 {
        return RgbImage::from_pixel(1, 1, BACKGROUND);
    }
    let (_, h, w) = tiles[0].dim();
    let rows = tiles.len().div_ceil(cols);
    let (tw, th) = (w as u32 * scale, h as u32 * scale);
    let mut img = RgbImage::from_pixel(
        cols as u32 * (tw + BORDER) + BORDER,
        rows as u32 * (th + BORDER) + BORDER,
        BACKGROUND,
    );
    for (i, tile) in tiles.iter().enumerate() {
        let ox = BORDER + (i % cols) as u32 * (tw + BORDER);
        let oy = BORDER + (i / cols) as u32 * (th + BORDER);
        for py in 0..th {
            for px in 0..tw {
                let p = tile_pixel(tile, (py / scale) as usize, (px / scale) as usize);
                img.put_pixel(ox + px, oy + py, p);
            }
        }
    }
    img
}

/// Display form of an amplitude spectrum: DC centred, `ln(1 + a)`, divided
/// by its maximum over the whole prompt. Relative differences are kept, so a
/// nearly flat spectrum renders nearly uniform.
pub fn log_amplitude_tile(amplitude: &Array3<f64>) -> Array3<f64> {
    let mut out = Array3::zeros(amplitude.raw_dim());
    for (c, plane) in amplitude.axis_iter(Axis(0)).enumerate() {
        let shifted = display_shift(&plane.to_owned()).mapv(|a| a.max(0.0).ln_1p());
        out.index_axis_mut(Axis(0), c).assign(&shifted);
    }
    let hi = out.iter().copied().fold(0.0, f64::max);
    if hi > 0.0 {
        out.mapv_inplace(|v| v / hi);
    }
    out
}

/// Row-normalized confusion matrix, white (0) to dark blue (1); rows with
/// no samples stay light grey.
pub fn confusion_heatmap(cm: &ConfusionMatrix, cell: u32) -> RgbImage {
    let k = cm.num_classes();
    let rows = cm.row_sums();
    let frac = Array2::from_shape_fn((k, k), |(i, j)| {
        if rows[i] == 0 {
            f64::NAN
        } else {
            cm.get(i, j) as f64 / rows[i] as f64
        }
    });
    let side = k as u32 * cell;
    let mut img = RgbImage::from_pixel(side.max(1), side.max(1), BACKGROUND);
    for ((i, j), &f) in frac.indexed_iter() {
        let c = if f.is_nan() {
            Rgb([235, 235, 235])
        } else {
            let t = f.clamp(0.0, 1.0);
            Rgb([
                to_u8(1.0 - 0.9 * t),
                to_u8(1.0 - 0.7 * t),
                to_u8(1.0 - 0.3 * t),
            ])
        };
        for y in 0..cell {
            for x in 0..cell {
                img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, c);
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), image::ImageError> {
    img.save_with_format(path, image::ImageFormat::Png)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_flat_spectrum_renders_near_uniform() {
        let t = log_amplitude_tile(&Array3::from_elem((3, 4, 4), 1.0));
        assert!(t.iter().all(|&v| v == 1.0));
        let mut a = Array3::from_elem((3, 4, 4), 1.0);
        a[[1, 2, 3]] = 1.001;
        let t = log_amplitude_tile(&a);
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(lo > 0.999, "{lo}");
        assert!(log_amplitude_tile(&Array3::zeros((1, 2, 2)))
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn log_tile_centres_dc_and_spans_unit_range() {
        let mut a = Array3::zeros((1, 4, 4));
        a[[0, 0, 0]] = 100.0;
        let t = log_amplitude_tile(&a);
        assert_eq!(t[[0, 2, 2]], 1.0);
        assert_eq!(t.iter().filter(|&&v| v == 0.0).count(), 15);
    }

    #[test]
    fn grid_places_tiles_pixel_exactly() {
        let a = Array3::from_elem((3, 2, 2), 1.0);
        let b = Array3::from_elem((3, 2, 2), 0.0);
        let img = image_grid(&[a, b], 2, 1);
        assert_eq!((img.width(), img.height()), (2 * 4 + 2, 6));
        assert_eq!(*img.get_pixel(2, 2), Rgb([255, 255, 255]));
        assert_eq!(*img.get_pixel(6, 2), Rgb([0, 0, 0]));
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![0, 0]]).unwrap();
        let img = confusion_heatmap(&cm, 5);
        assert_eq!(img.dimensions(), (10, 10));
        assert_eq!(*img.get_pixel(7, 7), Rgb([235, 235, 235]));
        assert!(img.get_pixel(0, 0)[0] < img.get_pixel(7, 0)[0]);
    }

    #[test]
    fn chart_survives_empty_and_constant_series() {
        let empty = line_chart(&[], 100, 80);
        assert_eq!(empty.dimensions(), (100, 80));
        let flat = Series {
            points: vec![(0.0, 1.0), (1.0, 1.0), (2.0, f64::NAN)],
            color: PALETTE[0],
        };
        line_chart(&[flat], 100, 80);
    }
}
