//! Static histogram figures: one panel per channel, one curve per domain.

use stdgan_core::imaging::ChannelHistogram;
use stdgan_core::Tensor;

const PANEL_W: usize = 256;
const PANEL_H: usize = 160;
const MARGIN: usize = 8;

/// Curve colours cycled over domains.
const COLOURS: [[f32; 3]; 6] = [
    [0.85, 0.1, 0.1],
    [0.1, 0.55, 0.1],
    [0.1, 0.2, 0.85],
    [0.9, 0.6, 0.0],
    [0.6, 0.0, 0.7],
    [0.0, 0.6, 0.7],
];

fn put(img: &mut Tensor<f32>, w: usize, x: usize, y: usize, rgb: [f32; 3]) {
    for (c, v) in rgb.into_iter().enumerate() {
        img.channel_mut(c)[y * w + x] = v;
    }
}

fn line(
    img: &mut Tensor<f32>,
    w: usize,
    (x0, y0): (i64, i64),
    (x1, y1): (i64, i64),
    rgb: [f32; 3],
) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, w, x as usize, y as usize, rgb);
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

/// Draws the histograms of several domains side by side per channel. All
/// histograms must share channel and bin counts.
pub fn histogram_figure(hists: &[ChannelHistogram]) -> Tensor<f32> {
    let channels = hists.first().map_or(3, ChannelHistogram::channels);
    let width = channels * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2 * MARGIN;
    let mut img = Tensor::full(&[3, height, width], 1.0f32);
    // shared vertical scale so panels are comparable
    let peak = hists
        .iter()
        .flat_map(|h| h.counts.iter().flatten())
        .fold(0.0f64, |m, &v| m.max(v))
        .max(1e-12);
    for ch in 0..channels {
        let x0 = MARGIN + ch * (PANEL_W + MARGIN);
        let base = MARGIN + PANEL_H - 1;
        for x in x0..x0 + PANEL_W {
            put(&mut img, width, x, base, [0.0; 3]);
        }
        for y in MARGIN..=base {
            put(&mut img, width, x0, y, [0.0; 3]);
        }
        for (d, h) in hists.iter().enumerate() {
            let counts = &h.counts[ch];
            let n = counts.len();
            let point = |b: usize| {
                let x = x0 + 1 + b * (PANEL_W - 2) / (n - 1).max(1);
                let y = base - ((counts[b] / peak) * (PANEL_H - 2) as f64).round() as usize;
                (x as i64, y as i64)
            };
            for b in 1..n {
                line(
                    &mut img,
                    width,
                    point(b - 1),
                    point(b),
                    COLOURS[d % COLOURS.len()],
                );
            }
        }
    }
    img
}
