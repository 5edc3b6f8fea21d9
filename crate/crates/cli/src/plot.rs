//! Static PNG plots drawn from a run directory's CSV files.
//!
//! `plots/losses.png` stacks one panel per loss series (`d_loss`, `g_adv`,
//! `g_aux`, `g_total`, top to bottom), each scaled to its own range.
//! `plots/unfreeze.png` is the unfrozen-unit count per epoch as a step curve,
//! with one grid line per unit.

use std::collections::BTreeMap;
use std::path::Path;

use apgan::Error;
use image::{Rgb, RgbImage};

const W: u32 = 640;
const PANEL_H: u32 = 150;
const MARGIN: u32 = 12;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const COLORS: [Rgb<u8>; 5] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
    Rgb([255, 127, 14]),
];
const LOSS_ORDER: [&str; 4] = ["d_loss", "g_adv", "g_aux", "g_total"];

fn data_error(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

/// Series keyed by name: `(step, value)` points, from `step,epoch,name,value` rows.
pub fn read_losses(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(data_error(path, format!("malformed row `{line}`")));
        }
        let step: f64 = f[0].parse().map_err(|e| data_error(path, e))?;
        let value: f64 = f[3].parse().map_err(|e| data_error(path, e))?;
        out.entry(f[2].to_string()).or_default().push((step, value));
    }
    Ok(out)
}

/// `(epoch, unit_index)` rows of an unfreeze log.
pub fn read_unfreeze_log(path: &Path) -> Result<Vec<(usize, usize)>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut f = line.split(',');
            let mut next = || {
                f.next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| data_error(path, format!("malformed row `{line}`")))
            };
            Ok((next()?, next()?))
        })
        .collect()
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
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

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    top: u32,
    height: u32,
}

impl Frame {
    fn new(points: impl Iterator<Item = (f64, f64)> + Clone, top: u32, height: u32) -> Self {
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| {
            points.clone().map(|p| sel(&p)).filter(|v| v.is_finite()).fold(init, f)
        };
        let (x0, x1) = (
            fold(f64::min, f64::INFINITY, |p| p.0),
            fold(f64::max, f64::NEG_INFINITY, |p| p.0),
        );
        let (y0, y1) = (
            fold(f64::min, f64::INFINITY, |p| p.1),
            fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        );
        let widen = |a: f64, b: f64| {
            if a.is_finite() && b > a {
                (a, b)
            } else if a.is_finite() {
                (a - 0.5, a + 0.5)
            } else {
                (0.0, 1.0)
            }
        };
        let ((x0, x1), (y0, y1)) = (widen(x0, x1), widen(y0, y1));
        Self {
            x0,
            x1,
            y0,
            y1,
            top,
            height,
        }
    }

    fn px(&self, (x, y): (f64, f64)) -> (i64, i64) {
        let span_w = (W - 2 * MARGIN) as f64;
        let span_h = (self.height - 2 * MARGIN) as f64;
        let fx = MARGIN as f64 + (x - self.x0) / (self.x1 - self.x0) * span_w;
        let fy = (self.top + self.height - MARGIN) as f64 - (y - self.y0) / (self.y1 - self.y0) * span_h;
        (fx.round() as i64, fy.round() as i64)
    }

    fn axes(&self, img: &mut RgbImage) {
        let (l, r) = (MARGIN as i64, (W - MARGIN) as i64);
        let (t, b) = ((self.top + MARGIN) as i64, (self.top + self.height - MARGIN) as i64);
        line(img, (l, b), (r, b), AXIS);
        line(img, (l, t), (l, b), AXIS);
    }
}

fn polyline(img: &mut RgbImage, frame: &Frame, pts: &[(f64, f64)], c: Rgb<u8>) {
    let finite: Vec<(i64, i64)> = pts.iter().filter(|p| p.1.is_finite()).map(|&p| frame.px(p)).collect();
    for w in finite.windows(2) {
        line(img, w[0], w[1], c);
    }
}

pub fn loss_plot(series: &BTreeMap<String, Vec<(f64, f64)>>) -> RgbImage {
    let names: Vec<&str> = LOSS_ORDER.iter().copied().filter(|n| series.contains_key(*n)).collect();
    let h = PANEL_H * names.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(W, h, BG);
    for (i, name) in names.iter().enumerate() {
        let pts = &series[*name];
        let frame = Frame::new(pts.iter().copied(), i as u32 * PANEL_H, PANEL_H);
        frame.axes(&mut img);
        polyline(&mut img, &frame, pts, COLORS[i % COLORS.len()]);
    }
    img
}

/// Step curve of unfrozen units over `epochs` epochs.
pub fn unfreeze_plot(log: &[(usize, usize)], epochs: usize, units: usize) -> RgbImage {
    let h = 2 * PANEL_H;
    let mut img = RgbImage::from_pixel(W, h, BG);
    let epochs = epochs.max(log.last().map_or(0, |e| e.0 + 1)).max(1);
    let units = units.max(log.len()).max(1);
    let corners = [(0.0, 0.0), (epochs as f64, units as f64)];
    let frame = Frame::new(corners.iter().copied(), 0, h);
    for u in 1..=units {
        let (a, b) = (frame.px((0.0, u as f64)), frame.px((epochs as f64, u as f64)));
        line(&mut img, a, b, GRID);
    }
    frame.axes(&mut img);
    let mut pts = vec![(0.0, 0.0)];
    let mut count = 0.0;
    for &(epoch, _) in log {
        pts.push((epoch as f64, count));
        count += 1.0;
        pts.push((epoch as f64, count));
    }
    pts.push((epochs as f64, count));
    polyline(&mut img, &frame, &pts, COLORS[0]);
    for &(epoch, _) in log {
        let (x, y) = frame.px((epoch as f64, 0.0));
        line(&mut img, (x, y - 4), (x, y + 4), COLORS[1]);
    }
    img
}

/// Writes both plots under `<dir>/plots/`.
pub fn render_run(dir: &Path) -> Result<(), Error> {
    let series = read_losses(&dir.join("losses.csv"))?;
    let log = read_unfreeze_log(&dir.join("unfreeze_log.csv"))?;
    let epochs = series
        .values()
        .next()
        .map_or(0, |s| s.len())
        .min(1)
        .max(epoch_count(&dir.join("losses.csv"))?);
    let units = apgan::extractor::ExtractorSpec::default().unit_count();
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::Io {
        path: plots.clone(),
        source: e,
    })?;
    let save = |img: RgbImage, name: &str| {
        let p = plots.join(name);
        img.save(&p).map_err(|e| data_error(&p, e))
    };
    save(loss_plot(&series), "losses.png")?;
    save(unfreeze_plot(&log, epochs, units), "unfreeze.png")
}

fn epoch_count(path: &Path) -> Result<usize, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse::<usize>().ok())
        .max()
        .map_or(0, |e| e + 1))
}
