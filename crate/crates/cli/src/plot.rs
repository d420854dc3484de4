//! Minimal raster charts: polylines, scatter points and vertical markers on a
//! white canvas with a frame. No text; the CSV beside each plot carries values.

use vtpalm::raster::RasterImage;

pub const BLACK: [f64; 3] = [0.0, 0.0, 0.0];
pub const BLUE: [f64; 3] = [0.1, 0.3, 0.85];
pub const RED: [f64; 3] = [0.85, 0.1, 0.1];
pub const GREY: [f64; 3] = [0.6, 0.6, 0.6];

enum Layer {
    Line(Vec<(f64, f64)>, [f64; 3]),
    Points(Vec<(f64, f64)>, [f64; 3]),
    VLine(f64, [f64; 3]),
    HLine(f64, [f64; 3]),
}

pub struct Plot {
    width: usize,
    height: usize,
    layers: Vec<Layer>,
}

const MARGIN: usize = 12;

impl Plot {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            layers: Vec::new(),
        }
    }

    pub fn line(mut self, pts: Vec<(f64, f64)>, color: [f64; 3]) -> Self {
        self.layers.push(Layer::Line(pts, color));
        self
    }

    pub fn points(mut self, pts: Vec<(f64, f64)>, color: [f64; 3]) -> Self {
        self.layers.push(Layer::Points(pts, color));
        self
    }

    pub fn vline(mut self, x: f64, color: [f64; 3]) -> Self {
        self.layers.push(Layer::VLine(x, color));
        self
    }

    pub fn hline(mut self, y: f64, color: [f64; 3]) -> Self {
        self.layers.push(Layer::HLine(y, color));
        self
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        let mut grow = |x: f64, y: Option<f64>| {
            if x.is_finite() {
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
            if let Some(y) = y.filter(|y| y.is_finite()) {
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        };
        for l in &self.layers {
            match l {
                Layer::Line(p, _) | Layer::Points(p, _) => {
                    p.iter().for_each(|&(x, y)| grow(x, Some(y)))
                }
                Layer::VLine(x, _) => grow(*x, None),
                Layer::HLine(y, _) => grow(f64::NAN, Some(*y)),
            }
        }
        let pad = |lo: f64, hi: f64| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        (x0, x1, y0, y1)
    }

    pub fn render(&self) -> RasterImage {
        let (w, h) = (self.width, self.height);
        let mut data = vec![1.0; w * h * 3];
        let mut put = |u: i64, v: i64, c: [f64; 3]| {
            if u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h {
                let i = (v as usize * w + u as usize) * 3;
                data[i..i + 3].copy_from_slice(&c);
            }
        };
        let (x0, x1, y0, y1) = self.bounds();
        let (pw, ph) = ((w - 2 * MARGIN) as f64, (h - 2 * MARGIN) as f64);
        let to_px = |x: f64, y: f64| {
            (
                MARGIN as f64 + (x - x0) / (x1 - x0) * pw,
                MARGIN as f64 + (1.0 - (y - y0) / (y1 - y0)) * ph,
            )
        };
        let (l, r, t, b) = (
            MARGIN as i64,
            (w - MARGIN) as i64,
            MARGIN as i64,
            (h - MARGIN) as i64,
        );
        for u in l..=r {
            put(u, t, BLACK);
            put(u, b, BLACK);
        }
        for v in t..=b {
            put(l, v, BLACK);
            put(r, v, BLACK);
        }
        for layer in &self.layers {
            match layer {
                Layer::VLine(x, c) => {
                    let (px, _) = to_px(*x, y0);
                    for v in t..=b {
                        if v % 4 < 2 {
                            put(px.round() as i64, v, *c);
                        }
                    }
                }
                Layer::HLine(y, c) => {
                    let (_, py) = to_px(x0, *y);
                    for u in l..=r {
                        if u % 4 < 2 {
                            put(u, py.round() as i64, *c);
                        }
                    }
                }
                Layer::Points(pts, c) => {
                    for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                        let (px, py) = to_px(x, y);
                        for dv in -1..=1 {
                            for du in -1..=1 {
                                put(px.round() as i64 + du, py.round() as i64 + dv, *c);
                            }
                        }
                    }
                }
                Layer::Line(pts, c) => {
                    for seg in pts.windows(2) {
                        let ((ax, ay), (bx, by)) =
                            (to_px(seg[0].0, seg[0].1), to_px(seg[1].0, seg[1].1));
                        if !(ax.is_finite() && ay.is_finite() && bx.is_finite() && by.is_finite()) {
                            continue;
                        }
                        let n =
                            ((bx - ax).abs().max((by - ay).abs()) * 2.0).ceil().max(1.0) as usize;
                        for k in 0..=n {
                            let f = k as f64 / n as f64;
                            put(
                                (ax + f * (bx - ax)).round() as i64,
                                (ay + f * (by - ay)).round() as i64,
                                *c,
                            );
                        }
                    }
                }
            }
        }
        RasterImage::new(w, h, 3, data).expect("canvas size matches")
    }
}
