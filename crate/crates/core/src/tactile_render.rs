//! Synthetic tactile frames: height maps shaded under three coloured lights.
//!
//! Each colour channel is lit by its own directional source. Intensity is
//! Lambertian plus ambient, with a gain that varies linearly across the field
//! so the intensity-to-slope mapping depends on pixel position.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;

use crate::diff::{self, Boundary};
use crate::error::{Error, Result};
use crate::fft::{self, Direction};
use crate::kv::KeyValues;
use crate::raster::{HeightMap, RasterImage};

/// Pixel grid geometry shared by the height-map generators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    /// mm per pixel.
    pub pixel_pitch: f64,
}

impl Grid {
    pub fn new(width: usize, height: usize, pixel_pitch: f64) -> Self {
        Self {
            width,
            height,
            pixel_pitch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightingRig {
    /// Unit vectors from the surface toward each light, one per R/G/B channel.
    pub directions: [[f64; 3]; 3],
    pub gains: [f64; 3],
    pub ambients: [f64; 3],
    pub noise_sigma: f64,
    /// Fractional gain change from field centre to edge along each light's azimuth.
    pub falloff: f64,
}

impl Default for LightingRig {
    fn default() -> Self {
        Self::from_angles([0.0, 120.0, 240.0], 45.0, 0.6, 0.2, 0.0, 0.10)
    }
}

impl LightingRig {
    /// Lights at the given azimuths (degrees) and common elevation above the surface.
    pub fn from_angles(
        azimuths_deg: [f64; 3],
        elevation_deg: f64,
        gain: f64,
        ambient: f64,
        noise_sigma: f64,
        falloff: f64,
    ) -> Self {
        let el = elevation_deg.to_radians();
        let directions = azimuths_deg.map(|az| {
            let az = az.to_radians();
            [el.cos() * az.cos(), el.cos() * az.sin(), -el.sin()]
        });
        Self {
            directions,
            gains: [gain; 3],
            ambients: [ambient; 3],
            noise_sigma,
            falloff,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_falloff(mut self, falloff: f64) -> Self {
        self.falloff = falloff;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (c, d) in self.directions.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "light {c} direction has norm {norm}, expected 1"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && (0.0..1.0).contains(&self.falloff)) {
            return Err(Error::InvalidInput(
                "noise must be >= 0 and falloff in [0, 1)".into(),
            ));
        }
        for c in 0..3 {
            let (k, a) = (self.gains[c], self.ambients[c]);
            if k < 0.0 || a < 0.0 || a + k * (1.0 + self.falloff) > 1.0 + 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "channel {c}: ambient {a} and gain {k} exceed the unclipped range"
                )));
            }
        }
        Ok(())
    }

    /// Effective gain of channel `c` at pixel `(u, v)`.
    pub fn gain_at(&self, c: usize, u: usize, v: usize, width: usize, height: usize) -> f64 {
        if self.falloff == 0.0 {
            return self.gains[c];
        }
        let un = if width > 1 {
            2.0 * u as f64 / (width - 1) as f64 - 1.0
        } else {
            0.0
        };
        let vn = if height > 1 {
            2.0 * v as f64 / (height - 1) as f64 - 1.0
        } else {
            0.0
        };
        let d = self.directions[c];
        let horiz = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let proj = if horiz > 0.0 {
            ((un * d[0] + vn * d[1]) / horiz).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        self.gains[c] * (1.0 + self.falloff * proj)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        for (c, name) in ["r", "g", "b"].iter().enumerate() {
            let d = self.directions[c];
            kv.set(
                &format!("light_{name}"),
                format!("{},{},{}", d[0], d[1], d[2]),
            );
            kv.set(&format!("gain_{name}"), self.gains[c]);
            kv.set(&format!("ambient_{name}"), self.ambients[c]);
        }
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("falloff", self.falloff);
    }
}

/// Unit surface normals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<[f64; 3]>,
}

impl NormalMap {
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.normals[v * self.width + u]
    }
}

/// Normals `(df/du, df/dv, -1) / |.|` from central differences of the height map.
pub fn normals_from_height(h: &HeightMap) -> NormalMap {
    let (w, ht, p) = (h.width(), h.height(), h.pixel_pitch());
    let fu = diff::d_du(h.z(), w, ht, p, Boundary::OneSided);
    let fv = diff::d_dv(h.z(), w, ht, p, Boundary::OneSided);
    let normals = fu
        .iter()
        .zip(&fv)
        .map(|(&a, &b)| {
            let n = (a * a + b * b + 1.0).sqrt();
            [a / n, b / n, -1.0 / n]
        })
        .collect();
    NormalMap {
        width: w,
        height: ht,
        normals,
    }
}

/// `I_c = clamp(a_c + k_c(u, v) * max(0, n . l_c) + noise)`.
pub fn shade(normals: &NormalMap, rig: &LightingRig, seed: u64) -> Result<RasterImage> {
    rig.validate()?;
    let (w, h) = (normals.width, normals.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, rig.noise_sigma).expect("validated sigma");
    let mut data = Vec::with_capacity(w * h * 3);
    for v in 0..h {
        for u in 0..w {
            let n = normals.get(u, v);
            for c in 0..3 {
                let l = rig.directions[c];
                let lambert = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
                let mut i = rig.ambients[c] + rig.gain_at(c, u, v, w, h) * lambert;
                if rig.noise_sigma > 0.0 {
                    i += noise.sample(&mut rng);
                }
                data.push(i.clamp(0.0, 1.0));
            }
        }
    }
    RasterImage::new(w, h, 3, data)
}

/// Convenience: shade the normals of `h`.
pub fn render(h: &HeightMap, rig: &LightingRig, seed: u64) -> Result<RasterImage> {
    shade(&normals_from_height(h), rig, seed)
}

/// Ground truth of a rendered sphere press, in pixels and millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressGeometry {
    pub center_px: (f64, f64),
    pub sphere_radius_mm: f64,
    pub depth_mm: f64,
    pub contact_radius_mm: f64,
    pub pixel_pitch: f64,
}

impl PressGeometry {
    pub fn contact_radius_px(&self) -> f64 {
        self.contact_radius_mm / self.pixel_pitch
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("center_u", self.center_px.0);
        kv.set("center_v", self.center_px.1);
        kv.set("sphere_radius_mm", self.sphere_radius_mm);
        kv.set("depth_mm", self.depth_mm);
        kv.set("contact_radius_mm", self.contact_radius_mm);
        kv.set("pixel_pitch_mm", self.pixel_pitch);
    }
}

/// Spherical-cap indentation of the given depth: inside the contact circle
/// `z = h - sqrt(r^2 - rho^2)` with `h = r - depth`, zero outside. The apex sits
/// at `z = -depth`. Returns the map and the contact radius in mm.
pub fn make_height_sphere_press(
    r: f64,
    depth: f64,
    center_px: (f64, f64),
    grid: Grid,
) -> Result<(HeightMap, f64)> {
    if !(depth >= 0.0 && depth < r) {
        return Err(Error::InvalidInput(format!(
            "press depth {depth} mm must lie in [0, {r}) mm"
        )));
    }
    let h = r - depth;
    let r_star = (r * r - h * h).max(0.0).sqrt();
    let p = grid.pixel_pitch;
    let mut z = vec![0.0; grid.width * grid.height];
    for v in 0..grid.height {
        for u in 0..grid.width {
            let du = (u as f64 - center_px.0) * p;
            let dv = (v as f64 - center_px.1) * p;
            let rho2 = du * du + dv * dv;
            if rho2 <= r_star * r_star {
                z[v * grid.width + u] = h - (r * r - rho2).sqrt();
            }
        }
    }
    Ok((HeightMap::new(grid.width, grid.height, z, p)?, r_star))
}

#[derive(Debug, Clone)]
pub struct RenderedPress {
    pub geometry: PressGeometry,
    pub image: RasterImage,
    /// Separately seeded no-contact frame.
    pub reference: RasterImage,
}

/// Calibration set of sphere presses at random depths and positions.
///
/// Centres are drawn from the middle of the frame (27-73 % of the width,
/// 31-69 % of the height) so every contact disc stays inside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressSet {
    pub count: usize,
    pub grid: Grid,
    pub sphere_radius_mm: f64,
    pub depth_range_mm: (f64, f64),
}

impl Default for PressSet {
    fn default() -> Self {
        Self {
            count: 30,
            grid: Grid::new(256, 192, 0.05),
            sphere_radius_mm: 2.5,
            depth_range_mm: (0.3, 1.0),
        }
    }
}

impl PressSet {
    pub fn render(&self, rig: &LightingRig, seed: u64) -> Result<Vec<RenderedPress>> {
        rig.validate()?;
        let (lo, hi) = self.depth_range_mm;
        if !(lo >= 0.0 && lo <= hi && hi < self.sphere_radius_mm) {
            return Err(Error::InvalidInput(format!(
                "depth range [{lo}, {hi}] mm is not usable"
            )));
        }
        let (w, h) = (self.grid.width as f64, self.grid.height as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let depth = lo + (hi - lo) * rng.random::<f64>();
            let cu = w * (0.27 + 0.46 * rng.random::<f64>());
            let cv = h * (0.31 + 0.38 * rng.random::<f64>());
            let (img_seed, ref_seed) = (rng.random::<u64>(), rng.random::<u64>());
            let (height, r_star) =
                make_height_sphere_press(self.sphere_radius_mm, depth, (cu, cv), self.grid)?;
            let flat = HeightMap::flat(self.grid.width, self.grid.height, self.grid.pixel_pitch)?;
            out.push(RenderedPress {
                geometry: PressGeometry {
                    center_px: (cu, cv),
                    sphere_radius_mm: self.sphere_radius_mm,
                    depth_mm: depth,
                    contact_radius_mm: r_star,
                    pixel_pitch: self.grid.pixel_pitch,
                },
                image: render(&height, rig, img_seed)?,
                reference: render(&flat, rig, ref_seed)?,
            });
        }
        Ok(out)
    }
}

/// Band-limited random surface with RMS `amplitude` mm.
///
/// White noise is low-pass filtered with a Gaussian transfer function whose
/// 1/e^(1/2) point sits at spatial frequency `1 / grit_scale` (cycles/mm), so a
/// smaller grit scale yields a finer texture.
pub fn make_height_rough(
    grit_scale: f64,
    amplitude: f64,
    grid: Grid,
    seed: u64,
) -> Result<HeightMap> {
    if !(grit_scale > 0.0) {
        return Err(Error::InvalidInput(format!(
            "grit scale must be positive, got {grit_scale}"
        )));
    }
    let (w, h, p) = (grid.width, grid.height, grid.pixel_pitch);
    if amplitude == 0.0 {
        return HeightMap::flat(w, h, p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..w * h).map(|_| normal.sample(&mut rng)).collect();
    let mut spec = fft::forward_real(&noise, w, h);
    let cutoff = 1.0 / grit_scale;
    for v in 0..h {
        let fy = fft::signed_bin(v, h) as f64 / (h as f64 * p);
        for u in 0..w {
            let fx = fft::signed_bin(u, w) as f64 / (w as f64 * p);
            let f2 = (fx * fx + fy * fy) / (cutoff * cutoff);
            spec[v * w + u] *= (-0.5 * f2).exp();
        }
    }
    spec[0] = Complex64::new(0.0, 0.0);
    fft::fft2(&mut spec, w, h, Direction::Inverse);
    let mut z: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    z.iter_mut().for_each(|x| *x -= mean);
    let rms = (z.iter().map(|x| x * x).sum::<f64>() / z.len() as f64).sqrt();
    if rms > 0.0 {
        let s = amplitude / rms;
        z.iter_mut().for_each(|x| *x *= s);
    }
    HeightMap::new(w, h, z, p)
}

/// Orange-peel style surface: shallow spherical dimples on a jittered lattice.
pub fn make_height_dimples(
    spacing_mm: f64,
    dimple_radius_mm: f64,
    dimple_depth_mm: f64,
    grid: Grid,
    seed: u64,
) -> Result<HeightMap> {
    if !(spacing_mm > 0.0 && dimple_radius_mm > 0.0 && dimple_depth_mm >= 0.0) {
        return Err(Error::InvalidInput(
            "dimple geometry must be positive".into(),
        ));
    }
    let (w, h, p) = (grid.width, grid.height, grid.pixel_pitch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = rand_distr::Uniform::new(-0.3, 0.3).expect("valid range");
    let mut z = vec![0.0f64; w * h];
    let (span_u, span_v) = (w as f64 * p, h as f64 * p);
    let mut cy = 0.0;
    while cy < span_v + spacing_mm {
        let mut cx = 0.0;
        while cx < span_u + spacing_mm {
            let (jx, jy) = (
                jitter.sample(&mut rng) * spacing_mm,
                jitter.sample(&mut rng) * spacing_mm,
            );
            let (px, py) = (cx + jx, cy + jy);
            let reach = (dimple_radius_mm / p).ceil() as i64 + 1;
            let (pu, pv) = ((px / p).round() as i64, (py / p).round() as i64);
            for v in (pv - reach).max(0)..(pv + reach + 1).min(h as i64) {
                for u in (pu - reach).max(0)..(pu + reach + 1).min(w as i64) {
                    let (dx, dy) = (u as f64 * p - px, v as f64 * p - py);
                    let q = (dx * dx + dy * dy) / (dimple_radius_mm * dimple_radius_mm);
                    if q < 1.0 {
                        let idx = v as usize * w + u as usize;
                        z[idx] = z[idx].min(-dimple_depth_mm * (1.0 - q));
                    }
                }
            }
            cx += spacing_mm;
        }
        cy += spacing_mm;
    }
    HeightMap::new(w, h, z, p)
}

/// Writes the rig and optional press ground truth as a `key=value` sidecar.
pub fn write_sidecar(
    path: impl AsRef<Path>,
    rig: &LightingRig,
    press: Option<&PressGeometry>,
    seed: u64,
) -> Result<()> {
    let mut kv = KeyValues::new();
    kv.set("seed", seed);
    rig.write_kv(&mut kv);
    if let Some(p) = press {
        p.write_kv(&mut kv);
    }
    kv.save(path)
}
