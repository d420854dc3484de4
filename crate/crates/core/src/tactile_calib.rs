//! Gradient labels from sphere presses.
//!
//! A ball of known radius pressed into the gel leaves a spherical cap whose
//! slope is known in closed form at every pixel of the contact disc. Pairing
//! those slopes with the observed pixel colours gives the training set for the
//! intensity-to-gradient regression.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io;
use crate::raster::RasterImage;

pub const DEFAULT_SPHERE_RADIUS_MM: f64 = 2.5;
pub const DEFAULT_CLAMP_FRACTION: f64 = 0.95;
pub const DEFAULT_CONTACT_THRESHOLD: f64 = 0.08;

/// Distance from the sphere centre to the gel surface plane.
pub fn sphere_height(r: f64, r_star: f64) -> Result<f64> {
    if !(r_star > 0.0 && r_star < r) {
        return Err(Error::InvalidInput(format!(
            "contact radius {r_star} mm must lie in (0, {r}) mm"
        )));
    }
    Ok((r * r - r_star * r_star).sqrt())
}

/// Cap slope at `(u, v)` mm from the contact centre. `limit` bounds the radius
/// at which labels are trusted and must stay below `r`.
pub fn sphere_gradient(u: f64, v: f64, r: f64, limit: f64) -> Result<(f64, f64)> {
    let rho2 = u * u + v * v;
    if rho2 > limit * limit || rho2 >= r * r {
        return Err(Error::OutsideDomain { u, v, limit });
    }
    let s = (r * r - rho2).sqrt();
    Ok((u / s, v / s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpherePress {
    pub image: RasterImage,
    pub reference: RasterImage,
    /// Contact centre in pixels.
    pub center: (f64, f64),
    /// Contact radius, mm.
    pub r_star: f64,
    /// Sphere radius, mm.
    pub r: f64,
    pub pixel_pitch: f64,
}

impl SpherePress {
    pub fn new(
        image: RasterImage,
        reference: RasterImage,
        center: (f64, f64),
        r_star: f64,
        r: f64,
        pixel_pitch: f64,
    ) -> Result<Self> {
        if image.dims() != reference.dims() {
            return Err(Error::DimensionMismatch {
                expected: image.dims(),
                actual: reference.dims(),
            });
        }
        if image.channels() != 3 {
            return Err(Error::InvalidInput(
                "press images must have 3 channels".into(),
            ));
        }
        if !(r_star > 0.0 && r_star < r && pixel_pitch > 0.0) {
            return Err(Error::InvalidInput(format!(
                "press geometry requires 0 < r* ({r_star}) < r ({r}) and positive pitch"
            )));
        }
        let (w, h) = (image.width() as f64, image.height() as f64);
        if !(center.0 >= 0.0 && center.0 < w && center.1 >= 0.0 && center.1 < h) {
            return Err(Error::InvalidInput(format!(
                "press centre {center:?} outside image"
            )));
        }
        Ok(Self {
            image,
            reference,
            center,
            r_star,
            r,
            pixel_pitch,
        })
    }

    /// Builds a press from a detected contact circle.
    pub fn detect(
        image: RasterImage,
        reference: RasterImage,
        r: f64,
        pixel_pitch: f64,
        detector: &CircleDetector,
    ) -> Result<Self> {
        let c = detector.detect(&image, &reference)?;
        Self::new(
            image,
            reference,
            c.center,
            c.radius_px * pixel_pitch,
            r,
            pixel_pitch,
        )
    }

    pub fn r_star_px(&self) -> f64 {
        self.r_star / self.pixel_pitch
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSample {
    pub i_r: f64,
    pub i_g: f64,
    pub i_b: f64,
    /// Column coordinate scaled to [0, 1].
    pub u: f64,
    /// Row coordinate scaled to [0, 1].
    pub v: f64,
    pub g_u: f64,
    pub g_v: f64,
}

impl GradientSample {
    pub fn features(&self) -> [f64; 5] {
        [self.i_r, self.i_g, self.i_b, self.u, self.v]
    }

    pub fn label(&self) -> [f64; 2] {
        [self.g_u, self.g_v]
    }
}

/// Pixel coordinate scaled to [0, 1] across an axis of `n` pixels.
#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactCircle {
    pub center: (f64, f64),
    pub radius_px: f64,
    /// Pixels in the filled contact region.
    pub support: usize,
    /// RMS radial residual of the edge points relative to the radius.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleDetector {
    pub threshold: f64,
    pub min_support: usize,
    pub max_residual: f64,
}

impl Default for CircleDetector {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_CONTACT_THRESHOLD,
            min_support: 20,
            max_residual: 0.2,
        }
    }
}

impl CircleDetector {
    pub fn with_threshold(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn detect(&self, image: &RasterImage, reference: &RasterImage) -> Result<ContactCircle> {
        let diff = image.difference(reference)?;
        self.fit_support(diff.width(), diff.height(), |i| {
            diff.data()[i] > self.threshold
        })
    }

    /// Fits a circle to the largest blob of `active` pixels, holes filled.
    pub fn fit_support(
        &self,
        w: usize,
        h: usize,
        active: impl Fn(usize) -> bool,
    ) -> Result<ContactCircle> {
        let on: Vec<bool> = (0..w * h).map(active).collect();
        let blob = largest_component(&on, w, h);
        let support = blob.iter().filter(|&&b| b).count();
        if support < self.min_support {
            return Err(Error::InsufficientSupport {
                pixels: support,
                minimum: self.min_support,
            });
        }
        let exterior = exterior_of(&blob, w, h);
        let mut pts = Vec::new();
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                if exterior[i] {
                    continue;
                }
                if u + 1 < w && exterior[i + 1] {
                    pts.push((u as f64 + 0.5, v as f64));
                }
                if u > 0 && exterior[i - 1] {
                    pts.push((u as f64 - 0.5, v as f64));
                }
                if v + 1 < h && exterior[i + w] {
                    pts.push((u as f64, v as f64 + 0.5));
                }
                if v > 0 && exterior[i - w] {
                    pts.push((u as f64, v as f64 - 0.5));
                }
            }
        }
        let filled = exterior.iter().filter(|&&e| !e).count();
        let (center, radius_px, residual) = kasa_fit(&pts).ok_or(Error::BadCircleFit {
            residual: f64::INFINITY,
            bound: self.max_residual,
        })?;
        // Radial scatter of the edge and disagreement between filled area and
        // fitted area must both stay small; a straight edge passes the first
        // test alone with a huge radius.
        let area_mismatch =
            (filled as f64 / (std::f64::consts::PI * radius_px * radius_px) - 1.0).abs();
        let worst = residual.max(area_mismatch);
        if !(worst <= self.max_residual) {
            return Err(Error::BadCircleFit {
                residual: worst,
                bound: self.max_residual,
            });
        }
        Ok(ContactCircle {
            center,
            radius_px,
            support: filled,
            residual,
        })
    }
}

/// Detects the contact circle with the default support and residual bounds.
pub fn detect_contact_circle(
    image: &RasterImage,
    reference: &RasterImage,
    threshold: f64,
) -> Result<ContactCircle> {
    CircleDetector::with_threshold(threshold).detect(image, reference)
}

fn largest_component(on: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; on.len()];
    let mut best = (0usize, usize::MAX);
    let mut queue = VecDeque::new();
    let mut next = 0;
    for start in 0..on.len() {
        if !on[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (u, v) = ((i % w) as i64, (i / w) as i64);
            for dv in -1..=1 {
                for du in -1..=1 {
                    let (nu, nv) = (u + du, v + dv);
                    if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                        continue;
                    }
                    let j = nv as usize * w + nu as usize;
                    if on[j] && label[j] == usize::MAX {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
        next += 1;
    }
    label.iter().map(|&l| best.0 > 0 && l == best.1).collect()
}

/// Pixels outside `blob` that the image border reaches through 4-connected steps.
fn exterior_of(blob: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut ext = vec![false; blob.len()];
    let mut queue = VecDeque::new();
    let seed = |i: usize, ext: &mut Vec<bool>, q: &mut VecDeque<usize>| {
        if !blob[i] && !ext[i] {
            ext[i] = true;
            q.push_back(i);
        }
    };
    for u in 0..w {
        seed(u, &mut ext, &mut queue);
        seed((h - 1) * w + u, &mut ext, &mut queue);
    }
    for v in 0..h {
        seed(v * w, &mut ext, &mut queue);
        seed(v * w + w - 1, &mut ext, &mut queue);
    }
    while let Some(i) = queue.pop_front() {
        let (u, v) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !blob[j] && !ext[j] {
                ext[j] = true;
                queue.push_back(j);
            }
        };
        if u > 0 {
            visit(i - 1);
        }
        if u + 1 < w {
            visit(i + 1);
        }
        if v > 0 {
            visit(i - w);
        }
        if v + 1 < h {
            visit(i + w);
        }
    }
    ext
}

/// Algebraic circle fit: minimises sum (x^2 + y^2 + D x + E y + F)^2.
fn kasa_fit(pts: &[(f64, f64)]) -> Option<((f64, f64), f64, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / n, my / n);
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for &(x, y) in pts {
        let (x, y) = (x - mx, y - my);
        let row = Vector3::new(x, y, 1.0);
        a += row * row.transpose();
        b -= row * (x * x + y * y);
    }
    let sol = a.lu().solve(&b)?;
    let (cx, cy) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cx * cx + cy * cy - sol[2];
    if !(r2 > 0.0) {
        return None;
    }
    let r = r2.sqrt();
    let ss: f64 = pts
        .iter()
        .map(|&(x, y)| {
            let d = ((x - mx - cx).powi(2) + (y - my - cy).powi(2)).sqrt() - r;
            d * d
        })
        .sum();
    Some(((cx + mx, cy + my), r, (ss / n).sqrt() / r))
}

/// Samples one press: every pixel within `clamp_fraction * r*` of the centre.
pub fn press_samples(press: &SpherePress, clamp_fraction: f64) -> Vec<GradientSample> {
    let img = &press.image;
    let (w, h) = (img.width(), img.height());
    let limit_mm = clamp_fraction * press.r_star;
    let limit_px = limit_mm / press.pixel_pitch;
    let (cu, cv) = press.center;
    let v0 = (cv - limit_px).floor().max(0.0) as usize;
    let v1 = ((cv + limit_px).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    let u0 = (cu - limit_px).floor().max(0.0) as usize;
    let u1 = ((cu + limit_px).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    let mut out = Vec::new();
    if clamp_fraction <= 0.0 {
        return out;
    }
    for v in v0..=v1 {
        for u in u0..=u1 {
            let (du, dv) = (u as f64 - cu, v as f64 - cv);
            if du * du + dv * dv > limit_px * limit_px {
                continue;
            }
            let (x, y) = (du * press.pixel_pitch, dv * press.pixel_pitch);
            // The pixel test above is the authoritative domain; rounding in the
            // mm conversion must not drop a boundary pixel.
            let Ok((g_u, g_v)) = sphere_gradient(x, y, press.r, limit_mm * (1.0 + 1e-12)) else {
                continue;
            };
            let p = img.pixel(u, v);
            out.push(GradientSample {
                i_r: p[0],
                i_g: p[1],
                i_b: p[2],
                u: normalized_coord(u, w),
                v: normalized_coord(v, h),
                g_u,
                g_v,
            });
        }
    }
    out
}

/// Concatenates per-press samples in (press, row, column) order.
pub fn build_dataset(presses: &[SpherePress], clamp_fraction: f64) -> Result<Vec<GradientSample>> {
    if !(0.0..=1.0).contains(&clamp_fraction) {
        return Err(Error::InvalidInput(format!(
            "clamp fraction {clamp_fraction} outside [0, 1]"
        )));
    }
    let parts: Vec<Vec<GradientSample>> = presses
        .par_iter()
        .map(|p| press_samples(p, clamp_fraction))
        .collect();
    Ok(parts.concat())
}

/// One row of a press manifest. Centre and contact radius are optional; when
/// absent the circle is detected from the images.
#[derive(Debug, Clone, PartialEq)]
pub struct PressEntry {
    pub image: PathBuf,
    pub reference: PathBuf,
    pub pixel_pitch: f64,
    pub sphere_radius: f64,
    pub known: Option<((f64, f64), f64)>,
}

const MANIFEST_HEADER: &str =
    "image,reference,pixel_pitch_mm,sphere_radius_mm,center_u,center_v,r_star_mm";

pub fn write_press_manifest(path: impl AsRef<Path>, entries: &[PressEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        let known = match e.known {
            Some(((u, v), r)) => format!("{u},{v},{r}"),
            None => ",,".into(),
        };
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            e.image.display(),
            e.reference.display(),
            e.pixel_pitch,
            e.sphere_radius,
            known
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a manifest; relative image paths resolve against the manifest's directory.
pub fn read_press_manifest(path: impl AsRef<Path>) -> Result<Vec<PressEntry>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("image")) {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 && f.len() != 7 {
            return Err(bad(format!("expected 4 or 7 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}")));
        let known = if f.len() == 7 && !f[4].is_empty() {
            Some(((num(f[4])?, num(f[5])?), num(f[6])?))
        } else {
            None
        };
        out.push(PressEntry {
            image: base.join(f[0]),
            reference: base.join(f[1]),
            pixel_pitch: num(f[2])?,
            sphere_radius: num(f[3])?,
            known,
        });
    }
    Ok(out)
}

/// Presses loaded from a manifest, with the rows that could not be used.
#[derive(Debug)]
pub struct LoadedPresses {
    pub presses: Vec<SpherePress>,
    pub skipped: Vec<(usize, Error)>,
}

/// Loads every manifest row, detecting circles where none are given. Rows
/// that fail are logged and skipped.
pub fn load_presses(entries: &[PressEntry], detector: &CircleDetector) -> LoadedPresses {
    let results: Vec<Result<SpherePress>> = entries
        .par_iter()
        .map(|e| {
            let image = io::load_image(&e.image)?;
            let reference = io::load_image(&e.reference)?;
            match e.known {
                Some((c, r_star)) => {
                    SpherePress::new(image, reference, c, r_star, e.sphere_radius, e.pixel_pitch)
                }
                None => {
                    SpherePress::detect(image, reference, e.sphere_radius, e.pixel_pitch, detector)
                }
            }
        })
        .collect();
    let mut loaded = LoadedPresses {
        presses: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => loaded.presses.push(p),
            Err(e) => {
                log::warn!("skipping press {i} ({}): {e}", entries[i].image.display());
                loaded.skipped.push((i, e));
            }
        }
    }
    loaded
}

const DATASET_HEADER: &str = "i_r,i_g,i_b,u,v,g_u,g_v";

fn columns(samples: &[GradientSample]) -> [Vec<f64>; 7] {
    let col = |f: fn(&GradientSample) -> f64| samples.iter().map(f).collect::<Vec<_>>();
    [
        col(|s| s.i_r),
        col(|s| s.i_g),
        col(|s| s.i_b),
        col(|s| s.u),
        col(|s| s.v),
        col(|s| s.g_u),
        col(|s| s.g_v),
    ]
}

fn from_columns(cols: &[Vec<f64>]) -> Vec<GradientSample> {
    (0..cols[0].len())
        .map(|i| GradientSample {
            i_r: cols[0][i],
            i_g: cols[1][i],
            i_b: cols[2][i],
            u: cols[3][i],
            v: cols[4][i],
            g_u: cols[5][i],
            g_v: cols[6][i],
        })
        .collect()
}

/// `.csv` writes text rows, anything else the VTP1 binary (7 planes, n x 1).
pub fn save_dataset(path: impl AsRef<Path>, samples: &[GradientSample]) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "csv") {
        let mut text = String::with_capacity(samples.len() * 80);
        text.push_str(DATASET_HEADER);
        text.push('\n');
        for s in samples {
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.i_r, s.i_g, s.i_b, s.u, s.v, s.g_u, s.g_v
            ));
        }
        fs::write(path, text)?;
        Ok(())
    } else {
        let cols = columns(samples);
        let planes: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        io::write_vtp1(path, samples.len(), 1, &planes)
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<GradientSample>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    if path.extension().is_some_and(|e| e == "csv") {
        let text = fs::read_to_string(path)?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|x| x.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if vals.len() != 7 {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("expected 7 fields, got {}", vals.len()),
                });
            }
            out.push(GradientSample {
                i_r: vals[0],
                i_g: vals[1],
                i_b: vals[2],
                u: vals[3],
                v: vals[4],
                g_u: vals[5],
                g_v: vals[6],
            });
        }
        Ok(out)
    } else {
        let (w, h, planes) = io::read_vtp1(path)?;
        if planes.len() != 7 || h != 1 {
            return Err(Error::CorruptData {
                path: path.to_path_buf(),
                reason: format!(
                    "expected 7 planes of {w} x 1, got {} of {w} x {h}",
                    planes.len()
                ),
            });
        }
        Ok(from_columns(&planes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tactile_render::{make_height_sphere_press, render, Grid, LightingRig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc_image(w: usize, h: usize, c: (f64, f64), r: f64) -> Vec<bool> {
        (0..w * h)
            .map(|i| {
                let (u, v) = ((i % w) as f64, (i / w) as f64);
                (u - c.0).powi(2) + (v - c.1).powi(2) <= r * r
            })
            .collect()
    }

    #[test]
    fn height_examples() {
        assert!((sphere_height(5.0, 3.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((sphere_height(5.0, 4.0).unwrap() - 3.0).abs() < 1e-12);
        assert!((sphere_height(5.0, 1e-9).unwrap() - 5.0).abs() < 1e-9);
        assert!(sphere_height(5.0, 5.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(sphere_gradient(0.0, 0.0, 5.0, 4.0).unwrap(), (0.0, 0.0));
        assert_eq!(sphere_gradient(3.0, 0.0, 5.0, 4.0).unwrap(), (0.75, 0.0));
        let (a, b) = sphere_gradient(3.0, 3.0, 5.0, 4.5).unwrap();
        let e = 3.0 / 7f64.sqrt();
        assert!((a - e).abs() < 1e-12 && (b - e).abs() < 1e-12);
        assert!(matches!(
            sphere_gradient(3.0, 3.0, 5.0, 4.0),
            Err(Error::OutsideDomain { .. })
        ));
    }

    #[test]
    fn detects_ideal_disc() {
        let (w, h) = (240, 220);
        let on = disc_image(w, h, (100.0, 120.0), 40.0);
        let c = CircleDetector::default()
            .fit_support(w, h, |i| on[i])
            .unwrap();
        assert!(
            (c.center.0 - 100.0).abs() < 0.5 && (c.center.1 - 120.0).abs() < 0.5,
            "{c:?}"
        );
        assert!((c.radius_px - 40.0).abs() < 0.5, "{c:?}");
    }

    #[test]
    fn detects_noisy_disc() {
        let (w, h) = (240, 220);
        let mut on = disc_image(w, h, (100.0, 120.0), 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for b in on.iter_mut() {
            if rng.random::<f64>() < 0.05 {
                *b = !*b;
            }
        }
        let c = CircleDetector::default()
            .fit_support(w, h, |i| on[i])
            .unwrap();
        assert!((c.radius_px - 40.0).abs() < 2.0, "{c:?}");
    }

    #[test]
    fn empty_difference_is_rejected() {
        let img = RasterImage::filled(32, 32, 3, 0.4).unwrap();
        assert!(matches!(
            detect_contact_circle(&img, &img, 0.08),
            Err(Error::InsufficientSupport { .. })
        ));
    }

    #[test]
    fn annulus_is_not_a_disc() {
        let (w, h) = (120, 120);
        // Two separated blobs of comparable size: the largest one wins, fit stays sane.
        let a = disc_image(w, h, (30.0, 30.0), 12.0);
        let b = disc_image(w, h, (85.0, 80.0), 10.0);
        let c = CircleDetector::default()
            .fit_support(w, h, |i| a[i] || b[i])
            .unwrap();
        assert!((c.center.0 - 30.0).abs() < 0.5 && (c.radius_px - 12.0).abs() < 0.5);
        // A thin line has no circular support.
        let line = |i: usize| i / w == 60;
        assert!(matches!(
            CircleDetector::default().fit_support(w, h, line),
            Err(Error::BadCircleFit { .. })
        ));
    }

    fn rendered_press(depth: f64, c: (f64, f64)) -> (SpherePress, f64) {
        let grid = Grid::new(160, 128, 0.05);
        let rig = LightingRig::default().with_noise(0.01);
        let (hm, r_star) = make_height_sphere_press(2.5, depth, c, grid).unwrap();
        let img = render(&hm, &rig, 1).unwrap();
        let reference = render(
            &crate::raster::HeightMap::flat(grid.width, grid.height, 0.05).unwrap(),
            &rig,
            2,
        )
        .unwrap();
        (
            SpherePress::new(img, reference, c, r_star, 2.5, 0.05).unwrap(),
            r_star,
        )
    }

    #[test]
    fn rendered_press_circle_recovered() {
        for (depth, c) in [(0.4, (80.0, 60.0)), (0.8, (70.3, 66.6))] {
            let (p, r_star) = rendered_press(depth, c);
            let got =
                detect_contact_circle(&p.image, &p.reference, DEFAULT_CONTACT_THRESHOLD).unwrap();
            assert!(
                (got.center.0 - c.0).abs() < 1.0 && (got.center.1 - c.1).abs() < 1.0,
                "{got:?}"
            );
            assert!(
                (got.radius_px - r_star / 0.05).abs() < 1.0,
                "{got:?} vs {}",
                r_star / 0.05
            );
        }
    }

    #[test]
    fn sample_count_matches_pixel_count() {
        let (w, h) = (100, 90);
        let img = RasterImage::filled(w, h, 3, 0.5).unwrap();
        let c = (50.0, 45.0);
        let press = SpherePress::new(img.clone(), img, c, 30.0 * 0.05, 2.5, 0.05).unwrap();
        let n = build_dataset(std::slice::from_ref(&press), 0.95)
            .unwrap()
            .len();
        let mut expect = 0;
        for v in 0..h {
            for u in 0..w {
                if (u as f64 - c.0).powi(2) + (v as f64 - c.1).powi(2) <= 28.5 * 28.5 {
                    expect += 1;
                }
            }
        }
        assert_eq!(n, expect);
        assert!(build_dataset(&[press], 0.0).unwrap().is_empty());
    }

    #[test]
    fn labels_are_self_consistent() {
        let (p, _) = rendered_press(0.6, (77.0, 61.0));
        let ds = build_dataset(std::slice::from_ref(&p), 0.95).unwrap();
        assert!(!ds.is_empty());
        for s in &ds {
            let u = s.u * 159.0;
            let v = s.v * 127.0;
            let (x, y) = ((u - 77.0) * 0.05, (v - 61.0) * 0.05);
            let (gu, gv) = sphere_gradient(x, y, 2.5, p.r_star).unwrap();
            assert!((gu - s.g_u).abs() < 1e-9 && (gv - s.g_v).abs() < 1e-9);
            assert!([s.i_r, s.i_g, s.i_b]
                .iter()
                .all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let (p, _) = rendered_press(0.5, (60.0, 50.0));
        let ds = build_dataset(&[p], 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("d.csv");
        save_dataset(&csv, &ds).unwrap();
        assert_eq!(load_dataset(&csv).unwrap(), ds);
        let bin = dir.path().join("d.vtp");
        save_dataset(&bin, &ds).unwrap();
        let back = load_dataset(&bin).unwrap();
        assert_eq!(back.len(), ds.len());
        assert!((back[3].g_u - ds[3].g_u).abs() < 1e-6);
    }

    #[test]
    fn manifest_skips_unreadable_rows() {
        let (p, r_star) = rendered_press(0.5, (60.0, 50.0));
        let dir = tempfile::tempdir().unwrap();
        io::save_image(&p.image, dir.path().join("p.png")).unwrap();
        io::save_image(&p.reference, dir.path().join("ref.png")).unwrap();
        let entries = vec![
            PressEntry {
                image: "p.png".into(),
                reference: "ref.png".into(),
                pixel_pitch: 0.05,
                sphere_radius: 2.5,
                known: Some(((60.0, 50.0), r_star)),
            },
            PressEntry {
                image: "missing.png".into(),
                reference: "ref.png".into(),
                pixel_pitch: 0.05,
                sphere_radius: 2.5,
                known: None,
            },
            PressEntry {
                image: "p.png".into(),
                reference: "ref.png".into(),
                pixel_pitch: 0.05,
                sphere_radius: 2.5,
                known: None,
            },
        ];
        let path = dir.path().join("presses.csv");
        write_press_manifest(&path, &entries).unwrap();
        let read = read_press_manifest(&path).unwrap();
        assert_eq!(read.len(), 3);
        let loaded = load_presses(&read, &CircleDetector::default());
        assert_eq!(loaded.presses.len(), 2);
        assert_eq!(loaded.skipped.len(), 1);
        assert_eq!(loaded.skipped[0].0, 1);
        assert!((loaded.presses[1].r_star - r_star).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn gradient_is_odd(u in -1.5f64..1.5, v in -1.5f64..1.5) {
            let (a, b) = sphere_gradient(u, v, 2.5, 2.2).unwrap();
            let (c, d) = sphere_gradient(-u, -v, 2.5, 2.2).unwrap();
            prop_assert_eq!((a, b), (-c, -d));
        }

        #[test]
        fn gradient_grows_with_radius(t in 0.0f64..std::f64::consts::TAU, r1 in 0.01f64..2.0, dr in 0.01f64..0.2) {
            let g = |rho: f64| {
                let (a, b) = sphere_gradient(rho * t.cos(), rho * t.sin(), 2.5, 2.3).unwrap();
                a.hypot(b)
            };
            prop_assert!(g(r1 + dr) > g(r1));
        }

        #[test]
        fn height_identity(r in 0.5f64..10.0, frac in 0.01f64..0.99) {
            let rs = frac * r;
            let h = sphere_height(r, rs).unwrap();
            prop_assert!((h * h + rs * rs - r * r).abs() < 1e-12 * r * r);
        }
    }
}
