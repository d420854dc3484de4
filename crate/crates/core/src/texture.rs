//! Roughness and texture statistics on difference images and height maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fft;
use crate::raster::{RasterImage, ScalarField};

pub const DEFAULT_CUTOFF: f64 = 0.25;
pub const DEFAULT_LEVELS: usize = 32;
pub const DEFAULT_WAVELET_LEVELS: usize = 3;

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// `log(1 + |F|)` with the zero frequency moved to `(w/2, h/2)`.
    pub log_amplitude: ScalarField,
    pub high_freq_ratio: f64,
    /// Radial cutoff as a fraction of Nyquist.
    pub cutoff_radius: f64,
}

impl SpectrumReport {
    pub fn to_image(&self) -> RasterImage {
        self.log_amplitude.to_image_autoscale()
    }
}

pub fn amplitude_spectrum(diff: &RasterImage) -> Result<SpectrumReport> {
    amplitude_spectrum_with(&diff.to_grayscale().to_field()?, DEFAULT_CUTOFF)
}

/// Spectrum of a scalar field with an explicit cutoff.
///
/// The radius of bin `(fx, fy)` in cycles/sample is `hypot(fx, fy) / 0.5`, so
/// 1.0 is Nyquist along an axis.
pub fn amplitude_spectrum_with(field: &ScalarField, cutoff_radius: f64) -> Result<SpectrumReport> {
    if !(cutoff_radius >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "cutoff must be non-negative, got {cutoff_radius}"
        )));
    }
    let (w, h) = (field.width(), field.height());
    let spec = fft::forward_real(field.data(), w, h);

    let mut shifted = vec![0.0; w * h];
    let (mut total, mut high) = (0.0, 0.0);
    for v in 0..h {
        let fy = fft::signed_bin(v, h) as f64 / h as f64;
        for u in 0..w {
            let fx = fft::signed_bin(u, w) as f64 / w as f64;
            let c = spec[v * w + u];
            let (su, sv) = ((u + w / 2) % w, (v + h / 2) % h);
            shifted[sv * w + su] = c.norm().ln_1p();
            if u == 0 && v == 0 {
                continue;
            }
            let e = c.norm_sqr();
            total += e;
            if (fx * fx + fy * fy).sqrt() / 0.5 > cutoff_radius {
                high += e;
            }
        }
    }
    // Rounding leaves ~1e-30 of spurious energy in a constant image.
    let dc = spec[0].norm_sqr();
    let high_freq_ratio = if total <= 1e-24 * dc.max(f64::MIN_POSITIVE) || total == 0.0 {
        0.0
    } else {
        (high / total).clamp(0.0, 1.0)
    };
    Ok(SpectrumReport {
        log_amplitude: ScalarField::new(w, h, shifted)?,
        high_freq_ratio,
        cutoff_radius,
    })
}

fn quantize(x: f64, levels: usize) -> usize {
    if !(x > 0.0) {
        return 0;
    }
    ((x * levels as f64).floor() as usize).min(levels - 1)
}

/// Symmetric normalized co-occurrence matrix of `field` (values in `[0, 1]`).
pub fn glcm(field: &ScalarField, levels: usize, offset: (i64, i64)) -> Result<Vec<f64>> {
    if levels < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 grey levels, got {levels}"
        )));
    }
    let (w, h) = (field.width() as i64, field.height() as i64);
    let (du, dv) = offset;
    if du.abs() >= w || dv.abs() >= h {
        return Err(Error::InvalidInput(format!(
            "offset ({du}, {dv}) does not fit a {w}x{h} image"
        )));
    }
    let bins: Vec<usize> = field.data().iter().map(|&x| quantize(x, levels)).collect();
    let mut m = vec![0.0; levels * levels];
    let mut pairs = 0usize;
    for v in 0.max(-dv)..h.min(h - dv) {
        for u in 0.max(-du)..w.min(w - du) {
            let i = bins[(v * w + u) as usize];
            let j = bins[((v + dv) * w + u + du) as usize];
            m[i * levels + j] += 1.0;
            m[j * levels + i] += 1.0;
            pairs += 2;
        }
    }
    if pairs > 0 {
        let s = 1.0 / pairs as f64;
        m.iter_mut().for_each(|x| *x *= s);
    }
    Ok(m)
}

pub fn glcm_contrast(field: &ScalarField, levels: usize, offset: (i64, i64)) -> Result<f64> {
    let m = glcm(field, levels, offset)?;
    let mut c = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            let d = i as f64 - j as f64;
            c += d * d * m[i * levels + j];
        }
    }
    Ok(c)
}

/// One level of the orthonormal 2-D Haar transform.
#[derive(Debug, Clone)]
pub struct HaarLevel {
    pub width: usize,
    pub height: usize,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

impl HaarLevel {
    pub fn energy(&self) -> f64 {
        self.lh
            .iter()
            .chain(&self.hl)
            .chain(&self.hh)
            .map(|x| x * x)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct HaarDecomposition {
    /// Finest level first.
    pub levels: Vec<HaarLevel>,
    pub approx: Vec<f64>,
    pub approx_width: usize,
    pub approx_height: usize,
}

impl HaarDecomposition {
    pub fn total_energy(&self) -> f64 {
        self.levels.iter().map(HaarLevel::energy).sum::<f64>()
            + self.approx.iter().map(|x| x * x).sum::<f64>()
    }
}

// Odd lengths borrow the first sample to close the last pair.
fn haar_1d(x: &[f64], lo: &mut Vec<f64>, hi: &mut Vec<f64>) {
    let n = x.len();
    let half = n.div_ceil(2);
    lo.clear();
    hi.clear();
    for k in 0..half {
        let a = x[2 * k];
        let b = x[(2 * k + 1) % n];
        lo.push((a + b) * std::f64::consts::FRAC_1_SQRT_2);
        hi.push((a - b) * std::f64::consts::FRAC_1_SQRT_2);
    }
}

fn haar_step(data: &[f64], w: usize, h: usize) -> (Vec<f64>, HaarLevel) {
    let (hw, hh) = (w.div_ceil(2), h.div_ceil(2));
    let mut row_lo = vec![0.0; hw * h];
    let mut row_hi = vec![0.0; hw * h];
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for v in 0..h {
        haar_1d(&data[v * w..(v + 1) * w], &mut lo, &mut hi);
        row_lo[v * hw..(v + 1) * hw].copy_from_slice(&lo);
        row_hi[v * hw..(v + 1) * hw].copy_from_slice(&hi);
    }
    let columns = |src: &[f64]| {
        let mut l = vec![0.0; hw * hh];
        let mut d = vec![0.0; hw * hh];
        let mut col = vec![0.0; h];
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for u in 0..hw {
            for v in 0..h {
                col[v] = src[v * hw + u];
            }
            haar_1d(&col, &mut lo, &mut hi);
            for v in 0..hh {
                l[v * hw + u] = lo[v];
                d[v * hw + u] = hi[v];
            }
        }
        (l, d)
    };
    let (ll, lh) = columns(&row_lo);
    let (hl, hh_band) = columns(&row_hi);
    (
        ll,
        HaarLevel {
            width: hw,
            height: hh,
            lh,
            hl,
            hh: hh_band,
        },
    )
}

pub fn haar_decompose(field: &ScalarField, levels: usize) -> Result<HaarDecomposition> {
    let (w, h) = (field.width(), field.height());
    let need = 1usize.checked_shl(levels as u32).unwrap_or(usize::MAX);
    if levels == 0 || w < need || h < need {
        return Err(Error::InvalidInput(format!(
            "{w}x{h} image is too small for {levels} wavelet levels"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let (mut data, mut cw, mut ch) = (field.data().to_vec(), w, h);
    for _ in 0..levels {
        let (ll, level) = haar_step(&data, cw, ch);
        cw = level.width;
        ch = level.height;
        data = ll;
        out.push(level);
    }
    Ok(HaarDecomposition {
        levels: out,
        approx: data,
        approx_width: cw,
        approx_height: ch,
    })
}

/// Detail energy per level, finest first.
pub fn wavelet_energy(field: &ScalarField, levels: usize) -> Result<Vec<f64>> {
    Ok(haar_decompose(field, levels)?
        .levels
        .iter()
        .map(HaarLevel::energy)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureFeatures {
    pub wavelet_energies: Vec<f64>,
    pub glcm_contrast: f64,
}

impl TextureFeatures {
    pub fn as_vec(&self) -> Vec<f64> {
        let mut v = self.wavelet_energies.clone();
        v.push(self.glcm_contrast);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureConfig {
    pub wavelet_levels: usize,
    pub glcm_levels: usize,
    pub glcm_offset: (i64, i64),
    /// Side of the square sub-windows used for the pooled spread.
    pub tile: usize,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            wavelet_levels: DEFAULT_WAVELET_LEVELS,
            glcm_levels: DEFAULT_LEVELS,
            glcm_offset: (1, 0),
            tile: 32,
        }
    }
}

impl TextureConfig {
    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.wavelet_levels)
            .map(|l| format!("wavelet_l{l}"))
            .collect();
        names.push("glcm_contrast".into());
        names
    }
}

/// Features of a field whose values are already in `[0, 1]`.
pub fn texture_features(field: &ScalarField, cfg: &TextureConfig) -> Result<TextureFeatures> {
    Ok(TextureFeatures {
        wavelet_energies: wavelet_energy(field, cfg.wavelet_levels)?,
        glcm_contrast: glcm_contrast(field, cfg.glcm_levels, cfg.glcm_offset)?,
    })
}

#[derive(Debug, Clone)]
pub struct Discrimination {
    pub names: Vec<String>,
    pub features_a: TextureFeatures,
    pub features_b: TextureFeatures,
    pub abs_difference: Vec<f64>,
    /// `|mean_a - mean_b| / sqrt((var_a + var_b) / 2)` over tiles, per feature.
    pub margins: Vec<f64>,
}

impl Discrimination {
    pub fn max_margin(&self) -> f64 {
        self.margins.iter().copied().fold(0.0, f64::max)
    }

    pub fn margin(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.margins[i])
    }

    pub fn to_csv(&self) -> String {
        let fa = self.features_a.as_vec();
        let fb = self.features_b.as_vec();
        let mut s = String::from("feature,a,b,abs_difference,margin\n");
        for i in 0..self.names.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.names[i], fa[i], fb[i], self.abs_difference[i], self.margins[i]
            );
        }
        s
    }
}

fn rescale(field: &ScalarField, lo: f64, hi: f64) -> ScalarField {
    let span = hi - lo;
    if span > 0.0 {
        field.map(|x| (x - lo) / span)
    } else {
        field.map(|_| 0.0)
    }
}

fn tiles(field: &ScalarField, tile: usize) -> Vec<ScalarField> {
    let (w, h) = (field.width(), field.height());
    let mut out = Vec::new();
    for tv in 0..h / tile {
        for tu in 0..w / tile {
            out.push(ScalarField::from_fn(tile, tile, |u, v| {
                field.get(tu * tile + u, tv * tile + v)
            }));
        }
    }
    out
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

/// Compares two surfaces on a shared intensity scale.
///
/// Both inputs are mapped to `[0, 1]` with their joint range, so a pair that
/// differs only in texture keeps its contrast relationship.
pub fn discriminate(
    a: &ScalarField,
    b: &ScalarField,
    cfg: &TextureConfig,
) -> Result<Discrimination> {
    let (lo, hi) = a
        .data()
        .iter()
        .chain(b.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let (na, nb) = (rescale(a, lo, hi), rescale(b, lo, hi));
    let features_a = texture_features(&na, cfg)?;
    let features_b = texture_features(&nb, cfg)?;

    let (ta, tb) = (tiles(&na, cfg.tile), tiles(&nb, cfg.tile));
    if ta.len() < 2 || tb.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two {t}x{t} tiles per input",
            t = cfg.tile
        )));
    }
    let per_tile = |ts: &[ScalarField]| -> Result<Vec<Vec<f64>>> {
        ts.iter()
            .map(|t| Ok(texture_features(t, cfg)?.as_vec()))
            .collect()
    };
    let (fa, fb) = (per_tile(&ta)?, per_tile(&tb)?);
    let names = cfg.feature_names();
    let mut margins = Vec::with_capacity(names.len());
    let mut any_spread = false;
    for k in 0..names.len() {
        let xa: Vec<f64> = fa.iter().map(|f| f[k]).collect();
        let xb: Vec<f64> = fb.iter().map(|f| f[k]).collect();
        let ((ma, va), (mb, vb)) = (mean_var(&xa), mean_var(&xb));
        let pooled = ((va + vb) / 2.0).sqrt();
        let diff = (ma - mb).abs();
        any_spread |= pooled > 0.0;
        margins.push(if diff == 0.0 {
            0.0
        } else if pooled > 0.0 {
            diff / pooled
        } else {
            f64::INFINITY
        });
    }
    if !any_spread {
        return Err(Error::ZeroVariance);
    }
    let abs_difference = features_a
        .as_vec()
        .iter()
        .zip(features_b.as_vec())
        .map(|(x, y)| (x - y).abs())
        .collect();
    Ok(Discrimination {
        names,
        features_a,
        features_b,
        abs_difference,
        margins,
    })
}

/// `name,high_freq_ratio,cutoff_radius` rows.
pub fn spectrum_csv(rows: &[(String, &SpectrumReport)]) -> String {
    let mut s = String::from("name,high_freq_ratio,cutoff_radius\n");
    for (name, r) in rows {
        let _ = writeln!(s, "{name},{},{}", r.high_freq_ratio, r.cutoff_radius);
    }
    s
}

pub fn save_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
