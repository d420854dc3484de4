//! Height from gradients by a periodic Fourier-domain Poisson solve.

use rustfft::num_complex::Complex64;

use crate::diff::{self, Boundary};
use crate::error::{Error, Result};
use crate::fft::{self, Direction};
use crate::raster::{GradientField, HeightMap, RasterImage, ScalarField};

/// Discretisation of the Laplacian in frequency space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Exact derivatives of the trigonometric interpolant: `-(kx^2 + ky^2)`.
    #[default]
    Continuous,
    /// Eigenvalues of the 5-point stencil: `-(2 - 2 cos)/pitch^2` per axis.
    Discrete,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "discrete" => Ok(Self::Discrete),
            other => Err(Error::InvalidInput(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Central-difference divergence with one-sided borders.
pub fn divergence(g: &GradientField, pixel_pitch: f64) -> ScalarField {
    divergence_with(g, pixel_pitch, Boundary::OneSided)
}

fn divergence_with(g: &GradientField, pitch: f64, boundary: Boundary) -> ScalarField {
    let (w, h) = (g.width(), g.height());
    let a = diff::d_du(g.gu(), w, h, pitch, boundary);
    let b = diff::d_dv(g.gv(), w, h, pitch, boundary);
    ScalarField::new(w, h, a.iter().zip(&b).map(|(x, y)| x + y).collect()).expect("matching sizes")
}

fn check_dims(w: usize, h: usize) -> Result<()> {
    if w < 2 || h < 2 {
        return Err(Error::InvalidInput(format!(
            "Poisson solve needs at least 2x2 samples, got {w}x{h}"
        )));
    }
    Ok(())
}

/// Angular wavenumber of bin `k` (rad/mm), zero at the unpaired Nyquist bin
/// where a first derivative has no real-valued representation.
fn derivative_symbol(k: usize, n: usize, pitch: f64) -> f64 {
    if fft::is_nyquist(k, n) {
        0.0
    } else {
        std::f64::consts::TAU * fft::signed_bin(k, n) as f64 / (n as f64 * pitch)
    }
}

fn laplacian_symbol(scheme: Scheme, m: usize, n: usize, w: usize, h: usize, pitch: f64) -> f64 {
    match scheme {
        Scheme::Continuous => {
            let tau = std::f64::consts::TAU;
            let kx = tau * fft::signed_bin(m, w) as f64 / (w as f64 * pitch);
            let ky = tau * fft::signed_bin(n, h) as f64 / (h as f64 * pitch);
            -(kx * kx + ky * ky)
        }
        Scheme::Discrete => {
            let tx = std::f64::consts::TAU * m as f64 / w as f64;
            let ty = std::f64::consts::TAU * n as f64 / h as f64;
            -((2.0 - 2.0 * tx.cos()) + (2.0 - 2.0 * ty.cos())) / (pitch * pitch)
        }
    }
}

fn solve_spectrum(
    mut spec: Vec<Complex64>,
    w: usize,
    h: usize,
    pitch: f64,
    scheme: Scheme,
) -> Result<HeightMap> {
    for n in 0..h {
        for m in 0..w {
            let i = n * w + m;
            spec[i] = if m == 0 && n == 0 {
                Complex64::new(0.0, 0.0)
            } else {
                spec[i] / laplacian_symbol(scheme, m, n, w, h, pitch)
            };
        }
    }
    fft::fft2(&mut spec, w, h, Direction::Inverse);
    HeightMap::new(w, h, spec.iter().map(|c| c.re).collect(), pitch)
}

/// Solves `lap(phi) = rho` on the periodic grid with `mean(phi) = 0`.
pub fn poisson_solve(rho: &ScalarField, pixel_pitch: f64, scheme: Scheme) -> Result<HeightMap> {
    let (w, h) = (rho.width(), rho.height());
    check_dims(w, h)?;
    if !(pixel_pitch > 0.0) {
        return Err(Error::InvalidInput(format!(
            "pixel pitch must be positive, got {pixel_pitch}"
        )));
    }
    solve_spectrum(
        fft::forward_real(rho.data(), w, h),
        w,
        h,
        pixel_pitch,
        scheme,
    )
}

/// Mean-anchored heights (mm) whose gradient best matches `g` on the periodic grid.
pub fn reconstruct(g: &GradientField, pixel_pitch: f64) -> Result<HeightMap> {
    reconstruct_with(g, pixel_pitch, Scheme::default())
}

/// The divergence is taken consistently with the scheme: spectrally for
/// [`Scheme::Continuous`], by wrapped central differences for [`Scheme::Discrete`].
pub fn reconstruct_with(g: &GradientField, pixel_pitch: f64, scheme: Scheme) -> Result<HeightMap> {
    let (w, h) = (g.width(), g.height());
    check_dims(w, h)?;
    if !(pixel_pitch > 0.0) {
        return Err(Error::InvalidInput(format!(
            "pixel pitch must be positive, got {pixel_pitch}"
        )));
    }
    match scheme {
        Scheme::Continuous => {
            let gu = fft::forward_real(g.gu(), w, h);
            let gv = fft::forward_real(g.gv(), w, h);
            let mut spec = vec![Complex64::new(0.0, 0.0); w * h];
            for n in 0..h {
                let ky = derivative_symbol(n, h, pixel_pitch);
                for m in 0..w {
                    let kx = derivative_symbol(m, w, pixel_pitch);
                    let i = n * w + m;
                    spec[i] = Complex64::new(0.0, 1.0) * (gu[i] * kx + gv[i] * ky);
                }
            }
            solve_spectrum(spec, w, h, pixel_pitch, scheme)
        }
        Scheme::Discrete => {
            let rho = divergence_with(g, pixel_pitch, Boundary::Periodic);
            solve_spectrum(
                fft::forward_real(rho.data(), w, h),
                w,
                h,
                pixel_pitch,
                scheme,
            )
        }
    }
}

/// Gradient of a height map matching the scheme's derivative: spectral for
/// `Continuous`, wrapped central differences for `Discrete`.
pub fn gradient(f: &HeightMap, scheme: Scheme) -> GradientField {
    let (w, h, p) = (f.width(), f.height(), f.pixel_pitch());
    match scheme {
        Scheme::Continuous => {
            let spec = fft::forward_real(f.z(), w, h);
            let mut du = vec![Complex64::new(0.0, 0.0); w * h];
            let mut dv = du.clone();
            for n in 0..h {
                let ky = derivative_symbol(n, h, p);
                for m in 0..w {
                    let kx = derivative_symbol(m, w, p);
                    let i = n * w + m;
                    du[i] = Complex64::new(0.0, kx) * spec[i];
                    dv[i] = Complex64::new(0.0, ky) * spec[i];
                }
            }
            fft::fft2(&mut du, w, h, Direction::Inverse);
            fft::fft2(&mut dv, w, h, Direction::Inverse);
            GradientField::new(
                w,
                h,
                du.iter().map(|c| c.re).collect(),
                dv.iter().map(|c| c.re).collect(),
            )
            .expect("matching sizes")
        }
        Scheme::Discrete => GradientField::new(
            w,
            h,
            diff::d_du(f.z(), w, h, p, Boundary::Periodic),
            diff::d_dv(f.z(), w, h, p, Boundary::Periodic),
        )
        .expect("matching sizes"),
    }
}

/// Laplacian of a height map matching the scheme's `poisson_solve` operator.
pub fn laplacian(f: &HeightMap, scheme: Scheme) -> ScalarField {
    let (w, h, p) = (f.width(), f.height(), f.pixel_pitch());
    match scheme {
        Scheme::Continuous => {
            let mut spec = fft::forward_real(f.z(), w, h);
            for n in 0..h {
                for m in 0..w {
                    spec[n * w + m] *= laplacian_symbol(scheme, m, n, w, h, p);
                }
            }
            fft::fft2(&mut spec, w, h, Direction::Inverse);
            ScalarField::new(w, h, spec.iter().map(|c| c.re).collect()).expect("matching sizes")
        }
        Scheme::Discrete => ScalarField::from_fn(w, h, |u, v| {
            let z = |a: usize, b: usize| f.get(a % w, b % h);
            (z(u + 1, v) + z(u + w - 1, v) + z(u, v + 1) + z(u, v + h - 1) - 4.0 * z(u, v))
                / (p * p)
        }),
    }
}

/// Vertical component of the unit surface normal, 1 on flat regions.
pub fn normal_z_image(h: &HeightMap) -> RasterImage {
    let normals = crate::tactile_render::normals_from_height(h);
    let data = normals.normals.iter().map(|n| -n[2]).collect();
    RasterImage::new(h.width(), h.height(), 1, data).expect("matching sizes")
}

/// Heights rescaled to [0, 1] for display.
pub fn height_image(h: &HeightMap) -> RasterImage {
    h.to_field().to_image_autoscale()
}
