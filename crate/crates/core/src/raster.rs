//! Pixel grids shared by every stage of the pipeline.
//!
//! All grids are row-major with the origin at the top-left corner. The column
//! index is `u` and the row index is `v`; `index(u, v) = v * width + u`.

use crate::error::{Error, Result};

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{what} contains a non-finite value at index {pos}"
        )));
    }
    Ok(())
}

fn check_len(width: usize, height: usize, per_pixel: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(format!(
            "grid must be non-empty, got {width}x{height}"
        )));
    }
    if width * height * per_pixel != len {
        return Err(Error::InvalidInput(format!(
            "{width}x{height}x{per_pixel} grid needs {} values, got {len}",
            width * height * per_pixel
        )));
    }
    Ok(())
}

/// Multi-channel image with float intensities, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        check_len(width, height, channels, data.len())?;
        check_finite(&data, "image")?;
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, c: usize) -> f64 {
        self.data[(v * self.width + u) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let start = (v * self.width + u) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Single-channel luminance as the unweighted channel mean.
    pub fn to_grayscale(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Per-pixel mean over channels of `|self - other|`, as a one-channel image.
    pub fn difference(&self, other: &RasterImage) -> Result<RasterImage> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .zip(other.data.chunks_exact(self.channels))
            .map(|(a, b)| {
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / self.channels as f64
            })
            .collect();
        Ok(RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// The single channel of a grayscale image as a scalar field.
    pub fn to_field(&self) -> Result<ScalarField> {
        if self.channels != 1 {
            return Err(Error::InvalidInput(format!(
                "expected a single-channel image, got {} channels",
                self.channels
            )));
        }
        ScalarField::new(self.width, self.height, self.data.clone())
    }
}

/// Free function form of [`RasterImage::difference`].
pub fn difference_image(a: &RasterImage, b: &RasterImage) -> Result<RasterImage> {
    a.difference(b)
}

/// Free function form of [`RasterImage::to_grayscale`].
pub fn to_grayscale(img: &RasterImage) -> RasterImage {
    img.to_grayscale()
}

/// Generic real-valued grid (divergence fields, spectra, intermediate maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, 1, data.len())?;
        check_finite(&data, "field")?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.data[v * self.width + u] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Linear rescale of `[lo, hi]` onto a grayscale image in `[0, 1]`.
    pub fn to_image(&self, lo: f64, hi: f64) -> RasterImage {
        let span = if hi > lo { hi - lo } else { 1.0 };
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .map(|&x| ((x - lo) / span).clamp(0.0, 1.0))
                .collect(),
        }
    }

    /// Rescale using the field's own min and max.
    pub fn to_image_autoscale(&self) -> RasterImage {
        let (lo, hi) = min_max(&self.data);
        self.to_image(lo, hi)
    }
}

pub(crate) fn min_max(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Per-pixel relative depth from a monocular depth provider.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(ScalarField);

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let field = ScalarField::new(width, height, values)?;
        if let Some(pos) = field.data.iter().position(|&x| x < 0.0) {
            return Err(Error::InvalidInput(format!(
                "depth must be non-negative, found {} at index {pos}",
                field.data[pos]
            )));
        }
        Ok(Self(field))
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn as_field(&self) -> &ScalarField {
        &self.0
    }
}

/// Binary target mask paired with a [`DepthMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_len(width, height, 1, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Accepts 0/1 values only.
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .enumerate()
            .map(|(i, &x)| match x {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::InvalidInput(format!(
                    "mask value {x} at index {i} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Per-pixel surface slopes `(df/du, df/dv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    gu: Vec<f64>,
    gv: Vec<f64>,
}

impl GradientField {
    pub fn new(width: usize, height: usize, gu: Vec<f64>, gv: Vec<f64>) -> Result<Self> {
        check_len(width, height, 1, gu.len())?;
        check_len(width, height, 1, gv.len())?;
        check_finite(&gu, "gradient u")?;
        check_finite(&gv, "gradient v")?;
        Ok(Self {
            width,
            height,
            gu,
            gv,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            gu: vec![0.0; width * height],
            gv: vec![0.0; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut gu = Vec::with_capacity(width * height);
        let mut gv = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                let (a, b) = f(u, v);
                gu.push(a);
                gv.push(b);
            }
        }
        Self {
            width,
            height,
            gu,
            gv,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gu(&self) -> &[f64] {
        &self.gu
    }

    pub fn gv(&self) -> &[f64] {
        &self.gv
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> (f64, f64) {
        let i = v * self.width + u;
        (self.gu[i], self.gv[i])
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &GradientField, beta: f64) -> Result<GradientField> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height, 2),
                actual: (other.width, other.height, 2),
            });
        }
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect()
        };
        Ok(GradientField {
            width: self.width,
            height: self.height,
            gu: mix(&self.gu, &other.gu),
            gv: mix(&self.gv, &other.gv),
        })
    }

    /// Circular shift by `(du, dv)` pixels: output(u + du, v + dv) = input(u, v).
    pub fn roll(&self, du: usize, dv: usize) -> GradientField {
        let (w, h) = (self.width, self.height);
        let mut gu = vec![0.0; w * h];
        let mut gv = vec![0.0; w * h];
        for v in 0..h {
            for u in 0..w {
                let dst = ((v + dv) % h) * w + (u + du) % w;
                gu[dst] = self.gu[v * w + u];
                gv[dst] = self.gv[v * w + u];
            }
        }
        GradientField {
            width: w,
            height: h,
            gu,
            gv,
        }
    }
}

/// Surface height `z = f(u, v)` in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    width: usize,
    height: usize,
    z: Vec<f64>,
    pixel_pitch: f64,
}

impl HeightMap {
    pub fn new(width: usize, height: usize, z: Vec<f64>, pixel_pitch: f64) -> Result<Self> {
        check_len(width, height, 1, z.len())?;
        check_finite(&z, "height map")?;
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "pixel pitch must be positive, got {pixel_pitch}"
            )));
        }
        Ok(Self {
            width,
            height,
            z,
            pixel_pitch,
        })
    }

    pub fn flat(width: usize, height: usize, pixel_pitch: f64) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height], pixel_pitch)
    }

    pub fn from_field(field: ScalarField, pixel_pitch: f64) -> Result<Self> {
        let (w, h) = (field.width, field.height);
        Self::new(w, h, field.data, pixel_pitch)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.z[v * self.width + u]
    }

    pub fn mean(&self) -> f64 {
        self.z.iter().sum::<f64>() / self.z.len() as f64
    }

    pub fn rms(&self) -> f64 {
        (self.z.iter().map(|x| x * x).sum::<f64>() / self.z.len() as f64).sqrt()
    }

    pub fn to_field(&self) -> ScalarField {
        ScalarField {
            width: self.width,
            height: self.height,
            data: self.z.clone(),
        }
    }

    /// Copy with `offset` added to every height.
    pub fn shifted(&self, offset: f64) -> HeightMap {
        HeightMap {
            z: self.z.iter().map(|x| x + offset).collect(),
            ..self.clone()
        }
    }
}
