//! Long-range distance estimation from a monocular depth map and a target mask.
//!
//! The pipeline averages relative depth over the segmented target and maps that
//! mean through a fitted monotone-decay curve to a metric distance in cm.

mod lm;
mod models;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

pub use lm::{LeastSquares, LmConfig, LmOutcome};
pub use models::{DecayModel, DoubleExpModel, Family};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, SegMask};

/// Distances (cm) at which tracking error is scored.
pub const CHECKPOINTS_CM: [f64; 9] = [50.0, 45.0, 40.0, 35.0, 30.0, 25.0, 20.0, 15.0, 10.0];

/// Mean depth over the non-zero pixels of `mask`.
pub fn mask_mean_depth(depth: &DepthMap, mask: &SegMask) -> Result<f64> {
    if (depth.width(), depth.height()) != (mask.width(), mask.height()) {
        return Err(Error::DimensionMismatch {
            expected: (depth.width(), depth.height(), 1),
            actual: (mask.width(), mask.height(), 1),
        });
    }
    let (sum, count) = depth
        .values()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&d, _)| (s + d, n + 1));
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

pub fn predict_distance(model: &DoubleExpModel, z_img: f64) -> f64 {
    model.predict(z_img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub run_id: String,
    pub speed_cmps: f64,
    pub z_world_cm: f64,
    pub z_img: f64,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub lm: LmConfig,
    /// Samples nearer than this are excluded from the fit; `None` keeps all.
    pub min_world_cm: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            min_world_cm: Some(10.0),
        }
    }
}

impl FitConfig {
    pub fn unrestricted() -> Self {
        Self {
            min_world_cm: None,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport<M> {
    pub model: M,
    /// `1 - SS_res / SS_tot`; zero when the targets have no spread.
    pub r_squared: f64,
    pub rmse: f64,
    pub iterations: usize,
    /// `z_world - prediction` per fitted sample, in input order.
    pub residuals: Vec<f64>,
    /// The `(z_img, z_world)` pairs actually used.
    pub points: Vec<(f64, f64)>,
    pub converged: bool,
}

impl<M> FitReport<M> {
    pub fn sse(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }

    fn map_model<N>(self, f: impl FnOnce(M) -> N) -> FitReport<N> {
        FitReport {
            model: f(self.model),
            r_squared: self.r_squared,
            rmse: self.rmse,
            iterations: self.iterations,
            residuals: self.residuals,
            points: self.points,
            converged: self.converged,
        }
    }
}

pub(crate) fn r_squared(ys: &[f64], residuals: &[f64]) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        0.0
    }
}

struct CurveProblem<'a> {
    family: Family,
    xs: &'a [f64],
    ys: &'a [f64],
}

impl LeastSquares for CurveProblem<'_> {
    fn residual_count(&self) -> usize {
        self.xs.len()
    }

    fn param_count(&self) -> usize {
        self.family.param_count()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for (i, (&x, &y)) in self.xs.iter().zip(self.ys).enumerate() {
            let (phi, _) = self.family.basis(x, &p[2..]);
            out[i] = y - (p[0] * phi[0] + p[1] * phi[1]);
        }
    }

    fn jacobian(&self, p: &[f64], out: &mut DMatrix<f64>) {
        let nt = self.family.shape_count();
        for (i, &x) in self.xs.iter().enumerate() {
            let (phi, dphi) = self.family.basis(x, &p[2..]);
            out[(i, 0)] = -phi[0];
            out[(i, 1)] = -phi[1];
            for k in 0..nt {
                out[(i, 2 + k)] = -(p[0] * dphi[0][k] + p[1] * dphi[1][k]);
            }
        }
    }
}

/// Least-squares linear coefficients for fixed shape parameters.
fn linear_coefficients(family: Family, xs: &[f64], ys: &[f64], theta: &[f64]) -> Option<[f64; 2]> {
    let n = xs.len();
    let mut design = DMatrix::zeros(n, 2);
    for (i, &x) in xs.iter().enumerate() {
        let (phi, _) = family.basis(x, theta);
        design[(i, 0)] = phi[0];
        design[(i, 1)] = phi[1];
    }
    if design.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let svd = design.svd(true, true);
    let tol = 1e-13 * svd.singular_values.max();
    let sol = svd.solve(&DVector::from_column_slice(ys), tol).ok()?;
    Some([sol[0], sol[1]])
}

fn fit_family(
    family: Family,
    xs: &[f64],
    ys: &[f64],
    cfg: &FitConfig,
) -> Result<FitReport<DecayModel>> {
    let distinct = {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if xs.len() < family.param_count() || distinct < family.min_distinct() {
        return Err(Error::InsufficientSamples {
            needed: family.min_distinct(),
            got: distinct,
        });
    }
    family.check_domain(xs)?;

    let problem = CurveProblem { family, xs, ys };
    let outcomes: Vec<LmOutcome> = family
        .starts()
        .into_par_iter()
        .filter_map(|theta| {
            let lin = linear_coefficients(family, xs, ys, &theta)?;
            let mut start = lin.to_vec();
            start.extend_from_slice(&theta);
            Some(lm::minimize(&problem, &start, &cfg.lm))
        })
        .collect();

    // Lowest SSE wins; ties go to the earliest start, so scheduling never matters.
    let best = outcomes
        .into_iter()
        .filter(|o| o.sse.is_finite())
        .enumerate()
        .min_by(|(i, a), (j, b)| a.sse.total_cmp(&b.sse).then(i.cmp(j)))
        .map(|(_, o)| o)
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "no start of {} produced a finite fit",
                family.name()
            ))
        })?;

    let model = DecayModel::from_internal(family, &best.params);
    let residuals: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| y - model.predict(x))
        .collect();
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(FitReport {
        model,
        r_squared: r_squared(ys, &residuals),
        rmse,
        iterations: best.iterations,
        residuals,
        points: xs.iter().copied().zip(ys.iter().copied()).collect(),
        converged: best.converged,
    })
}

fn fit_points(samples: &[CalibrationSample], cfg: &FitConfig) -> (Vec<f64>, Vec<f64>) {
    samples
        .iter()
        .filter(|s| cfg.min_world_cm.is_none_or(|min| s.z_world_cm >= min))
        .map(|s| (s.z_img, s.z_world_cm))
        .unzip()
}

/// Multi-start Levenberg-Marquardt fit of the double-exponential distance model.
///
/// A report whose `converged` flag is false carries the best parameters seen
/// before the iteration cap.
pub fn fit_double_exp(
    samples: &[CalibrationSample],
    cfg: &FitConfig,
) -> Result<FitReport<DoubleExpModel>> {
    let (xs, ys) = fit_points(samples, cfg);
    let report = fit_family(Family::DoubleExponential, &xs, &ys, cfg)?;
    Ok(report.map_model(|m| match m {
        DecayModel::DoubleExponential(d) => d,
        _ => unreachable!("double-exponential family yields double-exponential models"),
    }))
}

/// Fits the single-exponential, inverse-proportional and power-law families.
/// Each family succeeds or fails on its own.
pub fn fit_alternative_models(
    samples: &[CalibrationSample],
    cfg: &FitConfig,
) -> Vec<(Family, Result<FitReport<DecayModel>>)> {
    let (xs, ys) = fit_points(samples, cfg);
    Family::ALTERNATIVES
        .iter()
        .map(|&f| (f, fit_family(f, &xs, &ys, cfg)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedFrame {
    pub index: usize,
    pub truth_cm: f64,
    pub z_img: f64,
    pub predicted_cm: f64,
}

impl TrackedFrame {
    pub fn error_cm(&self) -> f64 {
        self.predicted_cm - self.truth_cm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub target_cm: f64,
    pub frame: usize,
    pub abs_error_cm: f64,
}

#[derive(Debug, Clone)]
pub struct TrackingReport {
    pub frames: Vec<TrackedFrame>,
    pub checkpoints: Vec<Checkpoint>,
    /// Mean absolute error over `checkpoints`.
    pub mae_cm: f64,
}

impl TrackingReport {
    /// Fraction of checkpoints with absolute error below `tolerance_cm`.
    pub fn accuracy(&self, tolerance_cm: f64) -> f64 {
        let hits = self
            .checkpoints
            .iter()
            .filter(|c| c.abs_error_cm < tolerance_cm)
            .count();
        hits as f64 / self.checkpoints.len() as f64
    }
}

/// Incremental distance tracker; frames are pushed in sequence order.
#[derive(Debug, Clone)]
pub struct Tracker {
    model: DoubleExpModel,
    frames: Vec<TrackedFrame>,
}

impl Tracker {
    pub fn new(model: DoubleExpModel) -> Self {
        Self {
            model,
            frames: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        depth: &DepthMap,
        mask: &SegMask,
        truth_cm: f64,
    ) -> Result<&TrackedFrame> {
        let index = self.frames.len();
        let z_img = mask_mean_depth(depth, mask).map_err(|e| e.at_frame(index))?;
        self.frames.push(TrackedFrame {
            index,
            truth_cm,
            z_img,
            predicted_cm: self.model.predict(z_img),
        });
        Ok(&self.frames[index])
    }

    /// Scores the frame nearest each checkpoint inside the covered distance range.
    pub fn finish(self) -> Result<TrackingReport> {
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("tracking sequence is empty".into()));
        }
        let (lo, hi) = self
            .frames
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
                (lo.min(f.truth_cm), hi.max(f.truth_cm))
            });
        let checkpoints: Vec<Checkpoint> = CHECKPOINTS_CM
            .iter()
            .filter(|&&d| d >= lo - 1e-9 && d <= hi + 1e-9)
            .map(|&d| {
                let nearest = self
                    .frames
                    .iter()
                    .min_by(|a, b| {
                        (a.truth_cm - d)
                            .abs()
                            .total_cmp(&(b.truth_cm - d).abs())
                            .then(a.index.cmp(&b.index))
                    })
                    .expect("non-empty");
                Checkpoint {
                    target_cm: d,
                    frame: nearest.index,
                    abs_error_cm: nearest.error_cm().abs(),
                }
            })
            .collect();
        if checkpoints.is_empty() {
            return Err(Error::InvalidInput(format!(
                "sequence covers [{lo:.2}, {hi:.2}] cm, which contains no checkpoint"
            )));
        }
        let mae_cm =
            checkpoints.iter().map(|c| c.abs_error_cm).sum::<f64>() / checkpoints.len() as f64;
        Ok(TrackingReport {
            frames: self.frames,
            checkpoints,
            mae_cm,
        })
    }
}

pub fn evaluate_tracking(
    model: &DoubleExpModel,
    sequence: &[(DepthMap, SegMask, f64)],
) -> Result<TrackingReport> {
    let mut tracker = Tracker::new(*model);
    for (depth, mask, truth) in sequence {
        tracker.push(depth, mask, *truth)?;
    }
    tracker.finish()
}

pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<CalibrationSample>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || (lineno == 1 && trimmed.starts_with("run_id")) {
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cells.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected 4 columns, found {}", cells.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: lineno,
                    reason: format!("{what} '{s}' is not a finite number"),
                })
        };
        let sample = CalibrationSample {
            run_id: cells[0].to_string(),
            speed_cmps: num(cells[1], "speed_cmps")?,
            z_world_cm: num(cells[2], "z_world_cm")?,
            z_img: num(cells[3], "z_img")?,
        };
        if sample.z_img < 0.0 {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("z_img {} is negative", sample.z_img),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_samples_csv(path: impl AsRef<Path>, samples: &[CalibrationSample]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "run_id,speed_cmps,z_world_cm,z_img")?;
    for s in samples {
        writeln!(
            out,
            "{},{},{},{}",
            s.run_id, s.speed_cmps, s.z_world_cm, s.z_img
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Model file: a single line `a,b,c,d`.
pub fn write_model_file(path: impl AsRef<Path>, model: &DoubleExpModel) -> Result<()> {
    fs::write(path, format!("{model}\n"))?;
    Ok(())
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<DoubleExpModel> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let vals: Vec<f64> = line
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 1,
            reason: e.to_string(),
        })?;
    let [a, b, c, d] = vals[..] else {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected 4 coefficients, found {}", vals.len()),
        });
    };
    DoubleExpModel::new(a, b, c, d)
}
