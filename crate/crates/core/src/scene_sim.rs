//! Synthetic stand-in for the camera plus depth and segmentation networks.
//!
//! A square target approaches the palm at constant speed. Each frame's depth
//! inside the target mask encodes the true distance through the inverse of a
//! reference distance model, so a forward fit on the synthetic data recovers
//! that model. Noise is added per pixel in relative-depth units.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io;
use crate::kv::KeyValues;
use crate::proximity::{CalibrationSample, DoubleExpModel, Tracker, TrackingReport};
use crate::raster::{DepthMap, SegMask};

/// Upper end of the relative-depth range searched when inverting a model.
pub const Z_IMG_MAX: f64 = 60.0;

/// Per-pixel relative-depth noise whose mean tracking error at 17.5 cm/s
/// (over seeds) sits at the bench figure of about 0.18 cm.
pub const CALIBRATED_NOISE_SIGMA: f64 = 0.11;

/// Relative depth that `model` maps to `z_world_cm`, by bisection on `[0, Z_IMG_MAX]`.
pub fn invert_model(model: &DoubleExpModel, z_world_cm: f64) -> Result<f64> {
    let (hi_cm, lo_cm) = (model.predict(0.0), model.predict(Z_IMG_MAX));
    if !(z_world_cm <= hi_cm && z_world_cm >= lo_cm) {
        return Err(Error::OutOfRange {
            value: z_world_cm,
            min: lo_cm,
            max: hi_cm,
        });
    }
    let (mut lo, mut hi) = (0.0f64, Z_IMG_MAX);
    // predict(lo) >= target >= predict(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if model.predict(mid) >= z_world_cm {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (elo, ehi) = (
        (model.predict(lo) - z_world_cm).abs(),
        (model.predict(hi) - z_world_cm).abs(),
    );
    Ok(if elo <= ehi { lo } else { hi })
}

#[derive(Debug, Clone)]
pub struct ApproachScenario {
    pub speed_cmps: f64,
    pub start_distance_cm: f64,
    pub frame_rate: f64,
    pub target_size_cm: f64,
    /// Per-pixel Gaussian noise on relative depth inside the mask.
    pub noise_sigma: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Apparent side in pixels = `focal_px * target_size_cm / distance_cm`.
    pub focal_px: f64,
    pub background_depth: f64,
    pub reference: DoubleExpModel,
}

impl Default for ApproachScenario {
    fn default() -> Self {
        Self {
            speed_cmps: 10.0,
            start_distance_cm: 50.0,
            frame_rate: 30.0,
            target_size_cm: 4.0,
            noise_sigma: 0.0,
            seed: 42,
            width: 160,
            height: 120,
            focal_px: 150.0,
            background_depth: 1.0,
            reference: DoubleExpModel::REFERENCE,
        }
    }
}

impl ApproachScenario {
    pub fn new(speed_cmps: f64, noise_sigma: f64, seed: u64) -> Result<Self> {
        let s = Self {
            speed_cmps,
            noise_sigma,
            seed,
            ..Self::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("speed", self.speed_cmps),
            ("start distance", self.start_distance_cm),
            ("frame rate", self.frame_rate),
            ("target size", self.target_size_cm),
            ("focal scale", self.focal_px),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.background_depth >= 0.0) {
            return Err(Error::InvalidInput(
                "noise and background depth must be non-negative".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("frame size must be non-zero".into()));
        }
        Ok(())
    }

    /// Overrides from `key=value` text. The reference model is not configurable here.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        let mut c = self.clone();
        kv.read_into("speed", &mut c.speed_cmps)?;
        kv.read_into("start_distance", &mut c.start_distance_cm)?;
        kv.read_into("frame_rate", &mut c.frame_rate)?;
        kv.read_into("target_size", &mut c.target_size_cm)?;
        kv.read_into("noise_sigma", &mut c.noise_sigma)?;
        kv.read_into("seed", &mut c.seed)?;
        kv.read_into("width", &mut c.width)?;
        kv.read_into("height", &mut c.height)?;
        kv.read_into("focal_px", &mut c.focal_px)?;
        kv.read_into("background_depth", &mut c.background_depth)?;
        c.validate()?;
        *self = c;
        Ok(())
    }

    /// Frames from the start distance until the target reaches the palm.
    pub fn frame_count(&self) -> usize {
        (self.start_distance_cm / self.speed_cmps * self.frame_rate).ceil() as usize + 1
    }

    pub fn truth_at(&self, frame: usize) -> f64 {
        (self.start_distance_cm - self.speed_cmps * frame as f64 / self.frame_rate).max(0.0)
    }

    pub fn mask_side(&self, truth_cm: f64) -> usize {
        let max_side = self.width.min(self.height);
        if truth_cm <= 0.0 {
            return max_side;
        }
        let side = (self.focal_px * self.target_size_cm / truth_cm).round();
        (side as usize).clamp(1, max_side)
    }

    /// Lazily generated frames; the same seed gives bit-identical output.
    pub fn frames(&self) -> Result<SceneFrames<'_>> {
        self.validate()?;
        Ok(SceneFrames {
            scenario: self,
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            noise: Normal::new(0.0, self.noise_sigma.max(0.0)).expect("sigma is non-negative"),
        })
    }

    fn encoded_depth(&self, truth_cm: f64) -> f64 {
        let m = &self.reference;
        if truth_cm >= m.predict(0.0) {
            0.0
        } else if truth_cm <= m.predict(Z_IMG_MAX) {
            Z_IMG_MAX
        } else {
            invert_model(m, truth_cm).expect("range checked")
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub index: usize,
    pub timestamp_s: f64,
    pub truth_cm: f64,
    pub depth: DepthMap,
    pub mask: SegMask,
}

pub struct SceneFrames<'a> {
    scenario: &'a ApproachScenario,
    next: usize,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl Iterator for SceneFrames<'_> {
    type Item = SceneFrame;

    fn next(&mut self) -> Option<SceneFrame> {
        let s = self.scenario;
        if self.next >= s.frame_count() {
            return None;
        }
        let index = self.next;
        self.next += 1;

        let truth_cm = s.truth_at(index);
        let side = s.mask_side(truth_cm);
        let (u0, v0) = ((s.width - side) / 2, (s.height - side) / 2);
        let mask = SegMask::from_fn(s.width, s.height, |u, v| {
            (u0..u0 + side).contains(&u) && (v0..v0 + side).contains(&v)
        });
        let z = s.encoded_depth(truth_cm);
        let mut values = vec![s.background_depth; s.width * s.height];
        for (val, &m) in values.iter_mut().zip(mask.data()) {
            if m {
                let n = if s.noise_sigma > 0.0 {
                    self.noise.sample(&mut self.rng)
                } else {
                    0.0
                };
                *val = (z + n).max(0.0);
            }
        }
        let depth = DepthMap::new(s.width, s.height, values).expect("finite non-negative depth");
        Some(SceneFrame {
            index,
            timestamp_s: index as f64 / s.frame_rate,
            truth_cm,
            depth,
            mask,
        })
    }
}

pub fn generate_sequence(scenario: &ApproachScenario) -> Result<Vec<SceneFrame>> {
    Ok(scenario.frames()?.collect())
}

/// Streams a scenario through mask-mean depth and the distance model.
/// Frames nearer than the model's trustworthy range are still scored only
/// at the standard checkpoints.
pub fn evaluate_scenario(
    model: &DoubleExpModel,
    scenario: &ApproachScenario,
) -> Result<TrackingReport> {
    let mut tracker = Tracker::new(*model);
    for f in scenario.frames()? {
        tracker.push(&f.depth, &f.mask, f.truth_cm)?;
    }
    tracker.finish()
}

/// Calibration pairs in the style of the bench experiment: `runs` repetitions
/// over `distances_cm`, with Gaussian noise of `noise_sigma_cm` on the distance.
pub fn synthesize_calibration(
    model: &DoubleExpModel,
    runs: usize,
    distances_cm: &[f64],
    noise_sigma_cm: f64,
    seed: u64,
) -> Result<Vec<CalibrationSample>> {
    const SPEEDS: [f64; 6] = [2.0, 4.0, 10.0, 12.5, 17.5, 22.5];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma_cm)
        .map_err(|e| Error::InvalidInput(format!("noise sigma: {e}")))?;
    let mut out = Vec::with_capacity(runs * distances_cm.len());
    for run in 0..runs {
        for &d in distances_cm {
            out.push(CalibrationSample {
                run_id: format!("run{run:02}"),
                speed_cmps: SPEEDS[run % SPEEDS.len()],
                z_world_cm: d + noise.sample(&mut rng),
                z_img: invert_model(model, d)?,
            });
        }
    }
    Ok(out)
}

/// Writes `frame_NNNN_depth.vtp`, `frame_NNNN_mask.vtp` and `manifest.csv`.
pub fn write_sequence(dir: impl AsRef<Path>, frames: &[SceneFrame]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.csv"))?);
    writeln!(manifest, "frame,timestamp_s,truth_cm")?;
    for f in frames {
        io::save_depth_map(
            &f.depth,
            dir.join(format!("frame_{:04}_depth.vtp", f.index)),
        )?;
        io::save_mask(&f.mask, dir.join(format!("frame_{:04}_mask.vtp", f.index)))?;
        writeln!(manifest, "{},{},{}", f.index, f.timestamp_s, f.truth_cm)?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Vec<SceneFrame>> {
    let dir = dir.as_ref();
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::MissingFile(manifest));
    }
    let reader = BufReader::new(fs::File::open(&manifest)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            line: i + 1,
            reason,
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", cells.len())));
        }
        let index: usize = cells[0]
            .trim()
            .parse()
            .map_err(|e| bad(format!("frame: {e}")))?;
        let timestamp_s: f64 = cells[1]
            .trim()
            .parse()
            .map_err(|e| bad(format!("timestamp: {e}")))?;
        let truth_cm: f64 = cells[2]
            .trim()
            .parse()
            .map_err(|e| bad(format!("truth: {e}")))?;
        out.push(SceneFrame {
            index,
            timestamp_s,
            truth_cm,
            depth: io::load_depth_map(dir.join(format!("frame_{index:04}_depth.vtp")))?,
            mask: io::load_mask(dir.join(format!("frame_{index:04}_mask.vtp")))?,
        });
    }
    Ok(out)
}
