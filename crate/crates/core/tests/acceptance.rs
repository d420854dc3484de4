//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtpalm::gradient_mapper::{self, MlpConfig, MlpWeights};
use vtpalm::palm_control::{
    self, CommandKind, DeviceCommand, Mode, PalmState, PressScript, SensorEvent, SwitchConfig,
};
use vtpalm::proximity::{self, CalibrationSample, DoubleExpModel, FitConfig};
use vtpalm::raster::{GradientField, HeightMap, RasterImage, ScalarField, SegMask};
use vtpalm::scene_sim::{self, ApproachScenario, CALIBRATED_NOISE_SIGMA};
use vtpalm::surface_recon::{self, Scheme};
use vtpalm::tactile_calib::{self, CircleDetector, SpherePress, DEFAULT_CLAMP_FRACTION};
use vtpalm::tactile_render::{self, Grid, LightingRig, PressSet};
use vtpalm::texture::{self, TextureConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: usize, name: &str, elapsed: Duration, limit: Option<Duration>, o: &Outcome) -> bool {
    let in_time = limit.is_none_or(|l| elapsed < l);
    let pass = o.pass && in_time;
    let limit = limit
        .map(|l| format!(" (limit {:.0} s)", l.as_secs_f64()))
        .unwrap_or_default();
    println!(
        "{} criterion {id} {name}: {}; runtime {:.2} s{limit}",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

// 1 -----------------------------------------------------------------------

fn proximity_fit() -> (Outcome, DoubleExpModel) {
    let truth = DoubleExpModel::new(85.9058, 0.3754, 1.5110e6, 4.0941).unwrap();
    let truth_at = |x: f64| truth.a() * (-truth.b() * x).exp() + truth.c() * (-truth.d() * x).exp();
    let clean: Vec<CalibrationSample> = (0..=40)
        .map(|i| {
            let x = 6.0 + 0.25 * i as f64;
            CalibrationSample {
                run_id: "clean".into(),
                speed_cmps: 0.0,
                z_world_cm: truth_at(x),
                z_img: x,
            }
        })
        .collect();
    let fit = proximity::fit_double_exp(&clean, &FitConfig::unrestricted()).unwrap();
    let dense: Vec<f64> = (0..=1000).map(|i| 6.0 + 0.01 * i as f64).collect();
    let rmse = (dense
        .iter()
        .map(|&x| (fit.model.predict(x) - truth_at(x)).powi(2))
        .sum::<f64>()
        / dense.len() as f64)
        .sqrt();

    let distances: Vec<f64> = (0..=16).map(|i| 10.0 + 2.5 * i as f64).collect();
    let mut noisy_ok = true;
    let mut worst = (f64::INFINITY, 0.0f64);
    for seed in 0..5 {
        let samples = scene_sim::synthesize_calibration(&truth, 10, &distances, 2.0, seed).unwrap();
        let r = proximity::fit_double_exp(&samples, &FitConfig::default()).unwrap();
        noisy_ok &= r.r_squared >= 0.95 && r.rmse <= 2.5;
        worst = (worst.0.min(r.r_squared), worst.1.max(r.rmse));
    }
    let pass = rmse < 1e-6 && noisy_ok;
    (
        outcome(
            pass,
            format!(
                "noiseless prediction RMSE {rmse:.2e} cm (< 1e-6); noisy sigma 2 over 5 seeds: min R^2 {:.4} (>= 0.95), max RMSE {:.3} cm (<= 2.5)",
                worst.0, worst.1
            ),
        ),
        fit.model,
    )
}

// 2 -----------------------------------------------------------------------

fn mean_mae(model: &DoubleExpModel, speed: f64, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let sc = ApproachScenario::new(speed, CALIBRATED_NOISE_SIGMA, 1000 + seed).unwrap();
            scene_sim::evaluate_scenario(model, &sc).unwrap().mae_cm
        })
        .sum::<f64>()
        / seeds as f64
}

fn tracking(model: &DoubleExpModel) -> Outcome {
    let at_17 = mean_mae(model, 17.5, 20);
    let sweep: Vec<(f64, f64)> = [2.0, 4.0, 10.0, 12.5, 17.5, 22.5]
        .iter()
        .map(|&s| (s, mean_mae(model, s, 5)))
        .collect();
    let pass = at_17 <= 0.25 && sweep.iter().all(|&(_, m)| m < 1.0);
    let sweep_txt: Vec<String> = sweep.iter().map(|(s, m)| format!("{s}:{m:.3}")).collect();
    outcome(
        pass,
        format!(
            "mean MAE at 17.5 cm/s over 20 seeds {at_17:.3} cm (<= 0.25); sweep mean MAE [{}] (all < 1.0)",
            sweep_txt.join(" ")
        ),
    )
}

// 3 -----------------------------------------------------------------------

const PITCH: f64 = 0.05;
const SPHERE_R: f64 = 2.5;

fn disc(w: usize, h: usize, c: (f64, f64), r: f64) -> SegMask {
    SegMask::from_fn(w, h, |u, v| {
        (u as f64 - c.0).powi(2) + (v as f64 - c.1).powi(2) <= r * r
    })
}

fn sphere_round_trip() -> (Outcome, Option<MlpWeights>) {
    let rig = LightingRig::default().with_noise(0.01);
    let set = PressSet::default();
    let rendered = set.render(&rig, 42).unwrap();
    let detector = CircleDetector::default();
    let presses: Vec<SpherePress> = rendered
        .into_iter()
        .filter_map(|p| SpherePress::detect(p.image, p.reference, SPHERE_R, PITCH, &detector).ok())
        .collect();
    let used = presses.len();
    let dataset = tactile_calib::build_dataset(&presses, DEFAULT_CLAMP_FRACTION).unwrap();
    let cfg = MlpConfig::default();
    assert!(cfg.max_epochs <= 120 && cfg.early_stop_patience == 10);
    let (weights, log, refit) = gradient_mapper::train_and_refit(&dataset, &cfg).unwrap();

    // Held-out press with its own position, depth and noise.
    let depth = 0.6;
    let center = (121.3, 97.6);
    let grid = set.grid;
    let (truth, r_star) =
        tactile_render::make_height_sphere_press(SPHERE_R, depth, center, grid).unwrap();
    let image = tactile_render::render(&truth, &rig, 9001).unwrap();
    let flat = HeightMap::flat(grid.width, grid.height, PITCH).unwrap();
    let reference = tactile_render::render(&flat, &rig, 9002).unwrap();

    let circle =
        tactile_calib::detect_contact_circle(&image, &reference, detector.threshold).unwrap();
    let domain = disc(grid.width, grid.height, circle.center, circle.radius_px);
    let g = gradient_mapper::infer_gradients(&weights, &image, Some(&domain)).unwrap();
    let recon = surface_recon::reconstruct(&g, PITCH).unwrap();

    let inner = disc(grid.width, grid.height, center, 0.8 * r_star / PITCH);
    let err: Vec<f64> = (0..grid.width * grid.height)
        .filter(|&i| inner.data()[i])
        .map(|i| recon.z()[i] - truth.z()[i])
        .collect();
    let offset = err.iter().sum::<f64>() / err.len() as f64;
    let rel =
        (err.iter().map(|e| (e - offset).powi(2)).sum::<f64>() / err.len() as f64).sqrt() / depth;

    let held_out = SpherePress::new(image, reference, center, r_star, SPHERE_R, PITCH).unwrap();
    let samples = tactile_calib::press_samples(&held_out, DEFAULT_CLAMP_FRACTION);
    let (_, grad_mse) = gradient_mapper::evaluate(&weights, &samples);

    let pass = used == set.count && rel < 0.05 && grad_mse <= 0.04;
    (
        outcome(
            pass,
            format!(
                "{used}/{} presses, {} samples, {} epochs (best {}), val MSE {:.4} -> {:.4} after output refit; held-out inner-80% relative L2 {:.2}% of depth (< 5%), gradient MSE {grad_mse:.4} (<= 0.04)",
                set.count,
                dataset.len(),
                log.epochs.len(),
                log.best_epoch,
                refit.val_mse_before,
                refit.val_mse_after,
                100.0 * rel
            ),
        ),
        Some(weights),
    )
}

// 4 -----------------------------------------------------------------------

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

fn poisson_exactness() -> Outcome {
    let (w, h, p) = (64usize, 48usize, 0.05);
    let modes = [(1usize, 0usize), (0, 1), (3, 2), (7, 5), (15, 11), (31, 3)];
    let mut eig_worst = 0.0f64;
    for scheme in [Scheme::Continuous, Scheme::Discrete] {
        for &(m, n) in &modes {
            let kx = 2.0 * PI * m as f64 / (w as f64 * p);
            let ky = 2.0 * PI * n as f64 / (h as f64 * p);
            let f = |u: usize, v: usize| {
                (kx * u as f64 * p + 0.3).sin() * (ky * v as f64 * p + 1.1).cos()
            };
            // Exact Laplacian eigenvalue of the scheme's operator.
            let lambda = match scheme {
                Scheme::Continuous => -(kx * kx + ky * ky),
                Scheme::Discrete => {
                    -((2.0 - 2.0 * (2.0 * PI * m as f64 / w as f64).cos())
                        + (2.0 - 2.0 * (2.0 * PI * n as f64 / h as f64).cos()))
                        / (p * p)
                }
            };
            let truth = ScalarField::from_fn(w, h, f);
            let mean = truth.mean();
            let truth: Vec<f64> = truth.data().iter().map(|x| x - mean).collect();
            let rho = ScalarField::from_fn(w, h, |u, v| lambda * (f(u, v) - mean));
            let got = surface_recon::poisson_solve(&rho, p, scheme).unwrap();
            eig_worst = eig_worst.max(rel_l2(got.z(), &truth));

            if scheme == Scheme::Continuous {
                let g = GradientField::from_fn(w, h, |u, v| {
                    let (x, y) = (u as f64 * p, v as f64 * p);
                    (
                        kx * (kx * x + 0.3).cos() * (ky * y + 1.1).cos(),
                        -ky * (kx * x + 0.3).sin() * (ky * y + 1.1).sin(),
                    )
                });
                let got = surface_recon::reconstruct(&g, p).unwrap();
                eig_worst = eig_worst.max(rel_l2(got.z(), &truth));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut random_field = || {
        let gu: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gv: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        GradientField::new(w, h, gu, gv).unwrap()
    };
    let (g1, g2) = (random_field(), random_field());
    let (alpha, beta) = (1.7, -0.45);
    let mut lin_worst = 0.0f64;
    let mut shift_worst = 0.0f64;
    for scheme in [Scheme::Continuous, Scheme::Discrete] {
        let r1 = surface_recon::reconstruct_with(&g1, p, scheme).unwrap();
        let r2 = surface_recon::reconstruct_with(&g2, p, scheme).unwrap();
        let both =
            surface_recon::reconstruct_with(&g1.combine(alpha, &g2, beta).unwrap(), p, scheme)
                .unwrap();
        let expect: Vec<f64> = r1
            .z()
            .iter()
            .zip(r2.z())
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        lin_worst = lin_worst.max(rel_l2(both.z(), &expect));

        for &(du, dv) in &[(1usize, 0usize), (5, 7), (63, 47)] {
            let shifted = surface_recon::reconstruct_with(&g1.roll(du, dv), p, scheme).unwrap();
            let mut expect = vec![0.0; w * h];
            for v in 0..h {
                for u in 0..w {
                    expect[((v + dv) % h) * w + (u + du) % w] = r1.get(u, v);
                }
            }
            shift_worst = shift_worst.max(rel_l2(shifted.z(), &expect));
        }
    }
    let pass = eig_worst < 1e-10 && lin_worst < 1e-9 && shift_worst < 1e-9;
    outcome(
        pass,
        format!(
            "both schemes: eigenfunction relative L2 {eig_worst:.1e} (< 1e-10), linearity {lin_worst:.1e} (< 1e-9), shift {shift_worst:.1e} (< 1e-9)"
        ),
    )
}

// 5 -----------------------------------------------------------------------

fn backprop(trained: Option<&MlpWeights>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<tactile_calib::GradientSample> = (0..100)
        .map(|_| tactile_calib::GradientSample {
            i_r: rng.random(),
            i_g: rng.random(),
            i_b: rng.random(),
            u: rng.random(),
            v: rng.random(),
            g_u: rng.random_range(-1.5..1.5),
            g_v: rng.random_range(-1.5..1.5),
        })
        .collect();
    let fresh = MlpWeights::init(&MlpConfig::default(), 5);
    let mut nets = vec![("initial", &fresh)];
    if let Some(t) = trained {
        nets.push(("trained", t));
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, net) in nets {
        let c = gradient_mapper::gradient_check(net, &batch, 1e-4);
        pass &= c.relative_error < 1e-3 && c.checked > 0;
        parts.push(format!(
            "{name} net relative error {:.2e} over {} parameters ({} kink-crossing skipped)",
            c.relative_error, c.checked, c.skipped
        ));
    }
    outcome(pass, format!("{} (< 1e-3)", parts.join("; ")))
}

// 6 -----------------------------------------------------------------------

fn roughness() -> Outcome {
    let grid = Grid::new(192, 192, PITCH);
    let rig = LightingRig::default();
    let flat = HeightMap::flat(grid.width, grid.height, PITCH).unwrap();
    let reference = tactile_render::render(&flat, &rig, 0).unwrap();
    let mut all = true;
    let mut lines = Vec::new();
    for seed in [8u64, 21, 34] {
        let ratios: Vec<f64> = [150.0, 280.0, 500.0]
            .iter()
            .map(|mesh| {
                let h = tactile_render::make_height_rough(25.4 / mesh, 0.01, grid, seed).unwrap();
                let img = tactile_render::render(&h, &rig, 0).unwrap();
                texture::amplitude_spectrum(&img.difference(&reference).unwrap())
                    .unwrap()
                    .high_freq_ratio
            })
            .collect();
        all &= ratios[0] < ratios[1] && ratios[1] < ratios[2];
        lines.push(format!(
            "seed {seed}: {:.4} < {:.4} < {:.4}",
            ratios[0], ratios[1], ratios[2]
        ));
    }
    outcome(
        all,
        format!("high_freq_ratio 150/280/500 mesh, {}", lines.join("; ")),
    )
}

// 7 -----------------------------------------------------------------------

fn texture_discrimination() -> Outcome {
    let grid = Grid::new(128, 128, PITCH);
    let cfg = TextureConfig::default();
    let fine = tactile_render::make_height_rough(0.15, 0.02, grid, 1)
        .unwrap()
        .to_field();
    let coarse = tactile_render::make_height_rough(0.5, 0.02, grid, 1)
        .unwrap()
        .to_field();
    let d = texture::discriminate(&fine, &coarse, &cfg).unwrap();
    let wl1 = d.margin("wavelet_l1").unwrap();
    let contrast = d.margin("glcm_contrast").unwrap();
    let same = texture::discriminate(&fine, &fine, &cfg).unwrap();
    let zero = same.margins.iter().all(|&m| m == 0.0);
    let pass = (wl1 > 2.0 || contrast > 2.0) && zero;
    outcome(
        pass,
        format!(
            "fine vs coarse margin: wavelet level-1 {wl1:.2}, GLCM contrast {contrast:.2} (one > 2); identical inputs max margin {:.1} (= 0)",
            same.max_margin()
        ),
    )
}

// 8 -----------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Sym {
    Dist(f64),
    Tick(f64),
    Frame(bool),
    Reset,
    Belt(f64),
}

const ALPHABET: [Sym; 10] = [
    Sym::Dist(12.0),
    Sym::Dist(10.0),
    Sym::Dist(9.8),
    Sym::Tick(0.02),
    Sym::Tick(1.2),
    Sym::Frame(false),
    Sym::Frame(true),
    Sym::Reset,
    Sym::Belt(0.1),
    Sym::Belt(-0.1),
];

/// Reference machine written from the transition table, used as the oracle.
#[derive(Clone, Debug)]
struct Oracle {
    mode: Mode,
    clock: f64,
    start: Option<f64>,
    belt: f64,
    /// Whether the reference frame was the pressed image.
    reference: Option<bool>,
    streak: usize,
    contact_frames: usize,
}

fn grid_up(t: f64) -> f64 {
    let k = (t * 50.0).round();
    if (t * 50.0 - k).abs() < 1e-9 {
        k / 50.0
    } else {
        (t * 50.0).ceil() / 50.0
    }
}

impl Oracle {
    fn new(contact_frames: usize) -> Self {
        Self {
            mode: Mode::Proximity,
            clock: 0.0,
            start: None,
            belt: 0.0,
            reference: None,
            streak: 0,
            contact_frames,
        }
    }

    /// Next state and expected (kind, pulse) list, or None if the event is rejected.
    fn apply(&self, sym: Sym) -> Option<(Oracle, Vec<(CommandKind, u32)>)> {
        let mut s = self.clone();
        let mut cmds = Vec::new();
        match sym {
            Sym::Dist(d) => match self.mode {
                Mode::Proximity => {
                    if d <= 10.0 {
                        cmds.push((CommandKind::ServoPulse, 100));
                        cmds.push((CommandKind::LedSet, 0));
                        s.mode = Mode::Switching;
                        s.start = Some(grid_up(self.clock));
                    }
                }
                Mode::Switching => {}
                _ => return None,
            },
            Sym::Tick(dt) => {
                s.clock = self.clock + dt;
                if self.mode == Mode::Switching {
                    let elapsed = s.clock - self.start.unwrap();
                    if elapsed >= 1.2 - 1e-9 {
                        s.mode = Mode::Tactile;
                        s.belt = 1.0;
                        s.start = None;
                    } else {
                        s.belt = (elapsed / 1.2).max(0.0);
                    }
                }
            }
            Sym::Frame(pressed) => match self.mode {
                Mode::Tactile | Mode::Grasping => {
                    if let Some(reference) = self.reference {
                        if self.mode == Mode::Tactile {
                            s.streak = if pressed != reference {
                                self.streak + 1
                            } else {
                                0
                            };
                            if s.streak >= self.contact_frames {
                                cmds.push((CommandKind::GraspSignal, 0));
                                s.mode = Mode::Grasping;
                            }
                        }
                    } else {
                        s.reference = Some(pressed);
                    }
                }
                _ => return None,
            },
            Sym::Reset => {
                if self.belt > 1e-9 {
                    cmds.push((CommandKind::ServoPulse, 2500));
                }
                if self.mode != Mode::Proximity {
                    cmds.push((CommandKind::LedSet, 0));
                }
                s = Oracle::new(self.contact_frames);
                s.clock = self.clock;
            }
            Sym::Belt(delta) => {
                if self.mode != Mode::Grasping {
                    return None;
                }
                let next = self.belt + delta;
                if !(-1e-9..=1.0 + 1e-9).contains(&next) {
                    return None;
                }
                s.belt = next;
                cmds.push((
                    CommandKind::BeltAdjust,
                    if delta > 0.0 { 100 } else { 2500 },
                ));
            }
        }
        Some((s, cmds))
    }
}

struct Checker {
    cfg: SwitchConfig,
    rest: Arc<RasterImage>,
    press: Arc<RasterImage>,
    sequences: usize,
    transitions: usize,
    edges: std::collections::BTreeSet<(Mode, Mode)>,
    violations: Vec<String>,
    threshold_hits: (usize, usize),
}

impl Checker {
    fn apply(
        &self,
        s: &PalmState,
        sym: Sym,
    ) -> vtpalm::error::Result<(PalmState, Vec<DeviceCommand>)> {
        match sym {
            Sym::Dist(d) => palm_control::step(s, &SensorEvent::DistanceMeasured(d), &self.cfg),
            Sym::Tick(dt) => palm_control::step(s, &SensorEvent::Tick(s.clock_s() + dt), &self.cfg),
            Sym::Frame(p) => palm_control::step(
                s,
                &SensorEvent::TactileFrame(if p {
                    self.press.clone()
                } else {
                    self.rest.clone()
                }),
                &self.cfg,
            ),
            Sym::Reset => Ok(palm_control::reset(s, &self.cfg)),
            Sym::Belt(d) => palm_control::belt_adjust(s, d, &self.cfg),
        }
    }

    fn fail(&mut self, path: &[Sym], what: String) {
        if self.violations.len() < 10 {
            self.violations.push(format!("{path:?}: {what}"));
        } else {
            self.violations.push(String::new());
        }
    }

    fn visit(&mut self, s: &PalmState, o: &Oracle, path: &mut Vec<Sym>, depth: usize) {
        self.sequences += 1;
        if depth == 0 {
            return;
        }
        for sym in ALPHABET {
            path.push(sym);
            let got = self.apply(s, sym);
            let want = o.apply(sym);
            match (got, want) {
                (Err(_), None) => {}
                (Ok(_), None) => self.fail(path, "accepted an event the table rejects".into()),
                (Err(e), Some(_)) => self.fail(path, format!("rejected a valid event: {e}")),
                (Ok((next, cmds)), Some((next_o, want_cmds))) => {
                    self.transitions += 1;
                    self.check(s, &next, &cmds, &next_o, &want_cmds, sym, path);
                    self.visit(&next, &next_o, path, depth - 1);
                }
            }
            path.pop();
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn check(
        &mut self,
        before: &PalmState,
        after: &PalmState,
        cmds: &[DeviceCommand],
        oracle: &Oracle,
        want: &[(CommandKind, u32)],
        sym: Sym,
        path: &[Sym],
    ) {
        self.edges.insert((before.mode, after.mode));
        if after.mode != oracle.mode {
            self.fail(
                path,
                format!("mode {:?}, expected {:?}", after.mode, oracle.mode),
            );
        }
        let kinds: Vec<(CommandKind, u32)> = cmds.iter().map(|c| (c.kind, c.pulse_us)).collect();
        if kinds != want {
            self.fail(path, format!("commands {kinds:?}, expected {want:?}"));
        }
        if (after.belt_position() - oracle.belt).abs() > 1e-6 {
            self.fail(
                path,
                format!("belt {}, expected {}", after.belt_position(), oracle.belt),
            );
        }
        // LED is on exactly while the elastic layer is deployed for sensing.
        let led_expected = matches!(after.mode, Mode::Tactile | Mode::Grasping);
        if after.led_on != led_expected {
            self.fail(path, format!("led {} in {:?}", after.led_on, after.mode));
        }
        let switched = before.mode == Mode::Proximity && after.mode == Mode::Switching;
        let deploys = cmds
            .iter()
            .filter(|c| c.kind == CommandKind::ServoPulse && c.pulse_us == 100)
            .count();
        if deploys != usize::from(switched) {
            self.fail(
                path,
                format!(
                    "{deploys} deploy pulses on a {:?} -> {:?} step",
                    before.mode, after.mode
                ),
            );
        }
        if let Sym::Dist(d) = sym {
            if before.mode == Mode::Proximity {
                if switched != (d <= 10.0) {
                    self.fail(path, format!("distance {d} switched = {switched}"));
                }
                if switched {
                    self.threshold_hits.0 += 1;
                } else {
                    self.threshold_hits.1 += 1;
                }
            }
        }
        for c in cmds {
            if matches!(c.kind, CommandKind::ServoPulse | CommandKind::BeltAdjust)
                && ![100, 2500].contains(&c.pulse_us)
            {
                self.fail(path, format!("pulse width {} us", c.pulse_us));
            }
            let k = c.timestamp_s * 50.0;
            if (k - k.round()).abs() > 1e-9
                || c.timestamp_s < before.clock_s() - 1e-12
                || c.timestamp_s > before.clock_s() + 0.02 + 1e-12
            {
                self.fail(
                    path,
                    format!(
                        "timestamp {} off the 50 Hz grid at clock {}",
                        c.timestamp_s,
                        before.clock_s()
                    ),
                );
            }
        }
    }
}

fn state_machine() -> Outcome {
    let base = SwitchConfig::default();
    let rest = Arc::new(RasterImage::filled(8, 8, 3, 0.5).unwrap());
    let press = Arc::new(RasterImage::filled(8, 8, 3, 0.5 + 2.0 * base.contact_threshold).unwrap());
    let mut checker = Checker {
        rest,
        press,
        cfg: base,
        sequences: 0,
        transitions: 0,
        edges: Default::default(),
        violations: Vec::new(),
        threshold_hits: (0, 0),
    };
    // With the default debounce Grasping is only reached on the sixth event,
    // so a one-frame debounce is also explored to cover the edges out of it.
    for frames in [base.contact_frames, 1] {
        checker.cfg = SwitchConfig {
            contact_frames: frames,
            ..base
        };
        checker.visit(&PalmState::new(), &Oracle::new(frames), &mut Vec::new(), 6);
    }

    use Mode::*;
    let expected: std::collections::BTreeSet<(Mode, Mode)> = [
        (Proximity, Proximity),
        (Proximity, Switching),
        (Switching, Switching),
        (Switching, Tactile),
        (Switching, Proximity),
        (Tactile, Tactile),
        (Tactile, Grasping),
        (Tactile, Proximity),
        (Grasping, Grasping),
        (Grasping, Proximity),
    ]
    .into_iter()
    .collect();
    let graph_ok = checker.edges == expected;
    let pass = checker.violations.is_empty()
        && graph_ok
        && checker.threshold_hits.0 > 0
        && checker.threshold_hits.1 > 0;
    let mut detail = format!(
        "{} sequences up to length 6 (debounce 3 and 1), {} accepted transitions, transition graph {} ({} edges), {} violations",
        checker.sequences,
        checker.transitions,
        if graph_ok { "exact" } else { "MISMATCH" },
        checker.edges.len(),
        checker.violations.len()
    );
    if let Some(first) = checker.violations.first() {
        detail.push_str(&format!("; first: {first}"));
    }
    if !graph_ok {
        detail.push_str(&format!("; observed {:?}", checker.edges));
    }
    outcome(pass, detail)
}

// 9 -----------------------------------------------------------------------

fn grasp_scenario(model: &DoubleExpModel, weights: Option<&MlpWeights>) -> Outcome {
    let Some(weights) = weights else {
        return outcome(false, "no trained weights available".into());
    };
    let cfg = SwitchConfig::default();
    let script = PressScript::default();
    let frame = 1.0 / cfg.sense_rate_fps;
    let run = |noise: f64, seed: u64| {
        let sc = ApproachScenario::new(8.0, noise, seed).unwrap();
        palm_control::run_grasp_scenario(&sc, &script, model, weights, &cfg).unwrap()
    };

    let clean = run(0.0, 42);
    let lag = clean
        .switch
        .as_ref()
        .map(|s| s.timestamp_s - clean.crossing_time_s)
        .unwrap_or(f64::INFINITY);
    let clean_ok = lag.abs() <= frame + 1e-9
        && clean.reached_grasping()
        && clean.ranging_accuracy() == 1.0
        && clean.reconstruction.is_some();

    let seeds = 20u64;
    let mut acc = 0.0;
    let mut grasped = 0;
    let mut worst_lag = 0.0f64;
    for seed in 0..seeds {
        let r = run(CALIBRATED_NOISE_SIGMA, 500 + seed);
        acc += r.ranging_accuracy();
        grasped += usize::from(r.reached_grasping());
        if let Some(s) = &r.switch {
            worst_lag = worst_lag.max((s.timestamp_s - r.crossing_time_s).abs());
        }
    }
    acc /= seeds as f64;
    let pass = clean_ok && acc >= 0.8 && grasped == seeds as usize;
    outcome(
        pass,
        format!(
            "noiseless: switch {:+.4} s from crossing (|.| <= {frame:.4}), final mode {}, accuracy {:.0}% (= 100%); noisy over {seeds} seeds: mean accuracy {:.1}% (>= 80%), {grasped}/{seeds} grasped, worst switch offset {worst_lag:.3} s",
            lag,
            clean.final_mode,
            100.0 * clean.ranging_accuracy(),
            100.0 * acc
        ),
    )
}

fn main() -> ExitCode {
    let mut all = true;

    let ((o, model), t) = timed(proximity_fit);
    all &= report(1, "proximity fit", t, Some(Duration::from_secs(10)), &o);

    let (o, t) =
        timed(|| tracking(&DoubleExpModel::new(85.9058, 0.3754, 1.5110e6, 4.0941).unwrap()));
    all &= report(2, "tracking error", t, Some(Duration::from_secs(30)), &o);

    let ((o, weights), t) = timed(sphere_round_trip);
    all &= report(
        3,
        "sphere-cap round trip",
        t,
        Some(Duration::from_secs(600)),
        &o,
    );

    let (o, t) = timed(poisson_exactness);
    all &= report(4, "Poisson solver", t, None, &o);

    let (o, t) = timed(|| backprop(weights.as_ref()));
    all &= report(5, "backprop", t, None, &o);

    let (o, t) = timed(roughness);
    all &= report(6, "roughness ordering", t, None, &o);

    let (o, t) = timed(texture_discrimination);
    all &= report(7, "texture discrimination", t, None, &o);

    let (o, t) = timed(state_machine);
    all &= report(8, "state machine", t, Some(Duration::from_secs(5)), &o);

    let (o, t) = timed(|| grasp_scenario(&model, weights.as_ref()));
    all &= report(9, "grasp scenario", t, Some(Duration::from_secs(60)), &o);

    println!(
        "acceptance: {}",
        if all {
            "all criteria PASS"
        } else {
            "FAILURES present"
        }
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
