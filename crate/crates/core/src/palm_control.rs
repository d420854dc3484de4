//! Mode switching between proximity ranging and tactile sensing, the device
//! command log it produces, and a closed-loop approach-and-grasp simulation.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gradient_mapper::{infer_gradients, MlpWeights};
use crate::kv::KeyValues;
use crate::proximity::{DoubleExpModel, Tracker, TrackingReport};
use crate::raster::{HeightMap, RasterImage, SegMask};
use crate::scene_sim::ApproachScenario;
use crate::surface_recon::reconstruct;
use crate::tactile_calib::{detect_contact_circle, DEFAULT_CONTACT_THRESHOLD};
use crate::tactile_render::{make_height_sphere_press, render, Grid, LightingRig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Proximity,
    Switching,
    Tactile,
    Grasping,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Proximity,
        Mode::Switching,
        Mode::Tactile,
        Mode::Grasping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Proximity => "Proximity",
            Mode::Switching => "Switching",
            Mode::Tactile => "Tactile",
            Mode::Grasping => "Grasping",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub enum SensorEvent {
    DistanceMeasured(f64),
    TactileFrame(Arc<RasterImage>),
    /// Absolute time in seconds; must not decrease.
    Tick(f64),
}

impl SensorEvent {
    pub fn name(&self) -> &'static str {
        match self {
            SensorEvent::DistanceMeasured(_) => "DistanceMeasured",
            SensorEvent::TactileFrame(_) => "TactileFrame",
            SensorEvent::Tick(_) => "Tick",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    ServoPulse,
    LedSet,
    GraspSignal,
    BeltAdjust,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::ServoPulse => "ServoPulse",
            CommandKind::LedSet => "LedSet",
            CommandKind::GraspSignal => "GraspSignal",
            CommandKind::BeltAdjust => "BeltAdjust",
        }
    }
}

impl FromStr for CommandKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            CommandKind::ServoPulse,
            CommandKind::LedSet,
            CommandKind::GraspSignal,
            CommandKind::BeltAdjust,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidInput(format!("unknown command kind '{s}'")))
    }
}

/// One line of the command log.
///
/// `value` carries the trigger distance for a deploy pulse, 1/0 for the LED,
/// the contact statistic for a grasp and the signed travel for a belt move.
/// An `LedSet` issued with a deploy pulse uses `dur_ms` as its switch-on delay.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceCommand {
    pub kind: CommandKind,
    pub pulse_us: u32,
    pub dur_ms: u32,
    pub value: f64,
    pub timestamp_s: f64,
}

impl fmt::Display for DeviceCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={:.3} kind={} pulse_us={} dur_ms={} val={}",
            self.timestamp_s,
            self.kind.name(),
            self.pulse_us,
            self.dur_ms,
            self.value
        )
    }
}

impl FromStr for DeviceCommand {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |reason: String| Error::Parse { line: 0, reason };
        let mut fields = [None; 5];
        const KEYS: [&str; 5] = ["t", "kind", "pulse_us", "dur_ms", "val"];
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| bad(format!("bad token '{tok}'")))?;
            let i = KEYS
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| bad(format!("unknown field '{k}'")))?;
            fields[i] = Some(v);
        }
        let get = |i: usize| fields[i].ok_or_else(|| bad(format!("missing field '{}'", KEYS[i])));
        let num = |i: usize| -> Result<f64> {
            get(i)?
                .parse()
                .map_err(|_| bad(format!("bad number in '{}'", KEYS[i])))
        };
        let int = |i: usize| -> Result<u32> {
            get(i)?
                .parse()
                .map_err(|_| bad(format!("bad integer in '{}'", KEYS[i])))
        };
        Ok(DeviceCommand {
            timestamp_s: num(0)?,
            kind: get(1)?.parse()?,
            pulse_us: int(2)?,
            dur_ms: int(3)?,
            value: num(4)?,
        })
    }
}

pub fn format_log(commands: &[DeviceCommand]) -> String {
    let mut s = String::new();
    for c in commands {
        let _ = writeln!(s, "{c}");
    }
    s
}

pub fn parse_log(text: &str) -> Result<Vec<DeviceCommand>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.parse().map_err(|e| match e {
                Error::Parse { reason, .. } => Error::Parse {
                    line: i + 1,
                    reason,
                },
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchConfig {
    pub distance_threshold_cm: f64,
    pub deploy_pulse_us: u32,
    pub retract_pulse_us: u32,
    pub deploy_duration_ms: u32,
    pub contact_threshold: f64,
    pub contact_frames: usize,
    pub control_rate_hz: f64,
    pub sense_rate_fps: f64,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            distance_threshold_cm: 10.0,
            deploy_pulse_us: 100,
            retract_pulse_us: 2500,
            deploy_duration_ms: 1200,
            contact_threshold: 0.05,
            contact_frames: 3,
            control_rate_hz: 50.0,
            sense_rate_fps: 30.0,
        }
    }
}

impl SwitchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("distance threshold", self.distance_threshold_cm),
            ("contact threshold", self.contact_threshold),
            ("control rate", self.control_rate_hz),
            ("sense rate", self.sense_rate_fps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.contact_frames == 0 || self.deploy_duration_ms == 0 {
            return Err(Error::InvalidInput(
                "contact frames and deploy duration must be non-zero".into(),
            ));
        }
        Ok(())
    }

    /// Next control-grid instant at or after `t`.
    pub fn snap(&self, t: f64) -> f64 {
        let k = (t * self.control_rate_hz - 1e-9).ceil().max(0.0);
        k / self.control_rate_hz
    }

    pub fn on_grid(&self, t: f64) -> bool {
        let k = t * self.control_rate_hz;
        (k - k.round()).abs() < 1e-6
    }

    /// Leaves `self` untouched when any key fails to parse or validate.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        let mut c = *self;
        kv.read_into("distance_threshold", &mut c.distance_threshold_cm)?;
        kv.read_into("deploy_pulse", &mut c.deploy_pulse_us)?;
        kv.read_into("retract_pulse", &mut c.retract_pulse_us)?;
        kv.read_into("deploy_duration", &mut c.deploy_duration_ms)?;
        kv.read_into("contact_threshold", &mut c.contact_threshold)?;
        kv.read_into("contact_frames", &mut c.contact_frames)?;
        kv.read_into("control_rate", &mut c.control_rate_hz)?;
        kv.read_into("sense_rate", &mut c.sense_rate_fps)?;
        c.validate()?;
        *self = c;
        Ok(())
    }
}

pub fn mean_abs_difference(frame: &RasterImage, reference: &RasterImage) -> Result<f64> {
    let d = frame.difference(reference)?;
    Ok(d.data().iter().map(|x| x.abs()).sum::<f64>() / d.data().len() as f64)
}

/// Debounced contact test: fires once the difference has exceeded the
/// threshold on `contact_frames` consecutive frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContactDetector {
    streak: usize,
    pub last_level: f64,
}

impl ContactDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn streak(&self) -> usize {
        self.streak
    }

    pub fn update(
        &mut self,
        frame: &RasterImage,
        reference: &RasterImage,
        cfg: &SwitchConfig,
    ) -> Result<bool> {
        let level = mean_abs_difference(frame, reference)?;
        self.last_level = level;
        if level > cfg.contact_threshold {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        Ok(self.streak >= cfg.contact_frames)
    }
}

pub fn detect_contact(
    detector: &mut ContactDetector,
    frame: &RasterImage,
    reference: &RasterImage,
    cfg: &SwitchConfig,
) -> Result<bool> {
    detector.update(frame, reference, cfg)
}

const BELT_STEPS: i64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PalmState {
    pub mode: Mode,
    /// Held at its trigger value while switching.
    pub last_distance: Option<f64>,
    pub led_on: bool,
    belt: i64,
    clock_s: f64,
    switch_started_s: Option<f64>,
    /// First tactile frame after deployment, taken as the no-contact view.
    reference: Option<Arc<RasterImage>>,
    detector: ContactDetector,
}

impl Default for PalmState {
    fn default() -> Self {
        Self::new()
    }
}

impl PalmState {
    pub fn new() -> Self {
        Self {
            mode: Mode::Proximity,
            last_distance: None,
            led_on: false,
            belt: 0,
            clock_s: 0.0,
            switch_started_s: None,
            reference: None,
            detector: ContactDetector::new(),
        }
    }

    /// 0 = window clear, 1 = elastic layer fully deployed.
    pub fn belt_position(&self) -> f64 {
        self.belt as f64 / BELT_STEPS as f64
    }

    pub fn clock_s(&self) -> f64 {
        self.clock_s
    }

    pub fn has_reference(&self) -> bool {
        self.reference.is_some()
    }

    pub fn contact_streak(&self) -> usize {
        self.detector.streak()
    }
}

fn invalid(mode: Mode, event: &str) -> Error {
    Error::InvalidTransition {
        mode: mode.name().into(),
        event: event.into(),
    }
}

/// Advances the state machine by one event.
///
/// Valid pairs: ranging is accepted in `Proximity` (and ignored while
/// `Switching`), tactile frames in `Tactile` and `Grasping`, ticks anywhere.
pub fn step(
    state: &PalmState,
    event: &SensorEvent,
    cfg: &SwitchConfig,
) -> Result<(PalmState, Vec<DeviceCommand>)> {
    let mut s = state.clone();
    let mut out = Vec::new();
    match (state.mode, event) {
        (_, SensorEvent::Tick(t)) => {
            if !t.is_finite() || *t < state.clock_s {
                return Err(Error::InvalidInput(format!(
                    "tick at {t} s precedes clock {} s",
                    state.clock_s
                )));
            }
            s.clock_s = *t;
            if state.mode == Mode::Switching {
                let start = state.switch_started_s.expect("switching has a start time");
                let elapsed_ms = (t - start) * 1000.0;
                let dur = cfg.deploy_duration_ms as f64;
                if elapsed_ms >= dur - 1e-6 {
                    s.mode = Mode::Tactile;
                    s.belt = BELT_STEPS;
                    s.led_on = true;
                    s.switch_started_s = None;
                } else {
                    s.belt = ((elapsed_ms.max(0.0) / dur) * BELT_STEPS as f64).floor() as i64;
                }
            }
        }
        (Mode::Proximity, SensorEvent::DistanceMeasured(d)) => {
            if !d.is_finite() {
                return Err(Error::InvalidInput(format!("distance {d} is not finite")));
            }
            s.last_distance = Some(*d);
            if *d <= cfg.distance_threshold_cm {
                let t = cfg.snap(state.clock_s);
                out.push(DeviceCommand {
                    kind: CommandKind::ServoPulse,
                    pulse_us: cfg.deploy_pulse_us,
                    dur_ms: cfg.deploy_duration_ms,
                    value: *d,
                    timestamp_s: t,
                });
                out.push(DeviceCommand {
                    kind: CommandKind::LedSet,
                    pulse_us: 0,
                    dur_ms: cfg.deploy_duration_ms,
                    value: 1.0,
                    timestamp_s: t,
                });
                s.mode = Mode::Switching;
                s.switch_started_s = Some(t);
            }
        }
        (Mode::Switching, SensorEvent::DistanceMeasured(_)) => {}
        (Mode::Tactile | Mode::Grasping, SensorEvent::TactileFrame(frame)) => {
            let Some(reference) = state.reference.clone() else {
                s.reference = Some(frame.clone());
                return Ok((s, out));
            };
            if state.mode == Mode::Tactile && s.detector.update(frame, &reference, cfg)? {
                out.push(DeviceCommand {
                    kind: CommandKind::GraspSignal,
                    pulse_us: 0,
                    dur_ms: 0,
                    value: s.detector.last_level,
                    timestamp_s: cfg.snap(state.clock_s),
                });
                s.mode = Mode::Grasping;
            }
        }
        (mode, ev) => return Err(invalid(mode, ev.name())),
    }
    Ok((s, out))
}

/// Returns to `Proximity`, retracting whatever belt travel has been made.
pub fn reset(state: &PalmState, cfg: &SwitchConfig) -> (PalmState, Vec<DeviceCommand>) {
    let t = cfg.snap(state.clock_s);
    let mut out = Vec::new();
    if state.belt > 0 {
        out.push(DeviceCommand {
            kind: CommandKind::ServoPulse,
            pulse_us: cfg.retract_pulse_us,
            dur_ms: (state.belt_position() * cfg.deploy_duration_ms as f64).round() as u32,
            value: 0.0,
            timestamp_s: t,
        });
    }
    if state.mode != Mode::Proximity {
        out.push(DeviceCommand {
            kind: CommandKind::LedSet,
            pulse_us: 0,
            dur_ms: 0,
            value: 0.0,
            timestamp_s: t,
        });
    }
    let mut s = PalmState::new();
    s.clock_s = state.clock_s;
    (s, out)
}

/// Moves the belt while grasping; a full stroke takes the deploy duration.
pub fn belt_adjust(
    state: &PalmState,
    delta: f64,
    cfg: &SwitchConfig,
) -> Result<(PalmState, Vec<DeviceCommand>)> {
    if state.mode != Mode::Grasping {
        return Err(invalid(state.mode, "BeltAdjust"));
    }
    if !delta.is_finite() {
        return Err(Error::InvalidInput(format!(
            "belt delta {delta} is not finite"
        )));
    }
    let steps = (delta * BELT_STEPS as f64).round() as i64;
    if steps == 0 {
        return Ok((state.clone(), Vec::new()));
    }
    let next = state.belt + steps;
    if !(0..=BELT_STEPS).contains(&next) {
        return Err(Error::OutOfRange {
            value: state.belt_position() + delta,
            min: 0.0,
            max: 1.0,
        });
    }
    let mut s = state.clone();
    s.belt = next;
    let cmd = DeviceCommand {
        kind: CommandKind::BeltAdjust,
        pulse_us: if steps > 0 {
            cfg.deploy_pulse_us
        } else {
            cfg.retract_pulse_us
        },
        dur_ms: (steps.unsigned_abs() as f64 / BELT_STEPS as f64 * cfg.deploy_duration_ms as f64)
            .round() as u32,
        value: steps as f64 / BELT_STEPS as f64,
        timestamp_s: cfg.snap(state.clock_s),
    };
    Ok((s, vec![cmd]))
}

/// Scripted contact seen by the tactile camera once the layer is deployed.
#[derive(Debug, Clone)]
pub struct PressScript {
    pub grid: Grid,
    pub rig: LightingRig,
    pub sphere_radius_mm: f64,
    pub depth_mm: f64,
    pub center_px: (f64, f64),
    pub seed: u64,
}

impl Default for PressScript {
    fn default() -> Self {
        Self {
            grid: Grid::new(256, 192, 0.025),
            rig: LightingRig::default().with_noise(0.01),
            sphere_radius_mm: 2.5,
            depth_mm: 1.0,
            center_px: (128.0, 96.0),
            seed: 7,
        }
    }
}

impl PressScript {
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        let mut c = self.clone();
        kv.read_into("press_width", &mut c.grid.width)?;
        kv.read_into("press_height", &mut c.grid.height)?;
        kv.read_into("press_pitch", &mut c.grid.pixel_pitch)?;
        kv.read_into("press_radius", &mut c.sphere_radius_mm)?;
        kv.read_into("press_depth", &mut c.depth_mm)?;
        kv.read_into("press_center_u", &mut c.center_px.0)?;
        kv.read_into("press_center_v", &mut c.center_px.1)?;
        kv.read_into("press_seed", &mut c.seed)?;
        let mut noise = c.rig.noise_sigma;
        kv.read_into("press_noise", &mut noise)?;
        c.rig = c.rig.with_noise(noise);
        c.rig.validate()?;
        if !(c.depth_mm >= 0.0 && c.depth_mm < c.sphere_radius_mm && c.grid.pixel_pitch > 0.0) {
            return Err(Error::InvalidInput(
                "press depth must lie in [0, radius) and pitch be positive".into(),
            ));
        }
        *self = c;
        Ok(())
    }

    fn flat(&self, seed: u64) -> Result<RasterImage> {
        let g = self.grid;
        render(
            &HeightMap::flat(g.width, g.height, g.pixel_pitch)?,
            &self.rig,
            seed,
        )
    }

    fn pressed(&self, seed: u64) -> Result<RasterImage> {
        let (h, _) = make_height_sphere_press(
            self.sphere_radius_mm,
            self.depth_mm,
            self.center_px,
            self.grid,
        )?;
        render(&h, &self.rig, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp_s: f64,
    pub truth_cm: f64,
    pub measured_cm: Option<f64>,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchRecord {
    pub frame: usize,
    pub timestamp_s: f64,
    pub measured_cm: f64,
    pub truth_cm: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub commands: Vec<DeviceCommand>,
    pub frames: Vec<FrameRecord>,
    pub switch: Option<SwitchRecord>,
    /// When the true distance passes the threshold.
    pub crossing_time_s: f64,
    pub contact_time_s: Option<f64>,
    pub final_mode: Mode,
    pub tracking: TrackingReport,
    pub reconstruction: Option<HeightMap>,
}

impl ScenarioReport {
    pub fn reached_grasping(&self) -> bool {
        self.final_mode == Mode::Grasping
    }

    /// Fraction of ranging checkpoints with absolute error below 1 cm.
    pub fn ranging_accuracy(&self) -> f64 {
        self.tracking.accuracy(1.0)
    }

    pub fn frames_csv(&self) -> String {
        let mut s = String::from("frame,t_s,truth_cm,measured_cm,mode\n");
        for f in &self.frames {
            let m = f.measured_cm.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                f.index, f.timestamp_s, f.truth_cm, m, f.mode
            );
        }
        s
    }

    pub fn summary_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("final_mode", self.final_mode);
        kv.set("crossing_time_s", self.crossing_time_s);
        if let Some(sw) = &self.switch {
            kv.set("switch_frame", sw.frame);
            kv.set("switch_time_s", sw.timestamp_s);
            kv.set("switch_measured_cm", sw.measured_cm);
            kv.set("switch_truth_cm", sw.truth_cm);
        }
        if let Some(t) = self.contact_time_s {
            kv.set("contact_time_s", t);
        }
        kv.set("tracking_mae_cm", self.tracking.mae_cm);
        kv.set("ranging_accuracy", self.ranging_accuracy());
        kv
    }
}

/// Seconds of tactile sensing allowed after the target reaches the palm.
const TACTILE_TIMEOUT_S: f64 = 2.0;

/// Drives an approach through ranging, switching, contact and reconstruction.
///
/// Control ticks on the control-rate grid and sensor frames at the sense
/// rate are merged in time order; every sensor event is preceded by a tick
/// at its own timestamp so commands land on the next control instant.
pub fn run_grasp_scenario(
    scenario: &ApproachScenario,
    script: &PressScript,
    model: &DoubleExpModel,
    weights: &MlpWeights,
    cfg: &SwitchConfig,
) -> Result<ScenarioReport> {
    cfg.validate()?;
    scenario.validate()?;
    script.rig.validate()?;
    if (scenario.frame_rate - cfg.sense_rate_fps).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "scenario frame rate {} differs from sense rate {}",
            scenario.frame_rate, cfg.sense_rate_fps
        )));
    }
    let fps = cfg.sense_rate_fps;
    let contact_s = scenario.start_distance_cm / scenario.speed_cmps;
    let end_s = contact_s + TACTILE_TIMEOUT_S;
    let crossing_time_s =
        (scenario.start_distance_cm - cfg.distance_threshold_cm) / scenario.speed_cmps;

    let mut state = PalmState::new();
    let mut commands = Vec::new();
    let mut frames = Vec::new();
    let mut tracker = Tracker::new(*model);
    let mut switch = None;
    let mut contact_time_s = None;
    let mut scene = scenario.frames()?;
    let mut next_tick = 0u64;
    let mut reference: Option<Arc<RasterImage>> = None;
    let mut last_press: Option<(usize, Arc<RasterImage>)> = None;

    let deliver = |state: &mut PalmState,
                   ev: SensorEvent,
                   commands: &mut Vec<DeviceCommand>,
                   index: usize| {
        let (next, cmds) = step(state, &ev, cfg).map_err(|e| e.at_frame(index))?;
        *state = next;
        commands.extend(cmds);
        Ok::<(), Error>(())
    };

    for index in 0.. {
        let t = index as f64 / fps;
        if t > end_s + 1e-9 {
            break;
        }
        while (next_tick as f64) / cfg.control_rate_hz <= t + 1e-12 {
            let tick = next_tick as f64 / cfg.control_rate_hz;
            deliver(&mut state, SensorEvent::Tick(tick), &mut commands, index)?;
            next_tick += 1;
        }
        deliver(&mut state, SensorEvent::Tick(t), &mut commands, index)?;

        let truth_cm = (scenario.start_distance_cm - scenario.speed_cmps * t).max(0.0);
        let mut measured_cm = None;
        match state.mode {
            Mode::Proximity | Mode::Switching => {
                let Some(frame) = scene.next() else { break };
                let ranging = state.mode == Mode::Proximity;
                let d = if ranging {
                    tracker
                        .push(&frame.depth, &frame.mask, frame.truth_cm)?
                        .predicted_cm
                } else {
                    model.predict(
                        crate::proximity::mask_mean_depth(&frame.depth, &frame.mask)
                            .map_err(|e| e.at_frame(index))?,
                    )
                };
                measured_cm = Some(d);
                let before = state.mode;
                deliver(
                    &mut state,
                    SensorEvent::DistanceMeasured(d),
                    &mut commands,
                    index,
                )?;
                if before == Mode::Proximity && state.mode == Mode::Switching {
                    switch = Some(SwitchRecord {
                        frame: index,
                        timestamp_s: commands.last().map_or(t, |c| c.timestamp_s),
                        measured_cm: d,
                        truth_cm: frame.truth_cm,
                    });
                }
            }
            Mode::Tactile => {
                let seed = script.seed.wrapping_add(index as u64);
                let frame = if reference.is_none() {
                    let r = Arc::new(script.flat(seed)?);
                    reference = Some(r.clone());
                    r
                } else if t >= contact_s - 1e-12 {
                    let p = Arc::new(script.pressed(seed).map_err(|e| e.at_frame(index))?);
                    last_press = Some((index, p.clone()));
                    p
                } else {
                    Arc::new(script.flat(seed)?)
                };
                deliver(
                    &mut state,
                    SensorEvent::TactileFrame(frame),
                    &mut commands,
                    index,
                )?;
                if state.mode == Mode::Grasping {
                    contact_time_s = commands.last().map(|c| c.timestamp_s);
                }
            }
            Mode::Grasping => {}
        }
        frames.push(FrameRecord {
            index,
            timestamp_s: t,
            truth_cm,
            measured_cm,
            mode: state.mode,
        });
        if state.mode == Mode::Grasping {
            break;
        }
    }

    let reconstruction = match (state.mode, &reference, &last_press) {
        (Mode::Grasping, Some(r), Some((index, p))) => Some(
            reconstruct_contact(p, r, weights, script.grid.pixel_pitch)
                .map_err(|e| e.at_frame(*index))?,
        ),
        _ => None,
    };

    Ok(ScenarioReport {
        commands,
        frames,
        switch,
        crossing_time_s,
        contact_time_s,
        final_mode: state.mode,
        tracking: tracker.finish()?,
        reconstruction,
    })
}

/// Infers gradients inside the detected contact disc and integrates them.
pub fn reconstruct_contact(
    frame: &RasterImage,
    reference: &RasterImage,
    weights: &MlpWeights,
    pixel_pitch: f64,
) -> Result<HeightMap> {
    let circle = detect_contact_circle(frame, reference, DEFAULT_CONTACT_THRESHOLD)?;
    let (cu, cv) = circle.center;
    let r2 = circle.radius_px * circle.radius_px;
    let domain = SegMask::from_fn(frame.width(), frame.height(), |u, v| {
        let (du, dv) = (u as f64 - cu, v as f64 - cv);
        du * du + dv * dv <= r2
    });
    let g = infer_gradients(weights, frame, Some(&domain))?;
    reconstruct(&g, pixel_pitch)
}
