//! Synthetic world: scripted head-motion scenarios, utensil-mouth contact,
//! and the closed-loop episode runner tying perception, classification and
//! control together at a fixed 100 Hz tick.

pub mod ablation;
pub mod gen;
pub mod stats;

use crate::classify::{InteractionLabel, Model};
use crate::control::{
    apply_twist, coarsen, force_step, goal_step, outside_mouth_policy, AdmittanceParams,
    Awareness, ControlAction, ControlEvent, EndEffectorState, FsmConfig, FsmContext, FsmState,
    TransferFsm,
};
use crate::error::{Error, Result};
use crate::features::{
    extract, FeatureConfig, InteractionWindow, KeypointSnapshot, WRENCH_CHANNELS,
};
use crate::geom::Iso3;
use crate::headmodel::{
    mouth_state, synthesize, HeadParams, HeadTemplate, MouthPose, DEFAULT_OPEN_THRESHOLD_MM,
};
use crate::perception::{default_rig, CameraModel, MouthTracker, OcclusionConfig, RegistrationConfig};
use gen::ParticipantProfile;
use nalgebra::{Point3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const EPISODE_DT_S: f64 = 0.01;
pub const WRENCH_SUBSTEPS: usize = 10;
pub const SCENARIO_FORMAT: &str = "scenario-v1";

/// iBUG landmark index of the nose tip.
const NOSE_LANDMARK: usize = 30;

// ---------------------------------------------------------------------------
// scenario scripts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    Static,
    S1Turn,
    S2Speak,
    S3Spasm,
    Feeding1Manipulate,
    Feeding2Impulse,
}

impl ScenarioKind {
    pub fn parse(name: &str) -> Result<ScenarioKind> {
        match name {
            "static" => Ok(ScenarioKind::Static),
            "s1-turn" => Ok(ScenarioKind::S1Turn),
            "s2-speak" => Ok(ScenarioKind::S2Speak),
            "s3-spasm" => Ok(ScenarioKind::S3Spasm),
            "feeding1" => Ok(ScenarioKind::Feeding1Manipulate),
            "feeding2" => Ok(ScenarioKind::Feeding2Impulse),
            other => Err(Error::Scenario(format!("unknown scenario {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Static => "static",
            ScenarioKind::S1Turn => "s1-turn",
            ScenarioKind::S2Speak => "s2-speak",
            ScenarioKind::S3Spasm => "s3-spasm",
            ScenarioKind::Feeding1Manipulate => "feeding1",
            ScenarioKind::Feeding2Impulse => "feeding2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScriptEventKind {
    /// Yaw about a vertical axis behind the head, ramped over the duration
    /// and held.
    Turn { yaw_deg: f64 },
    /// Jaw open/close oscillation crossing the open threshold.
    Speak { freq_hz: f64 },
    /// Whole-head out-and-back displacement (mm, world frame).
    Spasm { displacement_mm: [f64; 3] },
    /// Tongue-guided utensil push to an offset in the mouth frame (mm).
    Manipulate { offset_mouth_mm: [f64; 3] },
    /// Jaw clamp with the given peak force (N).
    Bite { peak_n: f64 },
}

impl ScriptEventKind {
    fn label(&self) -> Option<InteractionLabel> {
        match self {
            ScriptEventKind::Spasm { .. } => Some(InteractionLabel::Impulsive),
            ScriptEventKind::Manipulate { .. } => Some(InteractionLabel::InMouthManipulation),
            ScriptEventKind::Bite { .. } => Some(InteractionLabel::Bite),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub t: f64,
    pub duration_s: f64,
    pub kind: ScriptEventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub duration_s: f64,
    pub mouth_open_time_s: f64,
    pub events: Vec<ScriptEvent>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::Scenario("non-positive scenario duration".into()));
        }
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if e.t <= last {
                return Err(Error::Scenario(format!(
                    "event timestamps must strictly increase (at t = {})",
                    e.t
                )));
            }
            if e.duration_s <= 0.0 {
                return Err(Error::Scenario(format!("event at t = {} has no duration", e.t)));
            }
            last = e.t;
        }
        Ok(())
    }

    /// The canonical script for each scenario kind; per-trial magnitudes are
    /// drawn from the seed where the study calls for variation.
    pub fn canonical(kind: ScenarioKind, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_0a11);
        let open = 0.2;
        match kind {
            ScenarioKind::Static => Scenario {
                kind,
                duration_s: 3.0,
                mouth_open_time_s: open,
                events: vec![ScriptEvent {
                    t: 2.0,
                    duration_s: 0.4,
                    kind: ScriptEventKind::Bite { peak_n: rng.random_range(3.0..10.0) },
                }],
            },
            ScenarioKind::S1Turn => Scenario {
                kind,
                duration_s: 3.0,
                mouth_open_time_s: open,
                events: vec![ScriptEvent {
                    t: 1.0,
                    duration_s: 0.5,
                    kind: ScriptEventKind::Turn { yaw_deg: 30.0 },
                }],
            },
            ScenarioKind::S2Speak => Scenario {
                kind,
                duration_s: 3.2,
                mouth_open_time_s: open,
                events: vec![ScriptEvent {
                    t: 1.0,
                    duration_s: 2.0,
                    kind: ScriptEventKind::Speak { freq_hz: 2.0 },
                }],
            },
            ScenarioKind::S3Spasm => Scenario {
                kind,
                duration_s: 1.2,
                mouth_open_time_s: open,
                events: vec![ScriptEvent {
                    t: 0.4,
                    duration_s: 0.3,
                    kind: ScriptEventKind::Spasm { displacement_mm: [0.0, 0.0, 40.0] },
                }],
            },
            ScenarioKind::Feeding1Manipulate => Scenario {
                kind,
                duration_s: 5.0,
                mouth_open_time_s: open,
                events: vec![
                    ScriptEvent {
                        t: 2.0,
                        duration_s: 1.0,
                        kind: ScriptEventKind::Manipulate {
                            offset_mouth_mm: [12.0, 0.0, 0.0],
                        },
                    },
                    ScriptEvent {
                        t: 4.0,
                        duration_s: 0.4,
                        kind: ScriptEventKind::Bite { peak_n: rng.random_range(3.0..8.0) },
                    },
                ],
            },
            ScenarioKind::Feeding2Impulse => {
                let d = rng.random_range(18.0..30.0);
                let dir = Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    1.0,
                )
                .normalize();
                Scenario {
                    kind,
                    duration_s: 5.0,
                    mouth_open_time_s: open,
                    events: vec![
                        ScriptEvent {
                            t: 2.0,
                            duration_s: 0.6,
                            kind: ScriptEventKind::Spasm {
                                displacement_mm: [d * dir.x, d * dir.y, d * dir.z],
                            },
                        },
                        ScriptEvent {
                            t: 3.5,
                            duration_s: 0.4,
                            kind: ScriptEventKind::Bite { peak_n: rng.random_range(3.0..8.0) },
                        },
                    ],
                }
            }
        }
    }
}

/// Human-editable scenario file: header line, then one line per field/event.
pub fn write_scenario(s: &Scenario) -> String {
    let mut out = format!(
        "{SCENARIO_FORMAT}\nkind {}\nduration {}\nmouth-open {}\n",
        s.kind.name(),
        s.duration_s,
        s.mouth_open_time_s
    );
    for e in &s.events {
        let body = match &e.kind {
            ScriptEventKind::Turn { yaw_deg } => format!("turn {yaw_deg}"),
            ScriptEventKind::Speak { freq_hz } => format!("speak {freq_hz}"),
            ScriptEventKind::Spasm { displacement_mm: d } => {
                format!("spasm {} {} {}", d[0], d[1], d[2])
            }
            ScriptEventKind::Manipulate { offset_mouth_mm: o } => {
                format!("manipulate {} {} {}", o[0], o[1], o[2])
            }
            ScriptEventKind::Bite { peak_n } => format!("bite {peak_n}"),
        };
        out.push_str(&format!("event {} {} {}\n", e.t, e.duration_s, body));
    }
    out
}

pub fn read_scenario(text: &str) -> Result<Scenario> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines.next().unwrap_or("");
    if header.trim() != SCENARIO_FORMAT {
        return Err(Error::Scenario(format!("expected {SCENARIO_FORMAT} header, got {header:?}")));
    }
    let mut kind = None;
    let mut duration = None;
    let mut mouth_open = 0.2;
    let mut events = Vec::new();
    let bad = |line: &str| Error::Scenario(format!("malformed scenario line {line:?}"));
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["kind", name] => kind = Some(ScenarioKind::parse(name)?),
            ["duration", v] => duration = Some(v.parse().map_err(|_| bad(line))?),
            ["mouth-open", v] => mouth_open = v.parse().map_err(|_| bad(line))?,
            ["event", t, dur, rest @ ..] => {
                let t: f64 = t.parse().map_err(|_| bad(line))?;
                let duration_s: f64 = dur.parse().map_err(|_| bad(line))?;
                let num = |s: &&str| -> Result<f64> { s.parse().map_err(|_| bad(line)) };
                let kind = match rest {
                    ["turn", y] => ScriptEventKind::Turn { yaw_deg: num(y)? },
                    ["speak", f] => ScriptEventKind::Speak { freq_hz: num(f)? },
                    ["spasm", x, y, z] => ScriptEventKind::Spasm {
                        displacement_mm: [num(x)?, num(y)?, num(z)?],
                    },
                    ["manipulate", x, y, z] => ScriptEventKind::Manipulate {
                        offset_mouth_mm: [num(x)?, num(y)?, num(z)?],
                    },
                    ["bite", p] => ScriptEventKind::Bite { peak_n: num(p)? },
                    _ => return Err(bad(line)),
                };
                events.push(ScriptEvent { t, duration_s, kind });
            }
            _ => return Err(bad(line)),
        }
    }
    let s = Scenario {
        kind: kind.ok_or_else(|| Error::Scenario("missing kind".into()))?,
        duration_s: duration.ok_or_else(|| Error::Scenario("missing duration".into()))?,
        mouth_open_time_s: mouth_open,
        events,
    };
    s.validate()?;
    Ok(s)
}

// ---------------------------------------------------------------------------
// scripted head state

const JAW_OPEN: f64 = 0.42;
const JAW_CLOSED: f64 = 0.02;
const JAW_BITE_END: f64 = 0.2;

/// True head parameters at time t per the script.
pub fn head_at(scenario: &Scenario, profile: &ParticipantProfile, t: f64) -> HeadParams {
    let mut jaw = if t >= scenario.mouth_open_time_s { JAW_OPEN } else { JAW_CLOSED };
    let mut pose = Iso3::identity();
    for e in &scenario.events {
        let tau = (t - e.t) / e.duration_s;
        match &e.kind {
            ScriptEventKind::Turn { yaw_deg } => {
                if t >= e.t {
                    let frac = tau.min(1.0);
                    let angle = yaw_deg.to_radians() * frac;
                    // yaw about a vertical axis through a pivot behind the head
                    let pivot = Vector3::new(0.0, 0.0, -60.0);
                    let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle);
                    let trans = pivot - rot * pivot;
                    pose = Iso3::from_parts(Translation3::from(trans), rot) * pose;
                }
            }
            ScriptEventKind::Speak { freq_hz } => {
                if (0.0..1.0).contains(&tau) {
                    // square-ish open/close wave with 30 ms blends
                    let phase = (t - e.t) * freq_hz % 1.0;
                    let blend = 0.03 * freq_hz; // in phase units
                    let open_frac = if phase < 0.5 {
                        (phase / blend).min((0.5 - phase) / blend).clamp(0.0, 1.0)
                    } else {
                        0.0_f64.max(1.0 - ((phase - 0.5) / blend).min((1.0 - phase) / blend).clamp(0.0, 1.0))
                    };
                    jaw = JAW_CLOSED + (JAW_OPEN - JAW_CLOSED) * open_frac;
                }
            }
            ScriptEventKind::Spasm { displacement_mm } => {
                if (0.0..1.0).contains(&tau) {
                    let d = Vector3::new(
                        displacement_mm[0],
                        displacement_mm[1],
                        displacement_mm[2],
                    );
                    let s = (std::f64::consts::PI * tau).sin();
                    pose = Iso3::from_parts(
                        Translation3::from(pose.translation.vector + d * s),
                        pose.rotation,
                    );
                }
            }
            ScriptEventKind::Bite { .. } => {
                if t >= e.t {
                    // the clamp itself is fast; the hold lasts the event
                    let frac = ((t - e.t) / 0.15).min(1.0);
                    jaw = jaw.min(JAW_OPEN + (JAW_BITE_END - JAW_OPEN) * frac);
                }
            }
            ScriptEventKind::Manipulate { .. } => {}
        }
    }
    HeadParams {
        shape: profile.shape.clone(),
        expression: profile.expression.clone(),
        jaw_angle: jaw.clamp(0.0, 0.5),
        pose,
    }
}

// ---------------------------------------------------------------------------
// contact model

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ContactConfig {
    /// Grip spring between the utensil tip and its anchor in the mouth (N/mm).
    pub k_grip: f64,
    /// Tip must be this close to the true mouth center to engage (mm).
    pub engage_radius_mm: f64,
    /// Force falls to zero linearly over this band past the engage radius.
    pub falloff_mm: f64,
    /// Force ramps out over this long after a scripted event ends (s).
    pub release_s: f64,
    /// Contact onset threshold for classification (N).
    pub onset_threshold_n: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        ContactConfig {
            k_grip: 0.8,
            engage_radius_mm: 25.0,
            falloff_mm: 10.0,
            release_s: 0.1,
            onset_threshold_n: 0.3,
        }
    }
}

/// Distance-based envelope keeping contact forces continuous as the tip
/// leaves the mouth.
fn distance_envelope(cfg: &ContactConfig, d: f64) -> f64 {
    (1.0 - (d - cfg.engage_radius_mm) / cfg.falloff_mm).clamp(0.0, 1.0)
}

fn time_envelope(e: &ScriptEvent, cfg: &ContactConfig, t: f64) -> f64 {
    if t < e.t {
        0.0
    } else if t < e.t + e.duration_s {
        1.0
    } else {
        (1.0 - (t - e.t - e.duration_s) / cfg.release_s).clamp(0.0, 1.0)
    }
}

/// Contact wrench on the F/T sensor for a tip position at time t. `anchor`
/// is the grip point in the true mouth frame (set at event onset).
pub fn contact_wrench(
    cfg: &ContactConfig,
    scenario: &Scenario,
    mouth_true: &MouthPose,
    tip: Point3<f64>,
    anchor_mouth: Option<Point3<f64>>,
    t: f64,
) -> [f64; WRENCH_CHANNELS] {
    let mut w = [0.0; WRENCH_CHANNELS];
    let d = (tip - mouth_true.center()).norm();
    let env_d = distance_envelope(cfg, d);
    if env_d == 0.0 {
        return w;
    }
    for e in &scenario.events {
        let env_t = time_envelope(e, cfg, t);
        if env_t == 0.0 {
            continue;
        }
        match &e.kind {
            ScriptEventKind::Spasm { .. } | ScriptEventKind::Manipulate { .. } => {
                let Some(anchor) = anchor_mouth else { continue };
                let mut target = anchor;
                if let ScriptEventKind::Manipulate { offset_mouth_mm: o } = &e.kind {
                    let tau = ((t - e.t) / (0.3 * e.duration_s)).clamp(0.0, 1.0);
                    target += Vector3::new(o[0], o[1], o[2]) * tau;
                }
                let anchor_world = mouth_true.frame * target;
                let f = cfg.k_grip * (anchor_world - tip) * env_t * env_d;
                w[0] += f.x;
                w[1] += f.y;
                w[2] += f.z;
            }
            ScriptEventKind::Bite { peak_n } => {
                let ramp = ((t - e.t) / 0.03).clamp(0.0, 1.0);
                let dir = mouth_true.frame.rotation * Vector3::new(0.0, -1.0, 0.0);
                let f = dir * *peak_n * ramp * env_t * env_d;
                w[0] += f.x;
                w[1] += f.y;
                w[2] += f.z;
                w[3] += peak_n * ramp * env_t * env_d * 10.0;
            }
            _ => {}
        }
    }
    w
}

// ---------------------------------------------------------------------------
// episode runner

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerceptionMode {
    RealTime,
    OneTime,
}

impl PerceptionMode {
    pub fn parse(s: &str) -> Result<PerceptionMode> {
        match s {
            "realtime" => Ok(PerceptionMode::RealTime),
            "onetime" => Ok(PerceptionMode::OneTime),
            other => Err(Error::Config(format!("unknown perception mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub dt_s: f64,
    pub contact: ContactConfig,
    pub fsm: FsmConfig,
    /// Utensil start/retract standoff from the mouth along its normal (mm).
    pub standoff_mm: f64,
    /// Perception degrades (hold-last) when the utensil is engaged and the
    /// mouth moves faster than this (occlusion + motion blur) (mm/s).
    pub blur_speed_mm_s: f64,
    /// Estimated-mouth speed that signals an outside-mouth spasm (mm/s).
    pub spasm_detect_mm_s: f64,
    pub goal_reached_mm: f64,
    pub goal_reached_speed: f64,
    /// Classifier windows wait this long after contact onset (s).
    pub classify_latency_s: f64,
    pub keypoint_noise_mm: f64,
    pub wrench_noise_n: f64,
    pub max_speed_mm_s: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            dt_s: EPISODE_DT_S,
            contact: ContactConfig::default(),
            fsm: FsmConfig::default(),
            standoff_mm: 120.0,
            blur_speed_mm_s: 60.0,
            spasm_detect_mm_s: 150.0,
            goal_reached_mm: 1.0,
            goal_reached_speed: 20.0,
            classify_latency_s: 0.1,
            keypoint_noise_mm: 0.3,
            wrench_noise_n: 0.02,
            max_speed_mm_s: 200.0,
        }
    }
}

/// The contact-type source driving FSM events.
pub enum EventSource<'a> {
    /// Scripted ground-truth label delivered one tick after onset.
    Oracle,
    /// Trained classifier fed a buffered 100 ms window.
    Classifier(&'a Model),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TickLog {
    pub t: f64,
    pub tip: [f64; 3],
    /// Tip expressed in the true mouth frame (placement metrics).
    pub tip_mouth: [f64; 3],
    pub true_center: [f64; 3],
    pub est_center: [f64; 3],
    pub est_open: bool,
    pub true_open: bool,
    pub held: bool,
    pub force_n: f64,
    pub wrench: [f64; 6],
    pub state: FsmState,
    pub action: ControlAction,
    pub event: Option<ControlEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeSummary {
    pub terminal_mouth_error_mm: f64,
    pub max_force_n: f64,
    /// Fraction of scripted-closed ticks spent Paused (speak scenarios).
    pub paused_closed_fraction: Option<f64>,
    /// Seconds from scripted spasm onset to the first Retract tick.
    pub retract_latency_s: Option<f64>,
    /// Whether the FSM changed state inside the spasm window.
    pub state_changed_during_spasm: Option<bool>,
    /// Max |F| inside a scripted spasm window.
    pub max_force_impulse_n: Option<f64>,
    /// Mean |F| inside a scripted manipulation window.
    pub mean_force_manipulation_n: Option<f64>,
    /// Tip in the true mouth frame one tick before the first contact event.
    pub placement_in_mouth_mm: Option<[f64; 3]>,
    /// Retract (or Done) reached within 0.5 s of the first bite onset.
    pub bite_retracted: Option<bool>,
    /// Retract entered after the first contact-generating event began.
    pub retracted_after_first_contact: Option<bool>,
    pub final_state: FsmState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub ticks: Vec<TickLog>,
    pub summary: EpisodeSummary,
}

struct Perception {
    tracker: MouthTracker,
    cameras: Vec<CameraModel>,
    occ: OcclusionConfig,
    frozen: Option<MouthPose>,
    mode: PerceptionMode,
    prev_est: Option<(f64, Point3<f64>)>,
    est_speed: f64,
    last_fresh: Option<(f64, MouthPose)>,
}

impl Perception {
    fn observe(
        &mut self,
        landmarks: &[Point3<f64>],
        blur: bool,
        t: f64,
        seed: u64,
    ) -> Result<(MouthPose, bool)> {
        if let Some(frozen) = &self.frozen {
            return Ok((frozen.clone(), false));
        }
        if blur {
            // occlusion plus motion blur: no usable keypoints this tick, so
            // hold the last fresh pose like any other perception dropout
            if let Some((tf, pose)) = &self.last_fresh {
                if t - tf <= crate::perception::HOLD_LAST_S {
                    return Ok((pose.clone(), true));
                }
            }
            return Err(Error::Registration("mouth lost during motion blur".into()));
        }
        let obs = crate::perception::observe(landmarks, &self.cameras, &self.occ, t, seed)?;
        let out = self.tracker.track(&obs)?;
        // estimated head-origin speed (registration pose, jaw-independent)
        let head_point = Point3::from(out.registration.pose.translation.vector);
        if let Some((pt, pc)) = self.prev_est {
            let dt = t - pt;
            self.est_speed =
                if dt > 0.0 && !out.held { (head_point - pc).norm() / dt } else { 0.0 };
        }
        if !out.held {
            self.prev_est = Some((t, head_point));
            self.last_fresh = Some((t, out.mouth.clone()));
        }
        Ok((out.mouth, out.held))
    }
}

struct PendingWindow {
    wrench: Vec<[f64; WRENCH_CHANNELS]>,
    start_snapshot: KeypointSnapshot,
    label_truth: InteractionLabel,
}

/// Runs one closed-loop episode. `fsm` carries awareness and any learned
/// preferred location in; the final FSM is returned with the trace.
pub fn run_episode(
    template: &HeadTemplate,
    scenario: &Scenario,
    profile: &ParticipantProfile,
    mut fsm: TransferFsm,
    mode: PerceptionMode,
    source: &EventSource,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<(EpisodeTrace, TransferFsm)> {
    scenario.validate()?;
    profile.validate()?;
    let mut goal_params = AdmittanceParams::goal_default();
    let mut force_params = AdmittanceParams::force_default();
    for i in 0..3 {
        goal_params.max_speed[i] = cfg.max_speed_mm_s;
        force_params.max_speed[i] = cfg.max_speed_mm_s;
    }
    let feat_cfg = FeatureConfig::default();

    let cameras = default_rig();
    let occ = OcclusionConfig {
        utensil_masks: vec![None; cameras.len()],
        keypoint_dropout_prob: 0.01,
        keypoint_noise_sigma_outside_px: 0.3,
        keypoint_noise_sigma_inside_px: 0.3,
        depth_noise_sigma_outside_mm: 0.5,
        depth_noise_sigma_inside_mm: 0.5,
        depth_outlier_prob: 0.0,
        depth_outlier_magnitude_mm: 0.0,
    };
    let reg_cfg = RegistrationConfig::default();
    // personalization assumed done: the tracker knows this participant's
    // shape and expression coefficients
    let tracker_params = HeadParams {
        shape: profile.shape.clone(),
        expression: profile.expression.clone(),
        jaw_angle: 0.0,
        pose: Iso3::identity(),
    };
    let tracker = MouthTracker::new(
        template.clone(),
        tracker_params,
        cameras.clone(),
        reg_cfg,
        DEFAULT_OPEN_THRESHOLD_MM,
    );
    let mut perception = Perception {
        tracker,
        cameras,
        occ,
        frozen: None,
        mode,
        prev_est: None,
        est_speed: 0.0,
        last_fresh: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe915_0de5);
    let kp_noise = Normal::new(0.0, cfg.keypoint_noise_mm).unwrap();
    let w_noise = Normal::new(0.0, cfg.wrench_noise_n).unwrap();

    // initial true mouth fixes the robot's start/retract pose
    let head0 = head_at(scenario, profile, 0.0);
    let lm0 = synthesize(template, &head0)?;
    let mouth0 = mouth_state(&lm0, template, DEFAULT_OPEN_THRESHOLD_MM, 0.0)?;
    let start_pose = Iso3::from_parts(
        Translation3::from((mouth0.center() + cfg.standoff_mm * mouth0.outward_normal()).coords),
        mouth0.frame.rotation,
    );
    let mut robot = EndEffectorState::at_rest(start_pose);

    let n_ticks = (scenario.duration_s / cfg.dt_s).round() as usize;
    let mut ticks: Vec<TickLog> = Vec::with_capacity(n_ticks);
    let mut prev_est_open: Option<bool> = None;
    let mut anchor_mouth: Option<Point3<f64>> = None;
    let mut active_contact_event: Option<usize> = None;
    let mut pending: Option<PendingWindow> = None;
    let mut oracle_due: Option<(f64, InteractionLabel)> = None;
    let mut in_contact = false;
    let mut quiet_since = 0.0;
    let mut spasm_fast_ticks = 0usize;
    let mut spasm_event_sent = false;
    let mut subside_quiet_s = 0.0;
    let mut prev_tip = Point3::from(robot.pose.translation.vector);

    let noisy_snapshot = |landmarks: &[Point3<f64>],
                          tip: Point3<f64>,
                          t: f64,
                          rng: &mut ChaCha8Rng|
     -> Result<KeypointSnapshot> {
        let pts: Vec<Point3<f64>> = landmarks
            .iter()
            .map(|p| {
                Point3::new(
                    p.x + kp_noise.sample(rng),
                    p.y + kp_noise.sample(rng),
                    p.z + kp_noise.sample(rng),
                )
            })
            .collect();
        let mouth = mouth_state(&pts, template, DEFAULT_OPEN_THRESHOLD_MM, t)?;
        Ok(KeypointSnapshot { keypoints_2d: vec![], keypoints_3d: pts, mouth, utensil_tip: tip })
    };

    for k in 0..n_ticks {
        let t = (k + 1) as f64 * cfg.dt_s;
        let head = head_at(scenario, profile, t);
        let landmarks = synthesize(template, &head)?;
        let mouth_true = mouth_state(&landmarks, template, DEFAULT_OPEN_THRESHOLD_MM, t)?;

        // true mouth speed for the blur rule
        let head_prev = head_at(scenario, profile, t - cfg.dt_s);
        let lm_prev = synthesize(template, &head_prev)?;
        // head translation speed from a jaw-independent landmark (nose tip):
        // lip articulation alone must not count as head motion
        let head_speed = (landmarks[NOSE_LANDMARK] - lm_prev[NOSE_LANDMARK]).norm() / cfg.dt_s;

        let tip = Point3::from(robot.pose.translation.vector);
        let engaged =
            (tip - mouth_true.center()).norm() < cfg.contact.engage_radius_mm + cfg.contact.falloff_mm;
        let blur = engaged && head_speed > cfg.blur_speed_mm_s;
        let (mouth_est, held) = perception
            .observe(&landmarks, blur, t, seed ^ (k as u64) << 1)
            .map_err(|e| Error::Scenario(format!("perception failed at t = {t:.2}: {e}")))?;
        if perception.mode == PerceptionMode::OneTime
            && perception.frozen.is_none()
            && mouth_est.open
        {
            perception.frozen = Some(mouth_est.clone());
        }

        // scripted contact activation: grip anchors at event onset
        let mut contact_active = None;
        for (i, e) in scenario.events.iter().enumerate() {
            if e.kind.label().is_some() && t >= e.t && t <= e.t + e.duration_s + cfg.contact.release_s
            {
                contact_active = Some(i);
            }
        }
        if contact_active != active_contact_event {
            anchor_mouth = None;
            if let Some(i) = contact_active {
                // the mouth can only grip a utensil that is actually inside
                // it when the event starts; a spasm with the utensil still on
                // approach exerts no force on it
                let inside = (tip - mouth_true.center()).norm() < cfg.contact.engage_radius_mm;
                if inside
                    && matches!(
                        scenario.events[i].kind,
                        ScriptEventKind::Spasm { .. } | ScriptEventKind::Manipulate { .. }
                    )
                {
                    anchor_mouth = Some(mouth_true.frame.inverse() * tip);
                }
            }
            active_contact_event = contact_active;
        }

        // wrench at 1 kHz substeps along the tip's last-tick path
        let mut wrench_sub = Vec::with_capacity(WRENCH_SUBSTEPS);
        let mut wrench_tick = [0.0; WRENCH_CHANNELS];
        for s in 0..WRENCH_SUBSTEPS {
            let alpha = (s + 1) as f64 / WRENCH_SUBSTEPS as f64;
            let ts = t - cfg.dt_s + alpha * cfg.dt_s;
            let tip_s = prev_tip + (tip - prev_tip) * alpha;
            let head_s = head_at(scenario, profile, ts);
            let lm_s = synthesize(template, &head_s)?;
            let mouth_s = mouth_state(&lm_s, template, DEFAULT_OPEN_THRESHOLD_MM, ts)?;
            let mut w =
                contact_wrench(&cfg.contact, scenario, &mouth_s, tip_s, anchor_mouth, ts);
            for c in 0..WRENCH_CHANNELS {
                let scale = if c < 3 { 1.0 } else { 10.0 };
                w[c] += w_noise.sample(&mut rng) * scale;
            }
            wrench_sub.push(w);
        }
        wrench_tick.copy_from_slice(wrench_sub.last().unwrap());
        let force_norm =
            (wrench_tick[0].powi(2) + wrench_tick[1].powi(2) + wrench_tick[2].powi(2)).sqrt();
        robot.wrench_measured = wrench_tick;
        robot.time = t;

        // ----- event detection ---------------------------------------------
        let mut events: Vec<ControlEvent> = Vec::new();
        let classification_pending = pending.is_some() || oracle_due.is_some();

        // mouth open/close transitions from the estimated pose
        if let Some(prev) = prev_est_open {
            if mouth_est.open && !prev {
                events.push(ControlEvent::MouthOpened);
            }
            if !mouth_est.open && prev && !classification_pending && !in_contact {
                events.push(ControlEvent::MouthClosed);
            }
        } else if mouth_est.open {
            events.push(ControlEvent::MouthOpened);
        }
        prev_est_open = Some(mouth_est.open);

        // outside-mouth spasm detector on estimated motion
        if !engaged && perception.est_speed > cfg.spasm_detect_mm_s {
            spasm_fast_ticks += 1;
        } else {
            spasm_fast_ticks = 0;
        }
        if spasm_fast_ticks >= 2 && !spasm_event_sent {
            events.push(ControlEvent::Contact(coarsen(
                fsm.awareness,
                InteractionLabel::Impulsive,
            )));
            spasm_event_sent = true;
        }

        // contact onset and classification
        if !in_contact {
            if force_norm > cfg.contact.onset_threshold_n && quiet_since >= 0.05 {
                in_contact = true;
                let label = active_contact_event
                    .map(|i| scenario.events[i].kind.label().unwrap())
                    .unwrap_or(InteractionLabel::Incidental);
                match source {
                    EventSource::Oracle => {
                        oracle_due = Some((t + cfg.dt_s, label));
                    }
                    EventSource::Classifier(_) => {
                        pending = Some(PendingWindow {
                            wrench: wrench_sub.clone(),
                            start_snapshot: noisy_snapshot(&landmarks, tip, t, &mut rng)?,
                            label_truth: label,
                        });
                    }
                }
            } else if force_norm <= cfg.contact.onset_threshold_n {
                quiet_since += cfg.dt_s;
            }
        } else {
            if let Some(p) = &mut pending {
                p.wrench.extend(wrench_sub.iter());
            }
            if force_norm < cfg.contact.onset_threshold_n {
                in_contact = false;
                quiet_since = 0.0;
            }
        }
        if let Some((due, label)) = oracle_due {
            if t >= due {
                events.push(ControlEvent::Contact(coarsen(fsm.awareness, label)));
                oracle_due = None;
            }
        }
        let window_len = (cfg.classify_latency_s * 1000.0).round() as usize;
        if pending.as_ref().is_some_and(|p| p.wrench.len() >= window_len) {
            let p = pending.take().unwrap();
            if let EventSource::Classifier(model) = source {
                let window = InteractionWindow {
                    wrench: p.wrench[..window_len].to_vec(),
                    rate_hz: 1000.0,
                    visual_start: Some(p.start_snapshot),
                    visual_end: Some(noisy_snapshot(&landmarks, tip, t, &mut rng)?),
                };
                let fv = extract(&window, &feat_cfg)?;
                let (label, _) = model.predict(&fv)?;
                let _ = p.label_truth;
                events.push(ControlEvent::Contact(coarsen(fsm.awareness, label)));
            }
        }

        // subsided detection while complying
        if matches!(fsm.state, FsmState::ComplyImpulse | FsmState::ComplyManipulate) {
            if force_norm < cfg.fsm.subside_force_n {
                subside_quiet_s += cfg.dt_s;
                if subside_quiet_s >= cfg.fsm.subside_dwell_s {
                    events.push(ControlEvent::ImpulseSubsided);
                    subside_quiet_s = 0.0;
                }
            } else {
                subside_quiet_s = 0.0;
            }
        } else {
            subside_quiet_s = 0.0;
        }

        // goal reached
        let action_now = fsm.action();
        let target = resolve_target(&fsm, action_now, &mouth_est, &start_pose, cfg);
        if let Some(goal) = &target {
            let dist = (goal.translation.vector - robot.pose.translation.vector).norm();
            let speed =
                (robot.twist[0].powi(2) + robot.twist[1].powi(2) + robot.twist[2].powi(2)).sqrt();
            if dist < cfg.goal_reached_mm && speed < cfg.goal_reached_speed {
                if matches!(fsm.state, FsmState::Approach | FsmState::Retract) {
                    events.push(ControlEvent::GoalReached);
                }
            }
        }

        // ----- FSM + control ------------------------------------------------
        let mut logged_event = None;
        for ev in events {
            let ctx = FsmContext {
                tip_in_mouth: Some(mouth_est.frame.inverse() * tip),
            };
            fsm.step(ev, &ctx);
            logged_event = Some(ev);
        }
        let action = fsm.action();
        let target = resolve_target(&fsm, action, &mouth_est, &start_pose, cfg);
        let cmd = match action {
            ControlAction::Force => force_step(&robot, &force_params, cfg.dt_s, 0.2)?,
            ControlAction::Hold => [0.0; 6],
            _ => {
                let goal = target.unwrap_or(start_pose);
                goal_step(&robot, &goal, &goal_params, cfg.dt_s)?
            }
        };
        robot.twist = cmd;
        prev_tip = tip;
        robot.pose = apply_twist(&robot.pose, &cmd, cfg.dt_s);

        ticks.push(TickLog {
            t,
            tip: [tip.x, tip.y, tip.z],
            tip_mouth: (mouth_true.frame.inverse() * tip).coords.into(),
            true_center: mouth_true.center().coords.into(),
            est_center: mouth_est.center().coords.into(),
            est_open: mouth_est.open,
            true_open: mouth_true.open,
            held,
            force_n: force_norm,
            wrench: wrench_tick,
            state: fsm.state,
            action,
            event: logged_event,
        });
    }

    let summary = summarize(&ticks, scenario, cfg)?;
    Ok((EpisodeTrace { ticks, summary }, fsm))
}

fn resolve_target(
    fsm: &TransferFsm,
    action: ControlAction,
    mouth_est: &MouthPose,
    start_pose: &Iso3,
    cfg: &EpisodeConfig,
) -> Option<Iso3> {
    match action {
        ControlAction::GoalMouth => {
            let point = if fsm.awareness == Awareness::OutsideMouth {
                return Some(outside_mouth_policy(mouth_est));
            } else {
                fsm.preferred_location().unwrap_or_else(Point3::origin)
            };
            let world = mouth_est.frame * point;
            Some(Iso3::from_parts(Translation3::from(world.coords), start_pose.rotation))
        }
        ControlAction::GoalBackoff => {
            let world = mouth_est.center()
                + (cfg.fsm.backoff_mm + cfg.contact.engage_radius_mm)
                    * mouth_est.outward_normal();
            Some(Iso3::from_parts(Translation3::from(world.coords), start_pose.rotation))
        }
        ControlAction::GoalRetract => Some(*start_pose),
        ControlAction::Force | ControlAction::Hold => None,
    }
}

/// Recomputes the episode summary from the per-tick log (pure function; the
/// runner's summary must match).
pub fn summarize(
    ticks: &[TickLog],
    scenario: &Scenario,
    cfg: &EpisodeConfig,
) -> Result<EpisodeSummary> {
    if ticks.is_empty() {
        return Err(Error::Scenario("empty episode".into()));
    }
    let last = ticks.last().unwrap();
    let terminal = {
        let d: Vector3<f64> = Vector3::new(
            last.tip[0] - last.true_center[0],
            last.tip[1] - last.true_center[1],
            last.tip[2] - last.true_center[2],
        );
        d.norm()
    };
    let max_force = ticks.iter().map(|k| k.force_n).fold(0.0, f64::max);

    let speak = scenario
        .events
        .iter()
        .find(|e| matches!(e.kind, ScriptEventKind::Speak { .. }));
    let paused_closed_fraction = speak.map(|e| {
        let closed: Vec<&TickLog> = ticks
            .iter()
            .filter(|k| k.t >= e.t && k.t <= e.t + e.duration_s && !k.true_open)
            .collect();
        if closed.is_empty() {
            return 0.0;
        }
        closed.iter().filter(|k| k.state == FsmState::Paused).count() as f64
            / closed.len() as f64
    });

    let spasm = scenario
        .events
        .iter()
        .find(|e| matches!(e.kind, ScriptEventKind::Spasm { .. }));
    let (retract_latency_s, state_changed_during_spasm, max_force_impulse_n) =
        if let Some(e) = spasm {
            let latency = ticks
                .iter()
                .find(|k| k.t >= e.t && k.state == FsmState::Retract)
                .map(|k| k.t - e.t);
            let window_end = e.t + e.duration_s + cfg.contact.release_s;
            let state_at = |t: f64| {
                ticks
                    .iter()
                    .take_while(|k| k.t <= t)
                    .last()
                    .map(|k| k.state)
            };
            let changed = ticks
                .iter()
                .filter(|k| k.t >= e.t && k.t <= window_end)
                .any(|k| Some(k.state) != state_at(e.t));
            let maxf = ticks
                .iter()
                .filter(|k| k.t >= e.t && k.t <= window_end)
                .map(|k| k.force_n)
                .fold(0.0, f64::max);
            (latency, Some(changed), Some(maxf))
        } else {
            (None, None, None)
        };

    let manip = scenario
        .events
        .iter()
        .find(|e| matches!(e.kind, ScriptEventKind::Manipulate { .. }));
    let mean_force_manipulation_n = manip.map(|e| {
        let inside: Vec<f64> = ticks
            .iter()
            .filter(|k| k.t >= e.t && k.t <= e.t + e.duration_s)
            .map(|k| k.force_n)
            .collect();
        inside.iter().sum::<f64>() / inside.len().max(1) as f64
    });

    let first_contact = scenario.events.iter().find(|e| e.kind.label().is_some());
    let placement_in_mouth_mm = first_contact.and_then(|e| {
        ticks
            .iter()
            .take_while(|k| k.t < e.t)
            .last()
            .map(|k| k.tip_mouth)
    });

    let bite = scenario
        .events
        .iter()
        .find(|e| matches!(e.kind, ScriptEventKind::Bite { .. }));
    let bite_retracted = bite.map(|e| {
        ticks
            .iter()
            .filter(|k| k.t >= e.t && k.t <= e.t + 0.5)
            .any(|k| matches!(k.state, FsmState::Retract | FsmState::Done))
    });

    let retracted_after_first_contact = first_contact.map(|e| {
        ticks
            .iter()
            .filter(|k| k.t >= e.t)
            .any(|k| matches!(k.state, FsmState::Retract | FsmState::Done))
    });

    Ok(EpisodeSummary {
        terminal_mouth_error_mm: terminal,
        max_force_n: max_force,
        paused_closed_fraction,
        retract_latency_s,
        state_changed_during_spasm,
        max_force_impulse_n,
        mean_force_manipulation_n,
        placement_in_mouth_mm,
        bite_retracted,
        retracted_after_first_contact,
        final_state: last.state,
    })
}

/// CSV rows for the per-tick log.
pub fn trace_to_csv(trace: &EpisodeTrace) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "t", "tip_x", "tip_y", "tip_z", "tip_mouth_x", "tip_mouth_y", "tip_mouth_z",
        "true_cx", "true_cy", "true_cz", "est_cx", "est_cy",
        "est_cz", "est_open", "true_open", "held", "force_n", "fx", "fy", "fz", "tx", "ty",
        "tz", "state", "action", "event",
    ])
    .map_err(|e| Error::Config(e.to_string()))?;
    for k in &trace.ticks {
        let row = vec![
            format!("{:.4}", k.t),
            format!("{:.4}", k.tip[0]),
            format!("{:.4}", k.tip[1]),
            format!("{:.4}", k.tip[2]),
            format!("{:.4}", k.tip_mouth[0]),
            format!("{:.4}", k.tip_mouth[1]),
            format!("{:.4}", k.tip_mouth[2]),
            format!("{:.4}", k.true_center[0]),
            format!("{:.4}", k.true_center[1]),
            format!("{:.4}", k.true_center[2]),
            format!("{:.4}", k.est_center[0]),
            format!("{:.4}", k.est_center[1]),
            format!("{:.4}", k.est_center[2]),
            format!("{}", k.est_open),
            format!("{}", k.true_open),
            format!("{}", k.held),
            format!("{:.4}", k.force_n),
            format!("{:.4}", k.wrench[0]),
            format!("{:.4}", k.wrench[1]),
            format!("{:.4}", k.wrench[2]),
            format!("{:.4}", k.wrench[3]),
            format!("{:.4}", k.wrench[4]),
            format!("{:.4}", k.wrench[5]),
            format!("{:?}", k.state),
            format!("{:?}", k.action),
            k.event.map(|e| format!("{e:?}")).unwrap_or_default(),
        ];
        w.write_record(&row).map_err(|e| Error::Config(e.to_string()))?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmodel::default_template;

    fn profile() -> ParticipantProfile {
        gen::draw_profiles(&default_template(), 1, 0).remove(0)
    }

    fn run(
        kind: ScenarioKind,
        awareness: Awareness,
        mode: PerceptionMode,
        seed: u64,
    ) -> (EpisodeTrace, TransferFsm) {
        let template = default_template();
        let scenario = Scenario::canonical(kind, seed);
        let fsm = TransferFsm::new(awareness, FsmConfig::default());
        run_episode(
            &template,
            &scenario,
            &profile(),
            fsm,
            mode,
            &EventSource::Oracle,
            &EpisodeConfig::default(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn scenario_roundtrip_text() {
        for kind in [
            ScenarioKind::Static,
            ScenarioKind::S1Turn,
            ScenarioKind::S2Speak,
            ScenarioKind::S3Spasm,
            ScenarioKind::Feeding1Manipulate,
            ScenarioKind::Feeding2Impulse,
        ] {
            let s = Scenario::canonical(kind, 3);
            let text = write_scenario(&s);
            let back = read_scenario(&text).unwrap();
            assert_eq!(s, back);
        }
    }

    #[test]
    fn scenario_rejects_unordered_events() {
        let mut s = Scenario::canonical(ScenarioKind::Feeding1Manipulate, 0);
        s.events[1].t = s.events[0].t;
        assert!(s.validate().is_err());
    }

    #[test]
    fn contact_is_continuous_across_the_boundary() {
        let template = default_template();
        let p = profile();
        let scenario = Scenario::canonical(ScenarioKind::Static, 1);
        let cfg = ContactConfig::default();
        // straight-line exit during the bite, 80 mm/s at 100 Hz
        let t = 2.2;
        let head = head_at(&scenario, &p, t);
        let mouth = mouth_state(
            &synthesize(&template, &head).unwrap(),
            &template,
            DEFAULT_OPEN_THRESHOLD_MM,
            t,
        )
        .unwrap();
        let mut prev: Option<f64> = None;
        for k in 0..80 {
            let d = k as f64 * 0.8;
            let tip = mouth.center() + d * mouth.outward_normal();
            let w = contact_wrench(&cfg, &scenario, &mouth, tip, None, t);
            let f = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
            if let Some(pf) = prev {
                assert!((f - pf).abs() < 1.0, "force jump {} -> {}", pf, f);
            }
            prev = Some(f);
        }
    }

    #[test]
    fn static_bite_retracts() {
        let (trace, _) = run(ScenarioKind::Static, Awareness::A, PerceptionMode::RealTime, 4);
        assert_eq!(trace.summary.bite_retracted, Some(true));
        assert_eq!(trace.summary.final_state, FsmState::Done);
    }

    #[test]
    fn s1_realtime_tracks_onetime_does_not() {
        for seed in 0..3 {
            let (rt, _) = run(ScenarioKind::S1Turn, Awareness::A, PerceptionMode::RealTime, seed);
            let (ot, _) = run(ScenarioKind::S1Turn, Awareness::A, PerceptionMode::OneTime, seed);
            assert!(rt.summary.terminal_mouth_error_mm < 5.0, "rt err {}", rt.summary.terminal_mouth_error_mm);
            assert!(ot.summary.terminal_mouth_error_mm > 30.0, "ot err {}", ot.summary.terminal_mouth_error_mm);
        }
    }

    #[test]
    fn s2_realtime_pauses_onetime_does_not() {
        let (rt, _) = run(ScenarioKind::S2Speak, Awareness::A, PerceptionMode::RealTime, 2);
        let (ot, _) = run(ScenarioKind::S2Speak, Awareness::A, PerceptionMode::OneTime, 2);
        assert!(rt.summary.paused_closed_fraction.unwrap() >= 0.9, "paused {}", rt.summary.paused_closed_fraction.unwrap());
        assert_eq!(ot.summary.paused_closed_fraction.unwrap(), 0.0);
    }

    #[test]
    fn s3_realtime_retracts_quickly_onetime_unmoved() {
        for seed in 0..3 {
            let (rt, _) = run(ScenarioKind::S3Spasm, Awareness::A, PerceptionMode::RealTime, seed);
            let (ot, _) = run(ScenarioKind::S3Spasm, Awareness::A, PerceptionMode::OneTime, seed);
            let lat = rt.summary.retract_latency_s.expect("RealTime should retract");
            assert!(lat <= 0.1, "latency {lat}");
            assert_eq!(ot.summary.state_changed_during_spasm, Some(false));
        }
    }

    #[test]
    fn feeding1_teaches_preferred_location_under_a() {
        let (trace, fsm) =
            run(ScenarioKind::Feeding1Manipulate, Awareness::A, PerceptionMode::RealTime, 6);
        let p = fsm.preferred_location().expect("A should learn a preferred location");
        assert!(p.x > 6.0, "learned location {p:?}");
        assert_eq!(trace.summary.final_state, FsmState::Done);
        // B must not learn
        let (_, fsm_b) =
            run(ScenarioKind::Feeding1Manipulate, Awareness::B, PerceptionMode::RealTime, 6);
        assert_eq!(fsm_b.preferred_location(), None);
    }

    #[test]
    fn feeding2_impulse_forces_order_a_below_c() {
        let mut a_max = Vec::new();
        let mut c_max = Vec::new();
        for seed in 0..5 {
            let (ta, _) =
                run(ScenarioKind::Feeding2Impulse, Awareness::A, PerceptionMode::RealTime, seed);
            let (tc, _) =
                run(ScenarioKind::Feeding2Impulse, Awareness::C, PerceptionMode::RealTime, seed);
            a_max.push(ta.summary.max_force_impulse_n.unwrap());
            c_max.push(tc.summary.max_force_impulse_n.unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&a_max) < mean(&c_max),
            "A forces {a_max:?} vs C forces {c_max:?}"
        );
    }

    #[test]
    fn summary_is_recomputable_and_deterministic() {
        let (t1, _) = run(ScenarioKind::Feeding2Impulse, Awareness::A, PerceptionMode::RealTime, 9);
        let (t2, _) = run(ScenarioKind::Feeding2Impulse, Awareness::A, PerceptionMode::RealTime, 9);
        assert_eq!(serde_json::to_string(&t1.ticks).unwrap(), serde_json::to_string(&t2.ticks).unwrap());
        let re = summarize(&t1.ticks, &Scenario::canonical(ScenarioKind::Feeding2Impulse, 9), &EpisodeConfig::default()).unwrap();
        assert_eq!(re, t1.summary);
    }

    #[test]
    fn csv_export_has_a_row_per_tick() {
        let (trace, _) = run(ScenarioKind::Static, Awareness::A, PerceptionMode::RealTime, 1);
        let csv = trace_to_csv(&trace).unwrap();
        assert_eq!(csv.lines().count(), trace.ticks.len() + 1);
    }

    #[test]
    fn trained_classifier_drives_bite_retract_in_the_loop() {
        use crate::classify::{train, ModalityChoice, ModelConfig};
        use crate::features::FeatureLayout;

        let template = default_template();
        let feat_cfg = FeatureConfig::default();
        let layout = FeatureLayout::from_config(&feat_cfg);
        let data =
            gen::gen_dataset(&template, 4, 6, &gen::GenConfig::default(), &feat_cfg, 17).unwrap();
        let model =
            train(&ModelConfig::default(), &data, &layout, ModalityChoice::All, 17).unwrap();

        let mut retracted = 0;
        let seeds = [0u64, 1, 2, 3, 4];
        for &s in &seeds {
            let scenario = Scenario::canonical(ScenarioKind::Static, s);
            let fsm = TransferFsm::new(Awareness::A, FsmConfig::default());
            let (trace, _) = run_episode(
                &template,
                &scenario,
                &profile(),
                fsm,
                PerceptionMode::RealTime,
                &EventSource::Classifier(&model),
                &EpisodeConfig::default(),
                s,
            )
            .unwrap();
            if trace.summary.bite_retracted == Some(true) {
                retracted += 1;
            }
        }
        assert!(retracted >= 4, "classifier retracted {retracted}/5 bites");
    }
}
