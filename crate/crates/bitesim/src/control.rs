//! Compliant control layer: goal-tracking and force-tracking admittance
//! controllers plus the event-driven transfer state machine with awareness
//! levels A–D and preferred-transfer-location memory.

use crate::classify::InteractionLabel;
use crate::error::{Error, Result};
use crate::geom::Iso3;
use crate::headmodel::MouthPose;
use nalgebra::{Point3, Translation3, Vector3};
use serde::{Deserialize, Serialize};

pub const CONTROL_DT_S: f64 = 0.01;

/// Free-flying end-effector state. Distances in mm, forces in N, torques in
/// N·mm; twist is [v_xyz (mm/s), ω_xyz (rad/s)].
#[derive(Debug, Clone)]
pub struct EndEffectorState {
    pub pose: Iso3,
    pub twist: [f64; 6],
    pub wrench_measured: [f64; 6],
    pub time: f64,
}

impl EndEffectorState {
    pub fn at_rest(pose: Iso3) -> EndEffectorState {
        EndEffectorState { pose, twist: [0.0; 6], wrench_measured: [0.0; 6], time: 0.0 }
    }
}

/// Diagonal admittance M·a + D·v + K·e = F. Axis order matches the twist:
/// translations then rotations. Translational mass is stored in N·s²/mm
/// (kg/1000) so mm/N units stay consistent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdmittanceParams {
    pub mass: [f64; 6],
    pub damping: [f64; 6],
    pub stiffness: [f64; 6],
    pub max_speed: [f64; 6],
    pub max_accel: [f64; 6],
}

impl AdmittanceParams {
    pub fn validate(&self) -> Result<()> {
        for i in 0..6 {
            if !(self.mass[i] > 0.0 && self.damping[i] > 0.0) {
                return Err(Error::Config(format!(
                    "mass and damping must be positive (axis {i})"
                )));
            }
            if self.stiffness[i] < 0.0 {
                return Err(Error::Config(format!("negative stiffness on axis {i}")));
            }
            if self.stiffness[i] > 0.0 {
                let zeta =
                    self.damping[i] / (2.0 * (self.stiffness[i] * self.mass[i]).sqrt());
                if zeta < 1.0 - 1e-9 {
                    return Err(Error::Config(format!(
                        "axis {i} is underdamped (zeta = {zeta:.3}); overshoot is not allowed"
                    )));
                }
            }
            if !(self.max_speed[i] > 0.0 && self.max_accel[i] > 0.0) {
                return Err(Error::Config(format!("non-positive command limit on axis {i}")));
            }
        }
        Ok(())
    }

    /// Goal-tracking gains: 2 kg / 120 N·s/m / 1800 N/m per translation axis,
    /// critically damped (ζ = 1).
    pub fn goal_default() -> AdmittanceParams {
        AdmittanceParams {
            mass: [0.002, 0.002, 0.002, 0.5, 0.5, 0.5],
            damping: [0.12, 0.12, 0.12, 32.0, 32.0, 32.0],
            stiffness: [1.8, 1.8, 1.8, 500.0, 500.0, 500.0],
            max_speed: [400.0, 400.0, 400.0, 3.0, 3.0, 3.0],
            max_accel: [4000.0, 4000.0, 4000.0, 30.0, 30.0, 30.0],
        }
    }

    /// Force-tracking gains: zero stiffness, 40 N·s/m damping.
    pub fn force_default() -> AdmittanceParams {
        AdmittanceParams {
            stiffness: [0.0; 6],
            damping: [0.04, 0.04, 0.04, 16.0, 16.0, 16.0],
            ..AdmittanceParams::goal_default()
        }
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(Error::Config(format!("control dt {dt} outside (0, 0.02] s")));
    }
    Ok(())
}

/// 6-vector pose error state ⊖ goal: translation difference plus the scaled
/// axis of R_goalᵀ·R.
pub fn pose_error(pose: &Iso3, goal: &Iso3) -> [f64; 6] {
    let t = pose.translation.vector - goal.translation.vector;
    let r = goal.rotation.inverse() * pose.rotation;
    let w = r.scaled_axis();
    [t.x, t.y, t.z, w.x, w.y, w.z]
}

fn integrate(
    state: &EndEffectorState,
    p: &AdmittanceParams,
    err: &[f64; 6],
    wrench: &[f64; 6],
    dt: f64,
) -> [f64; 6] {
    let mut cmd = [0.0; 6];
    for i in 0..6 {
        let a = (wrench[i] - p.damping[i] * state.twist[i] - p.stiffness[i] * err[i])
            / p.mass[i];
        let a = a.clamp(-p.max_accel[i], p.max_accel[i]);
        cmd[i] = (state.twist[i] + a * dt).clamp(-p.max_speed[i], p.max_speed[i]);
    }
    cmd
}

/// One semi-implicit Euler step of the goal-tracking admittance; returns the
/// commanded twist.
pub fn goal_step(
    state: &EndEffectorState,
    goal: &Iso3,
    p: &AdmittanceParams,
    dt: f64,
) -> Result<[f64; 6]> {
    check_dt(dt)?;
    p.validate()?;
    let err = pose_error(&state.pose, goal);
    Ok(integrate(state, p, &err, &state.wrench_measured, dt))
}

/// One step of the zero-stiffness force-tracking admittance. Wrench inside
/// the deadband (force norm in N, torque norm in N·mm scaled by 1000)
/// contributes no acceleration.
pub fn force_step(
    state: &EndEffectorState,
    p: &AdmittanceParams,
    dt: f64,
    force_deadband: f64,
) -> Result<[f64; 6]> {
    check_dt(dt)?;
    p.validate()?;
    if p.stiffness.iter().any(|&k| k != 0.0) {
        return Err(Error::Config("force_step requires zero stiffness".into()));
    }
    let w = &state.wrench_measured;
    let f_norm = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let t_norm = (w[3] * w[3] + w[4] * w[4] + w[5] * w[5]).sqrt();
    let mut wrench = *w;
    if f_norm < force_deadband {
        wrench[0] = 0.0;
        wrench[1] = 0.0;
        wrench[2] = 0.0;
    }
    if t_norm < force_deadband * 1000.0 {
        wrench[3] = 0.0;
        wrench[4] = 0.0;
        wrench[5] = 0.0;
    }
    Ok(integrate(state, p, &[0.0; 6], &wrench, dt))
}

/// Apply a commanded twist to a pose for dt (used by the simulator and by
/// controller tests).
pub fn apply_twist(pose: &Iso3, twist: &[f64; 6], dt: f64) -> Iso3 {
    let dv = Vector3::new(twist[0], twist[1], twist[2]) * dt;
    let dw = Vector3::new(twist[3], twist[4], twist[5]) * dt;
    let rot = nalgebra::UnitQuaternion::from_scaled_axis(dw) * pose.rotation;
    Iso3::from_parts(Translation3::from(pose.translation.vector + dv), rot)
}

/// Goal pose 50 mm outside the mouth along its outward normal (fixed-distance
/// baseline behavior).
pub fn outside_mouth_policy(mouth: &MouthPose) -> Iso3 {
    let target = mouth.center() + 50.0 * mouth.outward_normal();
    Iso3::from_parts(Translation3::from(target.coords), mouth.frame.rotation)
}

// ---------------------------------------------------------------------------
// transfer state machine

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FsmState {
    WaitMouthOpen,
    Approach,
    Inside,
    ComplyImpulse,
    ComplyManipulate,
    Retract,
    Done,
    Paused,
}

impl FsmState {
    pub const ALL: [FsmState; 8] = [
        FsmState::WaitMouthOpen,
        FsmState::Approach,
        FsmState::Inside,
        FsmState::ComplyImpulse,
        FsmState::ComplyManipulate,
        FsmState::Retract,
        FsmState::Done,
        FsmState::Paused,
    ];
}

/// Method awareness levels: A distinguishes all four contact types, B merges
/// the two in-mouth non-bite types, C only detects bites, D treats any
/// contact as a bite. OutsideMouth never enters the mouth at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Awareness {
    A,
    B,
    C,
    D,
    OutsideMouth,
}

impl Awareness {
    pub const METHODS: [Awareness; 4] =
        [Awareness::A, Awareness::B, Awareness::C, Awareness::D];
}

/// Contact label after awareness coarsening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoarseLabel {
    Incidental,
    InMouthManipulation,
    Impulsive,
    Bite,
    /// B: impulsive or manipulation, indistinguishable.
    InsideNonBite,
    /// C: anything that is not a bite.
    NonBite,
}

pub fn coarsen(awareness: Awareness, label: InteractionLabel) -> CoarseLabel {
    match awareness {
        Awareness::A => match label {
            InteractionLabel::Incidental => CoarseLabel::Incidental,
            InteractionLabel::InMouthManipulation => CoarseLabel::InMouthManipulation,
            InteractionLabel::Impulsive => CoarseLabel::Impulsive,
            InteractionLabel::Bite => CoarseLabel::Bite,
        },
        Awareness::B => match label {
            InteractionLabel::Incidental => CoarseLabel::Incidental,
            InteractionLabel::InMouthManipulation | InteractionLabel::Impulsive => {
                CoarseLabel::InsideNonBite
            }
            InteractionLabel::Bite => CoarseLabel::Bite,
        },
        Awareness::C => match label {
            InteractionLabel::Bite => CoarseLabel::Bite,
            _ => CoarseLabel::NonBite,
        },
        Awareness::D | Awareness::OutsideMouth => CoarseLabel::Bite,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ControlEvent {
    MouthOpened,
    MouthClosed,
    MouthLost,
    Contact(CoarseLabel),
    GoalReached,
    Timeout,
    ImpulseSubsided,
}

impl ControlEvent {
    /// Representative events for exhaustive transition testing.
    pub fn representatives() -> Vec<ControlEvent> {
        let mut out = vec![
            ControlEvent::MouthOpened,
            ControlEvent::MouthClosed,
            ControlEvent::MouthLost,
            ControlEvent::GoalReached,
            ControlEvent::Timeout,
            ControlEvent::ImpulseSubsided,
        ];
        for l in [
            CoarseLabel::Incidental,
            CoarseLabel::InMouthManipulation,
            CoarseLabel::Impulsive,
            CoarseLabel::Bite,
            CoarseLabel::InsideNonBite,
            CoarseLabel::NonBite,
        ] {
            out.push(ControlEvent::Contact(l));
        }
        out
    }
}

/// Where the active controller should drive the end-effector; the episode
/// loop re-expresses symbolic targets from the live mouth pose every tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlAction {
    /// Track the transfer target (preferred location if learned, else mouth
    /// center; 50 mm outside for the OutsideMouth baseline).
    GoalMouth,
    /// Back off along the approach axis after an incidental contact.
    GoalBackoff,
    /// Track the retract pose.
    GoalRetract,
    Force,
    Hold,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FsmConfig {
    pub max_reapproach: usize,
    /// Wrench norm below this, sustained for the dwell, counts as subsided.
    pub subside_force_n: f64,
    pub subside_dwell_s: f64,
    pub backoff_mm: f64,
    pub outside_distance_mm: f64,
}

impl Default for FsmConfig {
    fn default() -> Self {
        FsmConfig {
            max_reapproach: 3,
            subside_force_n: 0.5,
            subside_dwell_s: 0.2,
            backoff_mm: 20.0,
            outside_distance_mm: 50.0,
        }
    }
}

/// Per-step context the FSM may consult; the tip position feeds the
/// preferred-location memory.
#[derive(Debug, Clone, Default)]
pub struct FsmContext {
    /// Utensil tip in the current mouth frame (mm).
    pub tip_in_mouth: Option<Point3<f64>>,
}

#[derive(Debug, Clone)]
pub struct TransferFsm {
    pub state: FsmState,
    pub awareness: Awareness,
    preferred_location: Option<Point3<f64>>,
    pub config: FsmConfig,
    reapproach_count: usize,
    backing_off: bool,
    /// (state, event) pairs that were delivered but had no effect.
    pub ignored: Vec<(FsmState, ControlEvent)>,
}

impl TransferFsm {
    pub fn new(awareness: Awareness, config: FsmConfig) -> TransferFsm {
        TransferFsm {
            state: FsmState::WaitMouthOpen,
            awareness,
            preferred_location: None,
            config,
            reapproach_count: 0,
            backing_off: false,
            ignored: Vec::new(),
        }
    }

    /// The learned transfer point; readable only under awareness A.
    pub fn preferred_location(&self) -> Option<Point3<f64>> {
        if self.awareness == Awareness::A {
            self.preferred_location
        } else {
            None
        }
    }

    /// Carries learned memory into a fresh feeding (same awareness).
    pub fn next_feeding(&self) -> TransferFsm {
        let mut fsm = TransferFsm::new(self.awareness, self.config.clone());
        fsm.preferred_location = self.preferred_location;
        fsm
    }

    /// The controller the current state wants when no event fires.
    pub fn action(&self) -> ControlAction {
        match self.state {
            FsmState::WaitMouthOpen | FsmState::Done | FsmState::Paused => ControlAction::Hold,
            FsmState::Approach => {
                if self.backing_off {
                    ControlAction::GoalBackoff
                } else {
                    ControlAction::GoalMouth
                }
            }
            FsmState::Inside => ControlAction::GoalMouth,
            FsmState::ComplyImpulse | FsmState::ComplyManipulate => ControlAction::Force,
            FsmState::Retract => ControlAction::GoalRetract,
        }
    }

    /// Delivers one event. Total: impossible (state, event) pairs are logged
    /// and leave the state unchanged.
    pub fn step(&mut self, event: ControlEvent, ctx: &FsmContext) -> (FsmState, ControlAction) {
        use ControlEvent as E;
        use FsmState as S;
        let before = self.state;
        match (self.state, event) {
            (S::WaitMouthOpen, E::MouthOpened) => self.state = S::Approach,

            (S::Approach, E::MouthClosed | E::MouthLost | E::Timeout) => {
                self.state = S::Paused;
            }
            (S::Approach, E::Contact(label)) => match label {
                CoarseLabel::Incidental => {
                    self.reapproach_count += 1;
                    if self.reapproach_count > self.config.max_reapproach {
                        self.state = S::Paused;
                    } else {
                        self.backing_off = true;
                    }
                }
                CoarseLabel::Impulsive | CoarseLabel::InsideNonBite | CoarseLabel::Bite => {
                    self.state = S::Retract;
                }
                CoarseLabel::NonBite | CoarseLabel::InMouthManipulation => {
                    self.ignore(before, event);
                }
            },
            (S::Approach, E::GoalReached) => {
                if self.backing_off {
                    self.backing_off = false; // backoff point reached, re-approach
                } else {
                    self.state = S::Inside;
                }
            }

            (S::Inside, E::Contact(label)) => match label {
                CoarseLabel::Bite => self.state = S::Retract,
                CoarseLabel::Impulsive | CoarseLabel::InsideNonBite => {
                    self.state = S::ComplyImpulse;
                }
                CoarseLabel::InMouthManipulation => self.state = S::ComplyManipulate,
                CoarseLabel::NonBite | CoarseLabel::Incidental => self.ignore(before, event),
            },
            (S::Inside, E::MouthClosed | E::MouthLost) => self.state = S::Paused,
            (S::Inside, E::Timeout) => self.state = S::Retract,

            (S::ComplyImpulse, E::ImpulseSubsided) => self.state = S::Inside,
            (S::ComplyImpulse, E::Contact(CoarseLabel::Bite)) => self.state = S::Retract,

            (S::ComplyManipulate, E::ImpulseSubsided) => {
                if self.awareness == Awareness::A {
                    if let Some(tip) = ctx.tip_in_mouth {
                        self.preferred_location = Some(tip);
                    }
                }
                self.state = S::Inside;
            }
            (S::ComplyManipulate, E::Contact(CoarseLabel::Bite)) => self.state = S::Retract,

            (S::Retract, E::GoalReached) => self.state = S::Done,

            (S::Paused, E::MouthOpened) => self.state = S::Approach,

            _ => self.ignore(before, event),
        }
        (self.state, self.action())
    }

    fn ignore(&mut self, state: FsmState, event: ControlEvent) {
        self.ignored.push((state, event));
    }
}

/// One documented row of the exported transition table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub awareness: Awareness,
    pub state: FsmState,
    pub event: ControlEvent,
    pub next_state: FsmState,
    pub action: ControlAction,
    pub ignored: bool,
}

/// Enumerates every (awareness, state, event) transition from a fresh FSM
/// posed in that state; exported as a JSON audit artifact.
pub fn transition_table() -> Vec<TransitionRecord> {
    let mut rows = Vec::new();
    for awareness in [
        Awareness::A,
        Awareness::B,
        Awareness::C,
        Awareness::D,
        Awareness::OutsideMouth,
    ] {
        for state in FsmState::ALL {
            for event in ControlEvent::representatives() {
                let mut fsm = TransferFsm::new(awareness, FsmConfig::default());
                fsm.state = state;
                let (next, action) = fsm.step(event, &FsmContext::default());
                rows.push(TransitionRecord {
                    awareness,
                    state,
                    event,
                    next_state: next,
                    action,
                    ignored: !fsm.ignored.is_empty(),
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn settle_goal(offset_mm: f64, external_fx: f64, seconds: f64) -> (Vec<f64>, EndEffectorState) {
        let p = AdmittanceParams::goal_default();
        let goal = Iso3::identity();
        let mut state = EndEffectorState::at_rest(Iso3::translation(offset_mm, 0.0, 0.0));
        state.wrench_measured[0] = external_fx;
        let mut xs = Vec::new();
        let dt = CONTROL_DT_S;
        for _ in 0..(seconds / dt) as usize {
            let cmd = goal_step(&state, &goal, &p, dt).unwrap();
            state.twist = cmd;
            state.pose = apply_twist(&state.pose, &cmd, dt);
            xs.push(state.pose.translation.x);
        }
        (xs, state)
    }

    #[test]
    fn equilibrium_zero_command() {
        let p = AdmittanceParams::goal_default();
        let state = EndEffectorState::at_rest(Iso3::identity());
        let cmd = goal_step(&state, &Iso3::identity(), &p, 0.01).unwrap();
        assert_eq!(cmd, [0.0; 6]);
    }

    #[test]
    fn converges_without_overshoot() {
        let (xs, state) = settle_goal(100.0, 0.0, 2.0);
        assert!(state.pose.translation.x.abs() < 1.0, "terminal error {}", state.pose.translation.x);
        assert!(xs.iter().all(|&x| x > -1e-9), "error sign reversal: min {:?}",
            xs.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn steady_state_offset_matches_spring_balance() {
        let f = 3.0; // N along +x
        let (_, state) = settle_goal(0.0, f, 3.0);
        let expect = f / AdmittanceParams::goal_default().stiffness[0];
        assert_relative_eq!(state.pose.translation.x, expect, max_relative = 0.02);
    }

    #[test]
    fn invalid_dt_rejected() {
        let p = AdmittanceParams::goal_default();
        let state = EndEffectorState::at_rest(Iso3::identity());
        assert!(goal_step(&state, &Iso3::identity(), &p, 0.0).is_err());
        assert!(goal_step(&state, &Iso3::identity(), &p, 0.05).is_err());
    }

    #[test]
    fn underdamped_params_rejected() {
        let mut p = AdmittanceParams::goal_default();
        p.damping[0] = 0.01;
        assert!(p.validate().is_err());
    }

    #[test]
    fn force_step_requires_zero_stiffness() {
        let state = EndEffectorState::at_rest(Iso3::identity());
        let p = AdmittanceParams::goal_default();
        assert!(force_step(&state, &p, 0.01, 0.2).is_err());
    }

    #[test]
    fn force_step_decays_to_rest() {
        let p = AdmittanceParams::force_default();
        let mut state = EndEffectorState::at_rest(Iso3::identity());
        state.twist[0] = 100.0;
        for _ in 0..100 {
            state.twist = force_step(&state, &p, 0.01, 0.2).unwrap();
        }
        assert!(state.twist[0].abs() < 1e-3, "residual speed {}", state.twist[0]);
    }

    #[test]
    fn deadband_suppresses_small_wrench() {
        let p = AdmittanceParams::force_default();
        let mut state = EndEffectorState::at_rest(Iso3::identity());
        state.wrench_measured[0] = 0.15;
        let cmd = force_step(&state, &p, 0.01, 0.2).unwrap();
        assert_eq!(cmd, [0.0; 6]);
    }

    #[test]
    fn closed_loop_hand_spring_force_subsides() {
        // hand modeled as a spring: F = k_h (x_hand - x), 25 mm deflection
        // giving 5 N initially
        let k_h = 0.2; // N/mm
        let x_hand = 25.0;
        let p = AdmittanceParams::force_default();
        let mut state = EndEffectorState::at_rest(Iso3::identity());
        let dt = CONTROL_DT_S;
        let mut force = k_h * x_hand;
        for _ in 0..100 {
            state.wrench_measured = [force, 0.0, 0.0, 0.0, 0.0, 0.0];
            let cmd = force_step(&state, &p, dt, 0.2).unwrap();
            state.twist = cmd;
            state.pose = apply_twist(&state.pose, &cmd, dt);
            force = k_h * (x_hand - state.pose.translation.x);
        }
        assert!(force.abs() < 0.5, "contact force after 1 s: {force}");
    }

    #[test]
    fn compliance_never_pushes_back() {
        let p = AdmittanceParams::force_default();
        for seed in 0..20 {
            let f = [
                ((seed * 7) % 11) as f64 - 5.0,
                ((seed * 13) % 9) as f64 - 4.0,
                ((seed * 3) % 7) as f64 - 3.0,
            ];
            let mut state = EndEffectorState::at_rest(Iso3::identity());
            state.wrench_measured = [f[0], f[1], f[2], 0.0, 0.0, 0.0];
            for _ in 0..100 {
                let cmd = force_step(&state, &p, 0.01, 0.0).unwrap();
                let dot = cmd[0] * f[0] + cmd[1] * f[1] + cmd[2] * f[2];
                assert!(dot >= -1e-9, "push-back: {dot}");
                state.twist = cmd;
            }
        }
    }

    #[test]
    fn outside_policy_is_50mm_along_normal() {
        let template = crate::headmodel::default_template();
        let params = crate::headmodel::HeadParams::neutral(&template);
        let verts = crate::headmodel::synthesize(&template, &params).unwrap();
        let mouth = crate::headmodel::mouth_state(
            &verts,
            &template,
            crate::headmodel::DEFAULT_OPEN_THRESHOLD_MM,
            0.0,
        )
        .unwrap();
        let goal = outside_mouth_policy(&mouth);
        let d = (goal.translation.vector - mouth.center().coords).norm();
        assert_relative_eq!(d, 50.0, epsilon = 1e-6);
        // moves rigidly with the mouth frame
        let shift = Iso3::translation(7.0, -3.0, 11.0);
        let mut mouth2 = mouth.clone();
        mouth2.frame = shift * mouth.frame;
        let goal2 = outside_mouth_policy(&mouth2);
        let expect = shift * Point3::from(goal.translation.vector);
        assert_relative_eq!((goal2.translation.vector - expect.coords).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn fsm_is_total_over_all_pairs() {
        let rows = transition_table();
        assert_eq!(rows.len(), 5 * FsmState::ALL.len() * ControlEvent::representatives().len());
        for r in &rows {
            // Done never leaves; ignored pairs keep their state
            if r.state == FsmState::Done {
                assert_eq!(r.next_state, FsmState::Done);
            }
            if r.ignored {
                assert_eq!(r.next_state, r.state);
            }
        }
    }

    #[test]
    fn happy_path_feeding() {
        let mut fsm = TransferFsm::new(Awareness::A, FsmConfig::default());
        let ctx = FsmContext::default();
        assert_eq!(fsm.action(), ControlAction::Hold);
        let (s, a) = fsm.step(ControlEvent::MouthOpened, &ctx);
        assert_eq!((s, a), (FsmState::Approach, ControlAction::GoalMouth));
        let (s, _) = fsm.step(ControlEvent::GoalReached, &ctx);
        assert_eq!(s, FsmState::Inside);
        let (s, a) = fsm.step(ControlEvent::Contact(CoarseLabel::Bite), &ctx);
        assert_eq!((s, a), (FsmState::Retract, ControlAction::GoalRetract));
        let (s, _) = fsm.step(ControlEvent::GoalReached, &ctx);
        assert_eq!(s, FsmState::Done);
    }

    #[test]
    fn awareness_d_retracts_on_any_contact() {
        let mut fsm = TransferFsm::new(Awareness::D, FsmConfig::default());
        fsm.state = FsmState::Inside;
        let label = coarsen(Awareness::D, InteractionLabel::InMouthManipulation);
        assert_eq!(label, CoarseLabel::Bite);
        let (s, _) = fsm.step(ControlEvent::Contact(label), &FsmContext::default());
        assert_eq!(s, FsmState::Retract);
    }

    #[test]
    fn awareness_c_stays_on_goal_during_impulse() {
        let mut fsm = TransferFsm::new(Awareness::C, FsmConfig::default());
        fsm.state = FsmState::Inside;
        let label = coarsen(Awareness::C, InteractionLabel::Impulsive);
        assert_eq!(label, CoarseLabel::NonBite);
        let (s, a) = fsm.step(ControlEvent::Contact(label), &FsmContext::default());
        assert_eq!((s, a), (FsmState::Inside, ControlAction::GoalMouth));
    }

    #[test]
    fn preferred_location_learned_only_under_a() {
        let tip = Point3::new(12.0, 0.0, 0.0);
        for awareness in [Awareness::A, Awareness::B] {
            let mut fsm = TransferFsm::new(awareness, FsmConfig::default());
            fsm.state = FsmState::Inside;
            let label = coarsen(awareness, InteractionLabel::InMouthManipulation);
            fsm.step(ControlEvent::Contact(label), &FsmContext::default());
            fsm.step(ControlEvent::ImpulseSubsided, &FsmContext { tip_in_mouth: Some(tip) });
            if awareness == Awareness::A {
                assert_eq!(fsm.preferred_location(), Some(tip));
                let next = fsm.next_feeding();
                assert_eq!(next.preferred_location(), Some(tip));
            } else {
                assert_eq!(fsm.preferred_location(), None);
            }
        }
    }

    #[test]
    fn incidental_backoff_then_pause_after_retries() {
        let mut fsm = TransferFsm::new(Awareness::A, FsmConfig::default());
        fsm.state = FsmState::Approach;
        let ctx = FsmContext::default();
        for _ in 0..3 {
            let (s, a) = fsm.step(ControlEvent::Contact(CoarseLabel::Incidental), &ctx);
            assert_eq!((s, a), (FsmState::Approach, ControlAction::GoalBackoff));
            let (s, a) = fsm.step(ControlEvent::GoalReached, &ctx);
            assert_eq!((s, a), (FsmState::Approach, ControlAction::GoalMouth));
        }
        let (s, _) = fsm.step(ControlEvent::Contact(CoarseLabel::Incidental), &ctx);
        assert_eq!(s, FsmState::Paused);
    }

    #[test]
    fn pause_and_resume_on_mouth_state() {
        let mut fsm = TransferFsm::new(Awareness::A, FsmConfig::default());
        fsm.state = FsmState::Approach;
        let ctx = FsmContext::default();
        let (s, a) = fsm.step(ControlEvent::MouthClosed, &ctx);
        assert_eq!((s, a), (FsmState::Paused, ControlAction::Hold));
        let (s, a) = fsm.step(ControlEvent::MouthOpened, &ctx);
        assert_eq!((s, a), (FsmState::Approach, ControlAction::GoalMouth));
    }

    #[test]
    fn transition_table_serializes() {
        let rows = transition_table();
        let json = serde_json::to_string(&rows).unwrap();
        assert!(json.contains("WaitMouthOpen"));
    }
}
