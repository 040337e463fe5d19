//! The two ablation studies: continuous vs one-time perception across the
//! head-motion scenarios, and interaction-awareness methods A-D across two
//! consecutive feedings with matched random seeds.

use super::stats::{wilcoxon_signed_rank, WilcoxonResult};
use super::{
    run_episode, EpisodeConfig, EventSource, PerceptionMode, Scenario, ScenarioKind,
    ScriptEventKind,
};
use crate::control::{Awareness, FsmConfig, FsmState, TransferFsm};
use crate::error::{Error, Result};
use crate::headmodel::HeadTemplate;
use crate::sim::gen;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add((trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

// ---------------------------------------------------------------------------
// perception study

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptionRow {
    pub scenario: ScenarioKind,
    pub mode: PerceptionMode,
    pub trial: usize,
    pub terminal_mouth_error_mm: f64,
    pub paused_closed_fraction: Option<f64>,
    pub retract_latency_s: Option<f64>,
    pub state_changed_during_spasm: Option<bool>,
    pub max_force_n: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptionSummary {
    pub trials: usize,
    pub s1_mean_error_realtime_mm: f64,
    pub s1_mean_error_onetime_mm: f64,
    pub s2_mean_paused_realtime: f64,
    pub s2_mean_paused_onetime: f64,
    pub s3_retract_rate_realtime: f64,
    pub s3_mean_latency_realtime_s: f64,
    pub s3_onetime_state_change_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptionStudy {
    pub rows: Vec<PerceptionRow>,
    pub summary: PerceptionSummary,
}

pub fn run_perception_study(
    template: &HeadTemplate,
    trials: usize,
    seed: u64,
) -> Result<PerceptionStudy> {
    if trials == 0 {
        return Err(Error::Config("perception study needs at least one trial".into()));
    }
    let scenarios = [ScenarioKind::S1Turn, ScenarioKind::S2Speak, ScenarioKind::S3Spasm];
    let modes = [PerceptionMode::RealTime, PerceptionMode::OneTime];
    let mut jobs = Vec::new();
    for trial in 0..trials {
        for &scenario in &scenarios {
            for &mode in &modes {
                jobs.push((trial, scenario, mode));
            }
        }
    }
    let cfg = EpisodeConfig::default();
    let rows: Result<Vec<PerceptionRow>> = jobs
        .par_iter()
        .map(|&(trial, kind, mode)| {
            let s = trial_seed(seed, trial);
            let profile = gen::draw_profiles(template, 1, s)
                .into_iter()
                .next()
                .unwrap();
            let scenario = Scenario::canonical(kind, s);
            let fsm = TransferFsm::new(Awareness::A, FsmConfig::default());
            let (trace, _) = run_episode(
                template,
                &scenario,
                &profile,
                fsm,
                mode,
                &EventSource::Oracle,
                &cfg,
                s,
            )?;
            Ok(PerceptionRow {
                scenario: kind,
                mode,
                trial,
                terminal_mouth_error_mm: trace.summary.terminal_mouth_error_mm,
                paused_closed_fraction: trace.summary.paused_closed_fraction,
                retract_latency_s: trace.summary.retract_latency_s,
                state_changed_during_spasm: trace.summary.state_changed_during_spasm,
                max_force_n: trace.summary.max_force_n,
            })
        })
        .collect();
    let rows = rows?;

    let pick = |kind: ScenarioKind, mode: PerceptionMode| -> Vec<&PerceptionRow> {
        rows.iter().filter(|r| r.scenario == kind && r.mode == mode).collect()
    };
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let s1_rt = mean(pick(ScenarioKind::S1Turn, PerceptionMode::RealTime)
        .iter()
        .map(|r| r.terminal_mouth_error_mm)
        .collect());
    let s1_ot = mean(pick(ScenarioKind::S1Turn, PerceptionMode::OneTime)
        .iter()
        .map(|r| r.terminal_mouth_error_mm)
        .collect());
    let s2_rt = mean(pick(ScenarioKind::S2Speak, PerceptionMode::RealTime)
        .iter()
        .filter_map(|r| r.paused_closed_fraction)
        .collect());
    let s2_ot = mean(pick(ScenarioKind::S2Speak, PerceptionMode::OneTime)
        .iter()
        .filter_map(|r| r.paused_closed_fraction)
        .collect());
    let s3_rt = pick(ScenarioKind::S3Spasm, PerceptionMode::RealTime);
    let s3_rate = s3_rt.iter().filter(|r| r.retract_latency_s.is_some()).count() as f64
        / s3_rt.len() as f64;
    let s3_lat = mean(s3_rt.iter().filter_map(|r| r.retract_latency_s).collect());
    let s3_ot = pick(ScenarioKind::S3Spasm, PerceptionMode::OneTime);
    let s3_ot_change = s3_ot
        .iter()
        .filter(|r| r.state_changed_during_spasm == Some(true))
        .count() as f64
        / s3_ot.len() as f64;

    Ok(PerceptionStudy {
        rows,
        summary: PerceptionSummary {
            trials,
            s1_mean_error_realtime_mm: s1_rt,
            s1_mean_error_onetime_mm: s1_ot,
            s2_mean_paused_realtime: s2_rt,
            s2_mean_paused_onetime: s2_ot,
            s3_retract_rate_realtime: s3_rate,
            s3_mean_latency_realtime_s: s3_lat,
            s3_onetime_state_change_rate: s3_ot_change,
        },
    })
}

pub fn perception_csv(study: &PerceptionStudy) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(e.to_string());
    w.write_record([
        "scenario",
        "mode",
        "trial",
        "terminal_error_mm",
        "paused_closed_fraction",
        "retract_latency_s",
        "state_changed_during_spasm",
        "max_force_n",
    ])
    .map_err(err)?;
    for r in &study.rows {
        w.write_record([
            r.scenario.name().to_string(),
            format!("{:?}", r.mode).to_lowercase(),
            r.trial.to_string(),
            format!("{:.4}", r.terminal_mouth_error_mm),
            r.paused_closed_fraction.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.retract_latency_s.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.state_changed_during_spasm.map(|v| v.to_string()).unwrap_or_default(),
            format!("{:.4}", r.max_force_n),
        ])
        .map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

// ---------------------------------------------------------------------------
// methods study

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodsRow {
    pub awareness: Awareness,
    pub trial: usize,
    /// Mean |F| over the scripted manipulation window (first feeding).
    pub manipulation_mean_force_n: Option<f64>,
    /// Max |F| over the scripted impulse window (second feeding).
    pub impulse_max_force_n: Option<f64>,
    /// Distance from the utensil placement to the manipulated location just
    /// before the second feeding's first contact (mm).
    pub placement_error_mm: Option<f64>,
    pub feeding1_final: FsmState,
    pub feeding2_final: FsmState,
    /// Retract entered after the first contact, both feedings.
    pub retracted_on_contact: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodsSummary {
    pub trials: usize,
    pub mean_impulse_force_n: Vec<(Awareness, f64)>,
    pub mean_manipulation_force_n: Vec<(Awareness, f64)>,
    pub mean_placement_error_mm: Vec<(Awareness, f64)>,
    pub impulse_a_vs_c: WilcoxonResult,
    pub impulse_b_vs_c: WilcoxonResult,
    pub manipulation_a_vs_c: WilcoxonResult,
    pub manipulation_b_vs_c: WilcoxonResult,
    /// Fraction of D-trials that retracted on the first contact.
    pub d_retract_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodsStudy {
    pub rows: Vec<MethodsRow>,
    pub summary: MethodsSummary,
}

pub const METHODS: [Awareness; 4] = [Awareness::A, Awareness::B, Awareness::C, Awareness::D];

pub fn run_methods_study(
    template: &HeadTemplate,
    trials: usize,
    seed: u64,
) -> Result<MethodsStudy> {
    if trials == 0 {
        return Err(Error::Config("methods study needs at least one trial".into()));
    }
    let cfg = EpisodeConfig::default();
    let mut jobs = Vec::new();
    for trial in 0..trials {
        for &awareness in &METHODS {
            jobs.push((trial, awareness));
        }
    }
    let rows: Result<Vec<MethodsRow>> = jobs
        .par_iter()
        .map(|&(trial, awareness)| {
            let s = trial_seed(seed, trial);
            let profile = gen::draw_profiles(template, 1, s)
                .into_iter()
                .next()
                .unwrap();
            let f1 = Scenario::canonical(ScenarioKind::Feeding1Manipulate, s);
            let f2 = Scenario::canonical(ScenarioKind::Feeding2Impulse, s);
            let fsm = TransferFsm::new(awareness, FsmConfig::default());
            let (t1, fsm) = run_episode(
                template,
                &f1,
                &profile,
                fsm,
                PerceptionMode::RealTime,
                &EventSource::Oracle,
                &cfg,
                s,
            )?;
            let (t2, _) = run_episode(
                template,
                &f2,
                &profile,
                fsm.next_feeding(),
                PerceptionMode::RealTime,
                &EventSource::Oracle,
                &cfg,
                s ^ 0xfeed_0002,
            )?;
            let target = f1
                .events
                .iter()
                .find_map(|e| match &e.kind {
                    ScriptEventKind::Manipulate { offset_mouth_mm } => {
                        Some(Vector3::new(offset_mouth_mm[0], offset_mouth_mm[1], offset_mouth_mm[2]))
                    }
                    _ => None,
                })
                .unwrap_or_else(Vector3::zeros);
            let placement_error_mm = t2.summary.placement_in_mouth_mm.map(|p| {
                (Vector3::new(p[0], p[1], p[2]) - target).norm()
            });
            Ok(MethodsRow {
                awareness,
                trial,
                manipulation_mean_force_n: t1.summary.mean_force_manipulation_n,
                impulse_max_force_n: t2.summary.max_force_impulse_n,
                placement_error_mm,
                feeding1_final: t1.summary.final_state,
                feeding2_final: t2.summary.final_state,
                retracted_on_contact: t1.summary.retracted_after_first_contact == Some(true)
                    && t2.summary.retracted_after_first_contact == Some(true),
            })
        })
        .collect();
    let rows = rows?;

    let series = |a: Awareness, f: fn(&MethodsRow) -> Option<f64>| -> Vec<f64> {
        let mut v: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| r.awareness == a)
            .filter_map(|r| f(r).map(|x| (r.trial, x)))
            .collect();
        v.sort_by_key(|&(t, _)| t);
        v.into_iter().map(|(_, x)| x).collect()
    };
    let impulse = |a| series(a, |r| r.impulse_max_force_n);
    let manip = |a| series(a, |r| r.manipulation_mean_force_n);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;

    let impulse_a_vs_c = wilcoxon_signed_rank(&impulse(Awareness::A), &impulse(Awareness::C))?;
    let impulse_b_vs_c = wilcoxon_signed_rank(&impulse(Awareness::B), &impulse(Awareness::C))?;
    let manipulation_a_vs_c = wilcoxon_signed_rank(&manip(Awareness::A), &manip(Awareness::C))?;
    let manipulation_b_vs_c = wilcoxon_signed_rank(&manip(Awareness::B), &manip(Awareness::C))?;
    let d_rows: Vec<&MethodsRow> = rows.iter().filter(|r| r.awareness == Awareness::D).collect();
    let d_retract_rate =
        d_rows.iter().filter(|r| r.retracted_on_contact).count() as f64 / d_rows.len() as f64;

    Ok(MethodsStudy {
        summary: MethodsSummary {
            trials,
            mean_impulse_force_n: METHODS.iter().map(|&a| (a, mean(&impulse(a)))).collect(),
            mean_manipulation_force_n: METHODS.iter().map(|&a| (a, mean(&manip(a)))).collect(),
            mean_placement_error_mm: METHODS
                .iter()
                .map(|&a| (a, mean(&series(a, |r| r.placement_error_mm))))
                .collect(),
            impulse_a_vs_c,
            impulse_b_vs_c,
            manipulation_a_vs_c,
            manipulation_b_vs_c,
            d_retract_rate,
        },
        rows,
    })
}

pub fn methods_csv(study: &MethodsStudy) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(e.to_string());
    w.write_record([
        "awareness",
        "trial",
        "manipulation_mean_force_n",
        "impulse_max_force_n",
        "placement_error_mm",
        "feeding1_final",
        "feeding2_final",
        "retracted_on_contact",
    ])
    .map_err(err)?;
    for r in &study.rows {
        w.write_record([
            format!("{:?}", r.awareness),
            r.trial.to_string(),
            r.manipulation_mean_force_n.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.impulse_max_force_n.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.placement_error_mm.map(|v| format!("{v:.4}")).unwrap_or_default(),
            format!("{:?}", r.feeding1_final),
            format!("{:?}", r.feeding2_final),
            r.retracted_on_contact.to_string(),
        ])
        .map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

// ---------------------------------------------------------------------------
// perception benchmark: tracker vs the direct-depth baseline under occlusion

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub trial: usize,
    /// Registration-based tracker, clean single shot.
    pub tracker_clean_error_mm: f64,
    /// Registration-based tracker under mouth-region corruption.
    pub tracker_occluded_error_mm: f64,
    /// Direct depth lifting of mouth landmarks under the same corruption.
    pub baseline_occluded_error_mm: f64,
}

/// Per-trial mouth-center errors of the model-registration tracker and the
/// direct-depth baseline. `occlusion` in [0, 1] scales the probability that a
/// mouth-region depth reading is replaced by a gross outlier.
pub fn perception_bench(
    template: &HeadTemplate,
    occlusion: f64,
    trials: usize,
    seed: u64,
) -> crate::error::Result<Vec<BenchRow>> {
    use crate::headmodel::{mouth_state, synthesize, HeadParams, DEFAULT_OPEN_THRESHOLD_MM};
    use crate::perception::{
        default_rig, direct_depth_mouth_pose, mouth_region_masks, observe, MouthTracker,
        OcclusionConfig, RegistrationConfig,
    };
    use nalgebra::{Translation3, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    if !(0.0..=1.0).contains(&occlusion) {
        return Err(Error::Config(format!("occlusion {occlusion} outside [0, 1]")));
    }
    if trials == 0 {
        return Err(Error::Config("perception bench needs at least one trial".into()));
    }
    let cams = default_rig();
    let mut rows = Vec::with_capacity(trials);
    for trial in 0..trials {
        let s = trial_seed(seed, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xbe9c);
        let profile = gen::draw_profiles(template, 1, s).remove(0);
        let mut params = HeadParams {
            shape: profile.shape.clone(),
            expression: profile.expression.clone(),
            jaw_angle: rng.random_range(0.2..0.45),
            pose: nalgebra::Isometry3::from_parts(
                Translation3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                ),
                UnitQuaternion::from_euler_angles(
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                ),
            ),
        };
        let kps = synthesize(template, &params)?;
        let truth = mouth_state(&kps, template, DEFAULT_OPEN_THRESHOLD_MM, 0.0)?;

        let mut clean = OcclusionConfig::noise_free(cams.len());
        clean.keypoint_noise_sigma_outside_px = 0.3;
        clean.depth_noise_sigma_outside_mm = 1.0;
        let mut corrupt = clean.clone();
        corrupt.utensil_masks = mouth_region_masks(&kps, template, &cams, 5.0);
        corrupt.keypoint_noise_sigma_inside_px = 0.3;
        corrupt.depth_noise_sigma_inside_mm = 1.0;
        corrupt.depth_outlier_prob = occlusion;
        corrupt.depth_outlier_magnitude_mm = 300.0;

        params.jaw_angle = 0.0;
        params.pose = nalgebra::Isometry3::identity();
        let mut errs = [0.0; 2];
        for (k, occ) in [&clean, &corrupt].iter().enumerate() {
            let obs = observe(&kps, &cams, occ, 0.0, s)?;
            let mut tracker = MouthTracker::new(
                template.clone(),
                params.clone(),
                cams.clone(),
                RegistrationConfig::default(),
                DEFAULT_OPEN_THRESHOLD_MM,
            );
            let out = tracker.track(&obs)?;
            errs[k] = (out.mouth.center() - truth.center()).norm();
        }
        let obs = observe(&kps, &cams, &corrupt, 0.0, s)?;
        let baseline = direct_depth_mouth_pose(template, &obs, &cams, DEFAULT_OPEN_THRESHOLD_MM)?;
        rows.push(BenchRow {
            trial,
            tracker_clean_error_mm: errs[0],
            tracker_occluded_error_mm: errs[1],
            baseline_occluded_error_mm: (baseline.center() - truth.center()).norm(),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(e.to_string());
    w.write_record([
        "trial",
        "tracker_clean_error_mm",
        "tracker_occluded_error_mm",
        "baseline_occluded_error_mm",
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            r.trial.to_string(),
            format!("{:.4}", r.tracker_clean_error_mm),
            format!("{:.4}", r.tracker_occluded_error_mm),
            format!("{:.4}", r.baseline_occluded_error_mm),
        ])
        .map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmodel::default_template;

    #[test]
    fn perception_study_separates_modes() {
        let study = run_perception_study(&default_template(), 3, 7).unwrap();
        assert_eq!(study.rows.len(), 3 * 3 * 2);
        let s = &study.summary;
        assert!(s.s1_mean_error_realtime_mm < 5.0, "{s:?}");
        assert!(s.s1_mean_error_onetime_mm > 30.0, "{s:?}");
        assert!(s.s2_mean_paused_realtime >= 0.9, "{s:?}");
        assert_eq!(s.s2_mean_paused_onetime, 0.0);
        assert_eq!(s.s3_retract_rate_realtime, 1.0);
        assert!(s.s3_mean_latency_realtime_s <= 0.1, "{s:?}");
        assert_eq!(s.s3_onetime_state_change_rate, 0.0);
    }

    #[test]
    fn methods_study_orders_forces_and_learns_placement() {
        let study = run_methods_study(&default_template(), 6, 11).unwrap();
        let mean = |a: Awareness, v: &[(Awareness, f64)]| {
            v.iter().find(|(x, _)| *x == a).unwrap().1
        };
        let s = &study.summary;
        assert!(
            mean(Awareness::A, &s.mean_impulse_force_n)
                < mean(Awareness::C, &s.mean_impulse_force_n),
            "{s:?}"
        );
        assert!(
            mean(Awareness::A, &s.mean_manipulation_force_n)
                < mean(Awareness::C, &s.mean_manipulation_force_n),
            "{s:?}"
        );
        assert!(mean(Awareness::A, &s.mean_placement_error_mm) < 3.0, "{s:?}");
        assert!(mean(Awareness::C, &s.mean_placement_error_mm) > 6.0, "{s:?}");
        assert_eq!(s.d_retract_rate, 1.0, "{s:?}");
    }

    #[test]
    fn bench_tracker_beats_direct_depth_under_occlusion() {
        let rows = perception_bench(&default_template(), 1.0, 5, 4).unwrap();
        for r in &rows {
            assert!(
                r.tracker_occluded_error_mm <= 2.0 * r.tracker_clean_error_mm.max(0.3),
                "{r:?}"
            );
            assert!(
                r.baseline_occluded_error_mm >= 10.0 * r.tracker_occluded_error_mm.max(0.3),
                "{r:?}"
            );
        }
        let csv = bench_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn studies_are_deterministic() {
        let a = run_perception_study(&default_template(), 2, 3).unwrap();
        let b = run_perception_study(&default_template(), 2, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&a.rows).unwrap(),
            serde_json::to_string(&b.rows).unwrap()
        );
        let csv_a = perception_csv(&a).unwrap();
        let csv_b = perception_csv(&b).unwrap();
        assert_eq!(csv_a, csv_b);
    }
}
