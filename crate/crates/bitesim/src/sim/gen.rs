//! Parametric generators for the four interaction types and the balanced
//! synthetic dataset (6 participants × 128 windows per label by default).

use crate::classify::{InteractionLabel, LabeledDataset, Sample};
use crate::error::Result;
use crate::features::{
    extract, FeatureConfig, InteractionWindow, KeypointSnapshot, WRENCH_CHANNELS,
};
use crate::geom::Iso3;
use crate::headmodel::{
    mouth_state, synthesize, HeadParams, HeadTemplate, DEFAULT_OPEN_THRESHOLD_MM,
};
use nalgebra::{Point3, Translation3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Trait offsets making participants individually distinct; scales multiply
/// the nominal force ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub id: usize,
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub bite_force_scale: f64,
    pub impulse_scale: f64,
    /// Preferred impulse direction component, mixed into the random draw.
    pub impulse_dir_bias: [f64; 3],
    pub manipulation_strength: f64,
    /// Lip-vs-teeth bite style weight in [0, 1]; teeth share is 1 − lip.
    pub bite_style_lip: f64,
    pub spasm_rate_hz: f64,
}

impl ParticipantProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.bite_force_scale > 0.0
            && self.impulse_scale > 0.0
            && self.manipulation_strength > 0.0)
        {
            return Err(crate::error::Error::Config(
                "profile trait scales must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bite_style_lip) {
            return Err(crate::error::Error::Config(
                "bite_style_lip must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

pub fn draw_profiles(template: &HeadTemplate, n: usize, seed: u64) -> Vec<ParticipantProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a0f_11e5);
    (0..n)
        .map(|id| {
            let shape = (0..template.shape_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expression =
                (0..template.expression_dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
            ParticipantProfile {
                id,
                shape,
                expression,
                bite_force_scale: rng.random_range(0.6..1.6),
                impulse_scale: rng.random_range(0.6..1.6),
                impulse_dir_bias: [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(0.2..1.0),
                ],
                manipulation_strength: rng.random_range(0.6..1.6),
                bite_style_lip: rng.random_range(0.0..1.0),
                spasm_rate_hz: rng.random_range(0.02..0.2),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub wrench_noise_n: f64,
    pub keypoint_noise_mm: f64,
    pub rate_hz: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { wrench_noise_n: 0.05, keypoint_noise_mm: 0.3, rate_hz: 1000.0 }
    }
}

fn snapshot(
    template: &HeadTemplate,
    params: &HeadParams,
    tip: Point3<f64>,
    noise_mm: f64,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<KeypointSnapshot> {
    let clean = synthesize(template, params)?;
    let gauss = Normal::new(0.0, noise_mm).unwrap();
    let keypoints_3d: Vec<Point3<f64>> = clean
        .iter()
        .map(|p| {
            Point3::new(
                p.x + gauss.sample(rng),
                p.y + gauss.sample(rng),
                p.z + gauss.sample(rng),
            )
        })
        .collect();
    let mouth = mouth_state(&keypoints_3d, template, DEFAULT_OPEN_THRESHOLD_MM, t)?;
    Ok(KeypointSnapshot { keypoints_2d: vec![], keypoints_3d, mouth, utensil_tip: tip })
}

fn unit(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n < 1e-12 {
        Vector3::z()
    } else {
        v / n
    }
}

/// Generates one labeled 100 ms window. Deterministic in (label, profile id,
/// seed).
pub fn gen_interaction(
    template: &HeadTemplate,
    label: InteractionLabel,
    profile: &ParticipantProfile,
    cfg: &GenConfig,
    seed: u64,
) -> Result<InteractionWindow> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (profile.id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ ((label.index() as u64) << 56),
    );
    let t_samples = (cfg.rate_hz * 0.1).round() as usize;
    let dt = 1.0 / cfg.rate_hz;

    let base_pose = Iso3::identity();
    let mut start = HeadParams {
        shape: profile.shape.clone(),
        expression: profile.expression.clone(),
        jaw_angle: 0.0,
        pose: base_pose,
    };
    let mut end = start.clone();

    // per-label wrench profile (mouth frame ≈ world at generation pose) and
    // head/utensil motion for the visual snapshots
    let mut wrench = vec![[0.0; WRENCH_CHANNELS]; t_samples];
    let tip_start;
    let mut tip_end;

    // a neutral open-mouth reference for placing the utensil
    let open_jaw = 0.42;
    let probe = HeadParams { jaw_angle: open_jaw, ..start.clone() };
    let mouth_ref = mouth_state(
        &synthesize(template, &probe)?,
        template,
        DEFAULT_OPEN_THRESHOLD_MM,
        0.0,
    )?;
    let center = mouth_ref.center();
    let normal = mouth_ref.outward_normal();
    let lateral = mouth_ref.frame.rotation * Vector3::x();
    let vertical = mouth_ref.frame.rotation * Vector3::y();

    match label {
        InteractionLabel::Incidental => {
            // brief low-force tap at the lip boundary, utensil outside
            let jaw = rng.random_range(0.0..0.15);
            start.jaw_angle = jaw;
            end.jaw_angle = jaw;
            let dur = rng.random_range(0.020..0.060);
            let len = (dur * cfg.rate_hz) as usize;
            let onset = rng.random_range(0..t_samples - len);
            let mag = rng.random_range(0.5..2.0);
            let dir = unit(
                -normal
                    + Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        0.0,
                    ),
            );
            for k in 0..len {
                let env = (std::f64::consts::PI * k as f64 / len as f64).sin();
                let f = dir * mag * env;
                wrench[onset + k][0] += f.x;
                wrench[onset + k][1] += f.y;
                wrench[onset + k][2] += f.z;
            }
            tip_start = center + 15.0 * normal;
            tip_end = tip_start;
        }
        InteractionLabel::InMouthManipulation => {
            // sustained lateral tongue push, head static, jaw open throughout
            start.jaw_angle = rng.random_range(0.35..0.48);
            end.jaw_angle = start.jaw_angle;
            let dur = rng.random_range(0.080..0.100);
            let len = ((dur * cfg.rate_hz) as usize).min(t_samples);
            let onset = rng.random_range(0..=(t_samples - len));
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mag = (rng.random_range(0.5..3.0) * profile.manipulation_strength)
                .clamp(0.5, 3.0);
            let dir = unit(
                side * lateral
                    + Vector3::new(0.0, rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            );
            for k in 0..len {
                let ramp = (k as f64 / (0.2 * len as f64)).min(1.0);
                let f = dir * mag * ramp;
                wrench[onset + k][0] += f.x;
                wrench[onset + k][1] += f.y;
                wrench[onset + k][2] += f.z;
                // tongue torque about the utensil axis
                wrench[onset + k][4] += side * mag * ramp * 8.0;
            }
            tip_start = center - 8.0 * normal;
            tip_end = tip_start + dir * rng.random_range(5.0..15.0);
        }
        InteractionLabel::Impulsive => {
            // sharp transient with correlated whole-head displacement
            let jaw = rng.random_range(0.1..0.48);
            start.jaw_angle = jaw;
            end.jaw_angle = jaw;
            let peak = (rng.random_range(4.0..15.0) * profile.impulse_scale).clamp(4.0, 15.0);
            let width = rng.random_range(0.010..0.025);
            let t0 = rng.random_range(0.02..0.06);
            let bias = Vector3::new(
                profile.impulse_dir_bias[0],
                profile.impulse_dir_bias[1],
                profile.impulse_dir_bias[2],
            );
            let dir = unit(
                bias + Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ),
            );
            for (k, w) in wrench.iter_mut().enumerate() {
                let t = k as f64 * dt;
                let g = (-(t - t0) * (t - t0) / (2.0 * width * width)).exp();
                let f = dir * peak * g;
                w[0] += f.x;
                w[1] += f.y;
                w[2] += f.z;
            }
            let disp = dir * (5.0 + (peak - 4.0) / 11.0 * 25.0);
            end.pose = Iso3::from_parts(
                Translation3::from(start.pose.translation.vector + disp),
                start.pose.rotation,
            );
            tip_start = center - 5.0 * normal;
            tip_end = tip_start + disp * rng.random_range(0.3..0.8);
        }
        InteractionLabel::Bite => {
            // vertical clamp ramp held to window end; aperture closes
            start.jaw_angle = rng.random_range(0.35..0.48);
            end.jaw_angle = (start.jaw_angle - rng.random_range(0.12..0.28)).max(0.0);
            let lip = profile.bite_style_lip;
            let peak = (rng.random_range(3.0..10.0) * profile.bite_force_scale).clamp(3.0, 10.0);
            // teeth bites are sharper-edged than lip bites
            let ramp_t = 0.015 + 0.035 * lip;
            let onset = rng.random_range(0.005..0.025);
            let dir = unit(-vertical + 0.15 * lateral * rng.random_range(-1.0..1.0));
            for (k, w) in wrench.iter_mut().enumerate() {
                let t = k as f64 * dt;
                if t >= onset {
                    let ramp = ((t - onset) / ramp_t).min(1.0);
                    let f = dir * peak * ramp;
                    w[0] += f.x;
                    w[1] += f.y;
                    w[2] += f.z;
                    w[3] += peak * ramp * 10.0; // clamp torque about x
                }
            }
            tip_start = center - 6.0 * normal;
            tip_end = tip_start;
        }
    }

    let noise = Normal::new(0.0, cfg.wrench_noise_n).unwrap();
    for w in &mut wrench {
        for c in 0..WRENCH_CHANNELS {
            let scale = if c < 3 { 1.0 } else { 10.0 }; // torque noise in N·mm
            w[c] += noise.sample(&mut rng) * scale;
        }
    }

    // tiny head jitter so "static" never means bit-identical keypoints
    let jitter = Normal::new(0.0, 0.05).unwrap();
    let j = Vector3::new(
        jitter.sample(&mut rng),
        jitter.sample(&mut rng),
        jitter.sample(&mut rng),
    );
    end.pose = Iso3::from_parts(
        Translation3::from(end.pose.translation.vector + j),
        end.pose.rotation,
    );
    tip_end += j * 0.1;
    // silence the unused-assignment lint when a branch overwrote these
    let _ = &tip_start;

    let visual_start =
        snapshot(template, &start, tip_start, cfg.keypoint_noise_mm, 0.0, &mut rng)?;
    let visual_end = snapshot(template, &end, tip_end, cfg.keypoint_noise_mm, 0.1, &mut rng)?;
    Ok(InteractionWindow {
        wrench,
        rate_hz: cfg.rate_hz,
        visual_start: Some(visual_start),
        visual_end: Some(visual_end),
    })
}

/// Balanced labeled dataset: `n_participants` profiles × `n_per_label` windows
/// per interaction type, features extracted with `feat_cfg`.
pub fn gen_dataset(
    template: &HeadTemplate,
    n_participants: usize,
    n_per_label: usize,
    cfg: &GenConfig,
    feat_cfg: &FeatureConfig,
    seed: u64,
) -> Result<LabeledDataset> {
    let profiles = draw_profiles(template, n_participants, seed);
    let mut samples = Vec::with_capacity(n_participants * n_per_label * 4);
    for profile in &profiles {
        for label in InteractionLabel::ALL {
            for k in 0..n_per_label {
                let window_seed = seed
                    .wrapping_mul(0x100_0000)
                    .wrapping_add((profile.id as u64) << 16)
                    .wrapping_add((label.index() as u64) << 12)
                    .wrapping_add(k as u64);
                let window = gen_interaction(template, label, profile, cfg, window_seed)?;
                samples.push(Sample {
                    features: extract(&window, feat_cfg)?,
                    label,
                    participant: profile.id,
                });
            }
        }
    }
    Ok(LabeledDataset {
        samples,
        provenance: format!(
            "gen-v1 seed={seed} participants={n_participants} per_label={n_per_label} noise={}",
            cfg.wrench_noise_n
        ),
    })
}
