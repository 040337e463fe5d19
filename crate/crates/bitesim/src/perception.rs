//! Multi-view mouth perception: pinhole observation with synthetic utensil
//! occlusion, depth lifting, outlier-robust rigid registration, and
//! continuous mouth-pose tracking via a 1-D jaw-angle search.

use crate::error::{Error, Result};
use crate::geom::{rotation_angle_between, Iso3, RigidTransform};
use crate::headmodel::{self, HeadParams, HeadTemplate, MouthPose};
use nalgebra::{Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, Write};

pub const RIG_FORMAT: &str = "camrig-v1";

/// Pinhole camera with a rigid mount: `extrinsic` is camera-from-world.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub extrinsic: Iso3,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(0.0 <= self.cx && self.cx < self.width && 0.0 <= self.cy && self.cy < self.height) {
            return Err(Error::Config("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Projects a world point; `None` when it is behind the camera.
    pub fn project(&self, world: &Point3<f64>) -> Option<([f64; 2], f64)> {
        let c = self.extrinsic * world;
        if c.z <= 1e-9 {
            return None;
        }
        Some(([self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy], c.z))
    }

    pub fn in_image(&self, px: &[f64; 2]) -> bool {
        px[0] >= 0.0 && px[0] < self.width && px[1] >= 0.0 && px[1] < self.height
    }

    /// Back-projects pixel + depth to a world point.
    pub fn backproject(&self, px: &[f64; 2], depth: f64) -> Point3<f64> {
        let cam = Point3::new(
            (px[0] - self.cx) * depth / self.fx,
            (px[1] - self.cy) * depth / self.fy,
            depth,
        );
        self.extrinsic.inverse() * cam
    }
}

/// Convex polygon in image space, used as the utensil occlusion mask.
#[derive(Debug, Clone, Default)]
pub struct ConvexPolygon {
    pub vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    pub fn rectangle(cx: f64, cy: f64, half_w: f64, half_h: f64) -> Self {
        ConvexPolygon {
            vertices: vec![
                [cx - half_w, cy - half_h],
                [cx + half_w, cy - half_h],
                [cx + half_w, cy + half_h],
                [cx - half_w, cy + half_h],
            ],
        }
    }

    pub fn contains(&self, p: &[f64; 2]) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let mut sign = 0.0f64;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            if cross.abs() < 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
        true
    }
}

/// Noise/occlusion model for the synthetic keypoint source.
#[derive(Debug, Clone)]
pub struct OcclusionConfig {
    /// Per-camera utensil mask; `None` means no occlusion in that view.
    pub utensil_masks: Vec<Option<ConvexPolygon>>,
    /// Probability a 2D keypoint inside the mask is dropped entirely.
    pub keypoint_dropout_prob: f64,
    pub keypoint_noise_sigma_outside_px: f64,
    pub keypoint_noise_sigma_inside_px: f64,
    pub depth_noise_sigma_outside_mm: f64,
    pub depth_noise_sigma_inside_mm: f64,
    /// Probability a depth reading inside the mask is replaced by an outlier.
    pub depth_outlier_prob: f64,
    pub depth_outlier_magnitude_mm: f64,
}

impl OcclusionConfig {
    pub fn noise_free(n_cameras: usize) -> Self {
        OcclusionConfig {
            utensil_masks: vec![None; n_cameras],
            keypoint_dropout_prob: 0.0,
            keypoint_noise_sigma_outside_px: 0.0,
            keypoint_noise_sigma_inside_px: 0.0,
            depth_noise_sigma_outside_mm: 0.0,
            depth_noise_sigma_inside_mm: 0.0,
            depth_outlier_prob: 0.0,
            depth_outlier_magnitude_mm: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.keypoint_dropout_prob, self.depth_outlier_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0,1]")));
            }
        }
        for s in [
            self.keypoint_noise_sigma_outside_px,
            self.keypoint_noise_sigma_inside_px,
            self.depth_noise_sigma_outside_mm,
            self.depth_noise_sigma_inside_mm,
            self.depth_outlier_magnitude_mm,
        ] {
            if s < 0.0 {
                return Err(Error::Config(format!("negative noise magnitude {s}")));
            }
        }
        Ok(())
    }
}

/// One camera's view of the L landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraObservation {
    pub keypoints_2d: Vec<[f64; 2]>,
    pub depth_mm: Vec<f64>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub views: Vec<CameraObservation>,
    pub timestamp: f64,
}

/// Projects world keypoints into every camera, applying the occlusion model.
/// Deterministic given the seed; keypoints behind a camera or outside its
/// image are marked invalid, not errors.
pub fn observe(
    keypoints_world: &[Point3<f64>],
    cameras: &[CameraModel],
    occ: &OcclusionConfig,
    timestamp: f64,
    seed: u64,
) -> Result<Observation> {
    occ.validate()?;
    if occ.utensil_masks.len() != cameras.len() {
        return Err(Error::Config(format!(
            "{} occlusion masks for {} cameras",
            occ.utensil_masks.len(),
            cameras.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut views = Vec::with_capacity(cameras.len());
    for (cam, mask) in cameras.iter().zip(occ.utensil_masks.iter()) {
        cam.validate()?;
        let l = keypoints_world.len();
        let mut kps = vec![[0.0f64; 2]; l];
        let mut depth = vec![0.0f64; l];
        let mut valid = vec![false; l];
        for (i, p) in keypoints_world.iter().enumerate() {
            let Some((px, z)) = cam.project(p) else { continue };
            if !cam.in_image(&px) {
                continue;
            }
            let inside = mask.as_ref().map(|m| m.contains(&px)).unwrap_or(false);
            if inside && rng.random::<f64>() < occ.keypoint_dropout_prob {
                continue;
            }
            let sigma_px = if inside {
                occ.keypoint_noise_sigma_inside_px
            } else {
                occ.keypoint_noise_sigma_outside_px
            };
            let sigma_d = if inside {
                occ.depth_noise_sigma_inside_mm
            } else {
                occ.depth_noise_sigma_outside_mm
            };
            kps[i] = [
                px[0] + sigma_px * unit.sample(&mut rng),
                px[1] + sigma_px * unit.sample(&mut rng),
            ];
            let mut d = z + sigma_d * unit.sample(&mut rng);
            if inside && rng.random::<f64>() < occ.depth_outlier_prob {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                d = z + sign * occ.depth_outlier_magnitude_mm;
            }
            if d <= 0.0 {
                continue;
            }
            depth[i] = d;
            valid[i] = true;
        }
        views.push(CameraObservation { keypoints_2d: kps, depth_mm: depth, valid });
    }
    Ok(Observation { views, timestamp })
}

/// Back-projects an observation to world keypoints. Points valid in several
/// cameras are averaged; points valid in none are masked out.
pub fn lift(obs: &Observation, cameras: &[CameraModel]) -> (Vec<Point3<f64>>, Vec<bool>) {
    let l = obs.views.first().map(|v| v.valid.len()).unwrap_or(0);
    let mut out = vec![Point3::origin(); l];
    let mut valid = vec![false; l];
    for i in 0..l {
        let mut sum = Vector3::zeros();
        let mut n = 0usize;
        for (view, cam) in obs.views.iter().zip(cameras.iter()) {
            if view.valid[i] {
                sum += cam.backproject(&view.keypoints_2d[i], view.depth_mm[i]).coords;
                n += 1;
            }
        }
        if n > 0 {
            out[i] = Point3::from(sum / n as f64);
            valid[i] = true;
        }
    }
    (out, valid)
}

#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub tol_mm: f64,
    pub tol_rad: f64,
    pub max_iters: usize,
    /// Inlier RMSE above which a solution is not trusted.
    pub reject_rmse_mm: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig { tol_mm: 0.01, tol_rad: 1e-4, max_iters: 50, reject_rmse_mm: 20.0 }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// World-from-model pose (mm).
    pub pose: Iso3,
    /// Final Tukey weight per correspondence (0 for invalid entries).
    pub inlier_weights: Vec<f64>,
    /// RMSE over correspondences with weight > 0.5.
    pub rmse_inlier: f64,
    /// Number of correspondences with weight > 0.5.
    pub inlier_count: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Weighted objective before/after each refit, for the monotonicity check.
    pub objective_trace: Vec<[f64; 2]>,
}

const TUKEY_C_FACTOR: f64 = 4.685;
const MAD_TO_SIGMA: f64 = 1.4826;

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Weighted closed-form rigid alignment (Kabsch) mapping model to world.
fn weighted_kabsch(
    model: &[Point3<f64>],
    world: &[Point3<f64>],
    weights: &[f64],
) -> Result<Iso3> {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 1e-12 {
        return Err(Error::Registration("all correspondence weights vanished".into()));
    }
    let mut mc = Vector3::zeros();
    let mut pc = Vector3::zeros();
    for i in 0..model.len() {
        mc += model[i].coords * weights[i];
        pc += world[i].coords * weights[i];
    }
    mc /= wsum;
    pc /= wsum;
    let mut h = Matrix3::zeros();
    for i in 0..model.len() {
        let a = model[i].coords - mc;
        let b = world[i].coords - pc;
        h += b * a.transpose() * weights[i];
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Registration("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Registration("svd failed".into()))?;
    let d = (u * vt).determinant();
    let mut s = Matrix3::identity();
    s[(2, 2)] = d.signum();
    let r = u * s * vt;
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = pc - r * mc;
    Ok(Iso3::from_parts(Translation3::from(t), rot))
}

fn residuals(pose: &Iso3, model: &[Point3<f64>], world: &[Point3<f64>]) -> Vec<f64> {
    model
        .iter()
        .zip(world.iter())
        .map(|(m, p)| (pose * m - p).norm())
        .collect()
}

fn tukey_weights(res: &[f64]) -> Vec<f64> {
    let r = res.to_vec();
    let med = median(&mut r.clone());
    let mut dev: Vec<f64> = res.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&mut dev);
    let scale = (MAD_TO_SIGMA * mad).max(1e-9);
    let c = TUKEY_C_FACTOR * scale;
    r.iter()
        .map(|&x| {
            if x < c {
                let t = 1.0 - (x / c) * (x / c);
                t * t
            } else {
                0.0
            }
        })
        .collect()
}

/// Cold-start pose for IRLS: the unweighted full-set fit is fragile when a
/// large outlier fraction combines with a large rigid motion, so also fit a
/// batch of 4-point minimal subsets (internally seeded, hence deterministic)
/// and keep whichever candidate has the lowest median residual.
fn cold_start_pose(model: &[Point3<f64>], world: &[Point3<f64>]) -> Result<Iso3> {
    let score = |pose: &Iso3| -> f64 {
        let mut res = residuals(pose, model, world);
        median(&mut res)
    };
    let mut best = weighted_kabsch(model, world, &vec![1.0; model.len()])?;
    let mut best_score = score(&best);
    let n = model.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ca1d);
    for _ in 0..32 {
        let mut picks = [0usize; 4];
        for slot in 0..4 {
            loop {
                let c = rng.random_range(0..n);
                if !picks[..slot].contains(&c) {
                    picks[slot] = c;
                    break;
                }
            }
        }
        let sub_m: Vec<Point3<f64>> = picks.iter().map(|&i| model[i]).collect();
        let sub_w: Vec<Point3<f64>> = picks.iter().map(|&i| world[i]).collect();
        let Ok(cand) = weighted_kabsch(&sub_m, &sub_w, &[1.0; 4]) else { continue };
        let s = score(&cand);
        if s < best_score {
            best_score = s;
            best = cand;
        }
    }
    Ok(best)
}

/// Iteratively-reweighted rigid fit of `model_points` onto `world_points`:
/// weighted Kabsch inner step with Tukey biweight weights at MAD scale.
/// `init` warm-starts the pose; without it the first fit is unweighted.
pub fn robust_register(
    model_points: &[Point3<f64>],
    world_points: &[Point3<f64>],
    valid: &[bool],
    cfg: &RegistrationConfig,
    init: Option<&Iso3>,
) -> Result<RegistrationResult> {
    if model_points.len() != world_points.len() || model_points.len() != valid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} model vs {} world points ({} mask entries)",
            model_points.len(),
            world_points.len(),
            valid.len()
        )));
    }
    let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if idx.len() < 4 {
        return Err(Error::Registration(format!(
            "only {} valid correspondences, need at least 4",
            idx.len()
        )));
    }
    let model: Vec<Point3<f64>> = idx.iter().map(|&i| model_points[i]).collect();
    let world: Vec<Point3<f64>> = idx.iter().map(|&i| world_points[i]).collect();

    // Degeneracy: the model spread must have full rank.
    let mc = crate::geom::centroid(&model);
    let mut cov = Matrix3::zeros();
    for p in &model {
        let d = p - mc;
        cov += d * d.transpose();
    }
    let mut evs: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if evs[2] <= 0.0 || evs[0] / evs[2] < 1e-12 {
        return Err(Error::Registration("degenerate point spread (rank < 3)".into()));
    }

    let mut pose = match init {
        Some(p) => *p,
        None => cold_start_pose(&model, &world)?,
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut weights = tukey_weights(&residuals(&pose, &model, &world));
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let res_before = residuals(&pose, &model, &world);
        let obj_before: f64 =
            weights.iter().zip(res_before.iter()).map(|(w, r)| w * r * r).sum();
        let new_pose = match weighted_kabsch(&model, &world, &weights) {
            Ok(p) => p,
            Err(_) => break, // all weights vanished: keep best iterate
        };
        let res_after = residuals(&new_pose, &model, &world);
        let obj_after: f64 =
            weights.iter().zip(res_after.iter()).map(|(w, r)| w * r * r).sum();
        trace.push([obj_before, obj_after]);
        let dt = (new_pose.translation.vector - pose.translation.vector).norm();
        let dr = rotation_angle_between(&new_pose.rotation, &pose.rotation);
        pose = new_pose;
        weights = tukey_weights(&res_after);
        if dt < cfg.tol_mm && dr < cfg.tol_rad {
            converged = true;
            break;
        }
    }

    let res = residuals(&pose, &model, &world);
    let final_weights = tukey_weights(&res);
    let mut sq = 0.0;
    let mut n_in = 0usize;
    for (r, w) in res.iter().zip(final_weights.iter()) {
        if *w > 0.5 {
            sq += r * r;
            n_in += 1;
        }
    }
    let rmse_inlier = if n_in > 0 { (sq / n_in as f64).sqrt() } else { f64::INFINITY };
    if n_in < 4 || rmse_inlier > cfg.reject_rmse_mm {
        converged = false;
    }

    let mut inlier_weights = vec![0.0; valid.len()];
    for (k, &i) in idx.iter().enumerate() {
        inlier_weights[i] = final_weights[k];
    }
    Ok(RegistrationResult {
        pose,
        inlier_weights,
        rmse_inlier,
        inlier_count: n_in,
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// Number of candidate jaw angles in the full grid sweep.
pub const JAW_GRID_STEPS: usize = 40;

/// A correspondence counts as explained by a jaw candidate when its residual
/// is below this radius (mm); comfortably above sensor noise, well below the
/// lip travel between closed and open.
pub const JAW_EXPLAIN_RADIUS_MM: f64 = 3.0;

/// How long a stale mouth pose may be held before the mouth counts as lost.
pub const HOLD_LAST_S: f64 = 0.5;

#[derive(Debug, Clone)]
struct TrackState {
    reg: RegistrationResult,
    jaw_index: usize,
    pose: MouthPose,
    time: f64,
}

/// Continuous mouth tracker. Shape and expression are frozen (the neural
/// personalization stage is out of scope); the jaw angle is recovered by a
/// grid search over candidate registrations, warm-started from the previous
/// frame. One tracker per feeding session; not internally synchronized.
pub struct MouthTracker {
    pub template: HeadTemplate,
    pub params: HeadParams,
    pub cameras: Vec<CameraModel>,
    pub reg_cfg: RegistrationConfig,
    pub open_threshold_mm: f64,
    prev: Option<TrackState>,
}

/// Output of one tracking step.
pub struct TrackOutput {
    pub mouth: MouthPose,
    pub registration: RegistrationResult,
    pub jaw_angle: f64,
    /// True when this output is a held previous pose (perception dropout).
    pub held: bool,
}

impl MouthTracker {
    pub fn new(
        template: HeadTemplate,
        params: HeadParams,
        cameras: Vec<CameraModel>,
        reg_cfg: RegistrationConfig,
        open_threshold_mm: f64,
    ) -> Self {
        MouthTracker { template, params, cameras, reg_cfg, open_threshold_mm, prev: None }
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }

    fn jaw_angle(&self, index: usize) -> f64 {
        self.template.jaw_max * index as f64 / (JAW_GRID_STEPS - 1) as f64
    }

    /// Tracks one observation. On registration failure the previous pose is
    /// held for up to [`HOLD_LAST_S`]; after that the mouth counts as lost.
    pub fn track(&mut self, obs: &Observation) -> Result<TrackOutput> {
        match self.track_fresh(obs) {
            Ok(out) => Ok(out),
            Err(e) => {
                if let Some(prev) = &self.prev {
                    if obs.timestamp - prev.time <= HOLD_LAST_S {
                        return Ok(TrackOutput {
                            mouth: prev.pose.clone(),
                            registration: prev.reg.clone(),
                            jaw_angle: self.jaw_angle(prev.jaw_index),
                            held: true,
                        });
                    }
                }
                self.prev = None;
                Err(e)
            }
        }
    }

    fn track_fresh(&mut self, obs: &Observation) -> Result<TrackOutput> {
        let (points, valid) = lift(obs, &self.cameras);
        let warm_range = self.prev.as_ref().map(|prev| {
            let lo = prev.jaw_index.saturating_sub(2);
            let hi = (prev.jaw_index + 2).min(JAW_GRID_STEPS - 1);
            (lo, hi)
        });
        let candidates: Vec<usize> = match warm_range {
            Some((lo, hi)) => (lo..=hi).collect(),
            None => (0..JAW_GRID_STEPS).collect(),
        };
        let init = self.prev.as_ref().map(|p| p.reg.pose);
        let best = self.best_candidate(&candidates, &points, &valid, init)?;
        // fast jaw or head motion can outrun the warm window and stale
        // initialization; a best candidate on the window edge, a rejected
        // fit, or no fit at all each trigger a full cold sweep
        let needs_full = warm_range.is_some()
            && match (warm_range, &best) {
                (Some((lo, hi)), Some((ci, reg))) => {
                    !reg.converged
                        || (*ci == lo && lo > 0)
                        || (*ci == hi && hi < JAW_GRID_STEPS - 1)
                }
                (_, None) => true,
                _ => false,
            };
        let best = if needs_full {
            let full: Vec<usize> = (0..JAW_GRID_STEPS).collect();
            match self.best_candidate(&full, &points, &valid, None)? {
                Some(b) => Some(b),
                None => best,
            }
        } else {
            best
        };
        self.finish_track(obs, best, &points)
    }

    fn best_candidate(
        &self,
        candidates: &[usize],
        points: &[Point3<f64>],
        valid: &[bool],
        init: Option<Iso3>,
    ) -> Result<Option<(usize, RegistrationResult)>> {
        let mut best: Option<(usize, RegistrationResult, usize, f64)> = None;
        let mut warm = init;
        let mut params = self.params.clone();
        params.pose = Iso3::identity();
        for &ci in candidates {
            params.jaw_angle = self.jaw_angle(ci);
            let model = headmodel::synthesize(&self.template, &params)?;
            let reg = match robust_register(&model, points, valid, &self.reg_cfg, warm.as_ref()) {
                Ok(r) => r,
                Err(_) => continue,
            };
            warm = Some(reg.pose);
            // rank candidates by how many correspondences the fit explains
            // within a fixed radius: a wrong jaw candidate can discard the
            // whole jaw region as outliers and still fit the static face with
            // near-zero residual, so neither rmse nor the scale-relative
            // Tukey inlier count separates candidates reliably
            let mut explained = 0usize;
            let mut sq = 0.0;
            for ((m, p), &v) in model.iter().zip(points.iter()).zip(valid.iter()) {
                if !v {
                    continue;
                }
                let r = (reg.pose * *m - *p).norm();
                if r < JAW_EXPLAIN_RADIUS_MM {
                    explained += 1;
                    sq += r * r;
                }
            }
            let rmse = if explained > 0 { (sq / explained as f64).sqrt() } else { f64::INFINITY };
            let better = match &best {
                None => true,
                Some((_, _, b_explained, b_rmse)) => {
                    explained > *b_explained || (explained == *b_explained && rmse < *b_rmse)
                }
            };
            if better {
                best = Some((ci, reg, explained, rmse));
            }
        }
        Ok(best.map(|(ci, reg, _, _)| (ci, reg)))
    }

    fn finish_track(
        &mut self,
        obs: &Observation,
        best: Option<(usize, RegistrationResult)>,
        _points: &[Point3<f64>],
    ) -> Result<TrackOutput> {
        let (jaw_index, reg) = best.ok_or_else(|| {
            Error::Registration("no jaw candidate produced a registration".into())
        })?;
        if !reg.converged {
            return Err(Error::Registration(format!(
                "registration rejected (inlier rmse {:.2} mm)",
                reg.rmse_inlier
            )));
        }
        let mut params = self.params.clone();
        params.jaw_angle = self.jaw_angle(jaw_index);
        params.pose = reg.pose;
        let posed = headmodel::synthesize(&self.template, &params)?;
        let mouth = headmodel::mouth_state(&posed, &self.template, self.open_threshold_mm, obs.timestamp)?;
        let out = TrackOutput {
            mouth: mouth.clone(),
            registration: reg.clone(),
            jaw_angle: params.jaw_angle,
            held: false,
        };
        self.prev = Some(TrackState { reg, jaw_index, pose: mouth, time: obs.timestamp });
        Ok(out)
    }
}

/// The single-view baseline: mouth landmarks lifted straight from the
/// (possibly corrupted) depth readings, with no model registration.
pub fn direct_depth_mouth_pose(
    template: &HeadTemplate,
    obs: &Observation,
    cameras: &[CameraModel],
    open_threshold_mm: f64,
) -> Result<MouthPose> {
    let (points, valid) = lift(obs, cameras);
    headmodel::mouth_state_masked(&points, &valid, template, open_threshold_mm, obs.timestamp)
}

/// Default two-camera rig: top/bottom views 60 mm apart, 400 mm in front of
/// the head, converging on the utensil workspace.
pub fn default_rig() -> Vec<CameraModel> {
    let intr = |y: f64| -> CameraModel {
        // camera-from-world: camera at (0, y, 400) looking along -z world.
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[
            -Vector3::x(),
            Vector3::y(),
            -Vector3::z(),
        ]));
        let rot = UnitQuaternion::from_rotation_matrix(&rot);
        let world_from_cam =
            Iso3::from_parts(Translation3::new(0.0, y, 400.0), rot);
        CameraModel {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
            extrinsic: world_from_cam.inverse(),
        }
    };
    vec![intr(30.0), intr(-30.0)]
}

/// Builds per-camera masks covering the projected mouth region.
pub fn mouth_region_masks(
    keypoints_world: &[Point3<f64>],
    template: &HeadTemplate,
    cameras: &[CameraModel],
    margin_px: f64,
) -> Vec<Option<ConvexPolygon>> {
    cameras
        .iter()
        .map(|cam| {
            let mut min = [f64::INFINITY; 2];
            let mut max = [f64::NEG_INFINITY; 2];
            let mut any = false;
            for &i in &template.mouth.all {
                if let Some((px, _)) = cam.project(&keypoints_world[i]) {
                    any = true;
                    for k in 0..2 {
                        min[k] = min[k].min(px[k]);
                        max[k] = max[k].max(px[k]);
                    }
                }
            }
            if !any {
                return None;
            }
            let cx = 0.5 * (min[0] + max[0]);
            let cy = 0.5 * (min[1] + max[1]);
            Some(ConvexPolygon::rectangle(
                cx,
                cy,
                0.5 * (max[0] - min[0]) + margin_px,
                0.5 * (max[1] - min[1]) + margin_px,
            ))
        })
        .collect()
}

// --- rig file format ------------------------------------------------------

pub fn write_rig<W: Write>(cameras: &[CameraModel], w: &mut W) -> Result<()> {
    writeln!(w, "{RIG_FORMAT}")?;
    writeln!(w, "{}", cameras.len())?;
    for c in cameras {
        writeln!(w, "{} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
        let t = RigidTransform::from_iso(&c.extrinsic);
        for row in t.rotation {
            writeln!(w, "{} {} {}", row[0], row[1], row[2])?;
        }
        writeln!(w, "{} {} {}", t.translation[0], t.translation[1], t.translation[2])?;
    }
    Ok(())
}

pub fn read_rig<R: BufRead>(r: &mut R, path: &str) -> Result<Vec<CameraModel>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut toks = text.split_whitespace();
    let perr = |msg: String| Error::Parse { path: path.to_string(), msg };
    let header = toks.next().ok_or_else(|| perr("empty file".into()))?;
    if header != RIG_FORMAT {
        return Err(perr(format!("bad header `{header}`")));
    }
    let next = |toks: &mut std::str::SplitWhitespace| -> Result<f64> {
        toks.next()
            .ok_or_else(|| perr("unexpected end of file".into()))?
            .parse()
            .map_err(|e| perr(format!("bad number: {e}")))
    };
    let n = next(&mut toks)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let fx = next(&mut toks)?;
        let fy = next(&mut toks)?;
        let cx = next(&mut toks)?;
        let cy = next(&mut toks)?;
        let width = next(&mut toks)?;
        let height = next(&mut toks)?;
        let mut rot = [[0.0; 3]; 3];
        for row in &mut rot {
            for v in row.iter_mut() {
                *v = next(&mut toks)?;
            }
        }
        let mut tr = [0.0; 3];
        for v in &mut tr {
            *v = next(&mut toks)?;
        }
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic: RigidTransform { rotation: rot, translation: tr }.to_iso(),
        };
        cam.validate()?;
        out.push(cam);
    }
    Ok(out)
}

pub fn save_rig(cameras: &[CameraModel], path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_rig(cameras, &mut f)
}

pub fn load_rig(path: &std::path::Path) -> Result<Vec<CameraModel>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_rig(&mut f, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmodel::{default_template, HeadParams, DEFAULT_OPEN_THRESHOLD_MM};
    use approx::assert_relative_eq;

    fn head_world(jaw: f64) -> (HeadTemplate, HeadParams, Vec<Point3<f64>>) {
        let t = default_template();
        let mut p = HeadParams::neutral(&t);
        p.jaw_angle = jaw;
        let kps = headmodel::synthesize(&t, &p).unwrap();
        (t, p, kps)
    }

    #[test]
    fn noise_free_observe_lift_roundtrip() {
        let (_, _, kps) = head_world(0.2);
        let cams = default_rig();
        let obs = observe(&kps, &cams, &OcclusionConfig::noise_free(2), 0.0, 1).unwrap();
        let (lifted, valid) = lift(&obs, &cams);
        for i in 0..kps.len() {
            assert!(valid[i]);
            assert!((lifted[i] - kps[i]).norm() < 1e-6, "point {i} off by {}", (lifted[i] - kps[i]).norm());
        }
    }

    #[test]
    fn forced_dropout_inside_mouth_mask() {
        let (t, _, kps) = head_world(0.3);
        let cams = default_rig();
        let mut occ = OcclusionConfig::noise_free(2);
        occ.utensil_masks = mouth_region_masks(&kps, &t, &cams, 5.0);
        occ.keypoint_dropout_prob = 1.0;
        let obs = observe(&kps, &cams, &occ, 0.0, 1).unwrap();
        for view in &obs.views {
            for &i in &t.mouth.all {
                assert!(!view.valid[i], "mouth keypoint {i} survived forced dropout");
            }
            // plenty of non-mouth keypoints stay valid
            let n_valid = view.valid.iter().filter(|&&v| v).count();
            assert!(n_valid > 30);
        }
    }

    #[test]
    fn observe_deterministic() {
        let (t, _, kps) = head_world(0.1);
        let cams = default_rig();
        let mut occ = OcclusionConfig::noise_free(2);
        occ.keypoint_noise_sigma_outside_px = 0.5;
        occ.depth_noise_sigma_outside_mm = 2.0;
        occ.utensil_masks = mouth_region_masks(&kps, &t, &cams, 5.0);
        occ.depth_outlier_prob = 0.5;
        occ.depth_outlier_magnitude_mm = 300.0;
        let a = observe(&kps, &cams, &occ, 0.0, 42).unwrap();
        let b = observe(&kps, &cams, &occ, 0.0, 42).unwrap();
        assert_eq!(a, b);
        let c = observe(&kps, &cams, &occ, 0.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_view_fallback() {
        let (_, _, kps) = head_world(0.0);
        let cams = default_rig();
        let mut obs = observe(&kps, &cams, &OcclusionConfig::noise_free(2), 0.0, 1).unwrap();
        obs.views[0].valid[10] = false;
        let (lifted, valid) = lift(&obs, &cams);
        assert!(valid[10]);
        assert!((lifted[10] - kps[10]).norm() < 1e-6);
    }

    #[test]
    fn depth_outlier_shifts_along_ray() {
        let (_, _, kps) = head_world(0.0);
        let cams = default_rig();
        let obs = observe(&kps, &cams, &OcclusionConfig::noise_free(2), 0.0, 1).unwrap();
        // corrupt one keypoint's depth in the top view by +500 mm and drop it
        // from the bottom view so the corrupted lift is used alone
        let mut obs2 = obs.clone();
        obs2.views[0].depth_mm[5] += 500.0;
        obs2.views[1].valid[5] = false;
        let (lifted, _) = lift(&obs2, &cams);
        let displacement = (lifted[5] - kps[5]).norm();
        // depth moves the point along the pixel ray, whose length per unit
        // depth exceeds 1 by the ray obliquity
        let px = obs.views[0].keypoints_2d[5];
        let ray_per_depth =
            (cams[0].backproject(&px, 2.0) - cams[0].backproject(&px, 1.0)).norm();
        assert_relative_eq!(displacement, 500.0 * ray_per_depth, max_relative = 1e-9);
        // and the displacement is along the camera ray
        let cam_center = cams[0].extrinsic.inverse() * Point3::origin();
        let ray = (kps[5] - cam_center).normalize();
        let along = (lifted[5] - kps[5]).normalize().dot(&ray);
        assert!(along > 0.999, "displacement not along ray: {along}");
    }

    #[test]
    fn register_identity_case() {
        let (_, _, kps) = head_world(0.1);
        let valid = vec![true; kps.len()];
        let r = robust_register(&kps, &kps, &valid, &RegistrationConfig::default(), None).unwrap();
        assert!(r.converged);
        assert!(r.rmse_inlier < 1e-9);
        assert!(r.pose.translation.vector.norm() < 1e-9);
        assert!(r.pose.rotation.angle() < 1e-9);
    }

    #[test]
    fn register_recovers_pose_under_outliers() {
        use rand::Rng;
        let (_, _, model) = head_world(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle: f64 = rng.random_range(-0.6..0.6);
            let t = Vector3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            let xf = Iso3::from_parts(
                Translation3::from(t),
                UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle),
            );
            let mut world: Vec<Point3<f64>> = model.iter().map(|p| xf * p).collect();
            let n_out = world.len() * 3 / 10;
            let wl = world.len();
            for k in 0..n_out {
                world[k * 3 % wl] = Point3::new(
                    rng.random_range(-250.0..250.0),
                    rng.random_range(-250.0..250.0),
                    rng.random_range(-250.0..250.0),
                );
            }
            let valid = vec![true; world.len()];
            let r = robust_register(&model, &world, &valid, &RegistrationConfig::default(), None)
                .unwrap();
            let terr = (r.pose.translation.vector - xf.translation.vector).norm();
            let rerr = rotation_angle_between(&r.pose.rotation, &xf.rotation);
            assert!(terr < 1.0, "trial {trial}: translation error {terr}");
            assert!(rerr < 0.5f64.to_radians(), "trial {trial}: rotation error {rerr}");
            for [before, after] in &r.objective_trace {
                assert!(after <= &(before + 1e-9));
            }
        }
    }

    #[test]
    fn register_rejects_pure_noise() {
        use rand::Rng;
        let (_, _, model) = head_world(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let world: Vec<Point3<f64>> = model
            .iter()
            .map(|_| {
                Point3::new(
                    rng.random_range(-250.0..250.0),
                    rng.random_range(-250.0..250.0),
                    rng.random_range(-250.0..250.0),
                )
            })
            .collect();
        let valid = vec![true; world.len()];
        let cfg = RegistrationConfig::default();
        let r = robust_register(&model, &world, &valid, &cfg, None).unwrap();
        assert!(!r.converged || r.rmse_inlier > cfg.reject_rmse_mm);
    }

    #[test]
    fn register_too_few_points_errors() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let valid = vec![true; 2];
        assert!(matches!(
            robust_register(&pts, &pts, &valid, &RegistrationConfig::default(), None),
            Err(Error::Registration(_))
        ));
    }

    #[test]
    fn register_permutation_invariant() {
        let (_, _, model) = head_world(0.3);
        let xf = Iso3::from_parts(
            Translation3::new(20.0, -10.0, 5.0),
            UnitQuaternion::from_euler_angles(0.1, 0.2, -0.1),
        );
        let world: Vec<Point3<f64>> = model.iter().map(|p| xf * p).collect();
        let valid = vec![true; world.len()];
        let r1 = robust_register(&model, &world, &valid, &RegistrationConfig::default(), None).unwrap();
        let perm: Vec<usize> = (0..model.len()).rev().collect();
        let model_p: Vec<_> = perm.iter().map(|&i| model[i]).collect();
        let world_p: Vec<_> = perm.iter().map(|&i| world[i]).collect();
        let r2 = robust_register(&model_p, &world_p, &valid, &RegistrationConfig::default(), None).unwrap();
        assert!((r1.pose.translation.vector - r2.pose.translation.vector).norm() < 1e-6);
        assert!(rotation_angle_between(&r1.pose.rotation, &r2.pose.rotation) < 1e-6);
    }

    #[test]
    fn tracker_noise_free_matches_ground_truth() {
        let t = default_template();
        let mut p = HeadParams::neutral(&t);
        // true jaw angle on the grid
        p.jaw_angle = t.jaw_max * 25.0 / (JAW_GRID_STEPS - 1) as f64;
        p.pose = Iso3::from_parts(
            Translation3::new(8.0, -5.0, 12.0),
            UnitQuaternion::from_euler_angles(0.05, -0.1, 0.02),
        );
        let kps = headmodel::synthesize(&t, &p).unwrap();
        let truth = headmodel::mouth_state(&kps, &t, DEFAULT_OPEN_THRESHOLD_MM, 0.0).unwrap();

        let cams = default_rig();
        let obs = observe(&kps, &cams, &OcclusionConfig::noise_free(2), 0.0, 3).unwrap();
        let mut tracker = MouthTracker::new(
            t.clone(),
            HeadParams::neutral(&t),
            cams,
            RegistrationConfig::default(),
            DEFAULT_OPEN_THRESHOLD_MM,
        );
        let out = tracker.track(&obs).unwrap();
        let terr = (out.mouth.center() - truth.center()).norm();
        let rerr = rotation_angle_between(&out.mouth.frame.rotation, &truth.frame.rotation);
        assert!(terr < 0.5, "translation error {terr}");
        assert!(rerr < 0.5f64.to_radians(), "rotation error {rerr}");
        assert_eq!(out.mouth.open, truth.open);
    }

    #[test]
    fn tracker_robust_to_corrupt_mouth_depth() {
        let t = default_template();
        let mut p = HeadParams::neutral(&t);
        p.jaw_angle = t.jaw_max * 24.0 / (JAW_GRID_STEPS - 1) as f64;
        let kps = headmodel::synthesize(&t, &p).unwrap();
        let truth = headmodel::mouth_state(&kps, &t, DEFAULT_OPEN_THRESHOLD_MM, 0.0).unwrap();
        let cams = default_rig();

        let mut clean = OcclusionConfig::noise_free(2);
        clean.keypoint_noise_sigma_outside_px = 0.3;
        clean.depth_noise_sigma_outside_mm = 1.0;

        let mut corrupt = clean.clone();
        corrupt.utensil_masks = mouth_region_masks(&kps, &t, &cams, 5.0);
        corrupt.keypoint_noise_sigma_inside_px = 0.3;
        corrupt.depth_noise_sigma_inside_mm = 1.0;
        corrupt.depth_outlier_prob = 1.0;
        corrupt.depth_outlier_magnitude_mm = 300.0;

        let mut errs = [0.0f64; 2];
        for (k, occ) in [&clean, &corrupt].iter().enumerate() {
            let obs = observe(&kps, &cams, occ, 0.0, 77).unwrap();
            let mut tracker = MouthTracker::new(
                t.clone(),
                HeadParams::neutral(&t),
                cams.clone(),
                RegistrationConfig::default(),
                DEFAULT_OPEN_THRESHOLD_MM,
            );
            let out = tracker.track(&obs).unwrap();
            errs[k] = (out.mouth.center() - truth.center()).norm();
        }
        assert!(errs[1] <= 2.0 * errs[0].max(0.3), "corrupt {} vs clean {}", errs[1], errs[0]);

        // direct-depth baseline on the corrupted observation is far worse
        let obs = observe(&kps, &cams, &corrupt, 0.0, 77).unwrap();
        let baseline = direct_depth_mouth_pose(&t, &obs, &cams, DEFAULT_OPEN_THRESHOLD_MM).unwrap();
        let berr = (baseline.center() - truth.center()).norm();
        assert!(berr >= 10.0 * errs[1].max(0.3), "baseline {} vs ours {}", berr, errs[1]);
    }

    #[test]
    fn rig_roundtrip() {
        let cams = default_rig();
        let mut buf = Vec::new();
        write_rig(&cams, &mut buf).unwrap();
        let cams2 = read_rig(&mut std::io::Cursor::new(&buf), "mem").unwrap();
        assert_eq!(cams.len(), cams2.len());
        for (a, b) in cams.iter().zip(cams2.iter()) {
            assert_eq!(a.fx, b.fx);
            assert!((a.extrinsic.translation.vector - b.extrinsic.translation.vector).norm() < 1e-12);
            assert!(rotation_angle_between(&a.extrinsic.rotation, &b.extrinsic.rotation) < 1e-12);
        }
    }
}
