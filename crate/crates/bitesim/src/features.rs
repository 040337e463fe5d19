//! Multimodal feature extraction over the 100 ms contact window: per-channel
//! wrench statistics (mean, range, variance, excess kurtosis, Hjorth
//! parameters, spectral band energies) plus visual keypoint-displacement
//! features.

use crate::error::{Error, Result};
use crate::headmodel::MouthPose;
use nalgebra::Point3;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

pub const WRENCH_CHANNELS: usize = 6;
pub const WINDOW_DURATION_S: f64 = 0.1;

/// Keypoint snapshot taken at the window boundary.
#[derive(Debug, Clone)]
pub struct KeypointSnapshot {
    /// Per-camera 2D keypoints (pixels); empty when no projection was taken.
    pub keypoints_2d: Vec<Vec<[f64; 2]>>,
    /// Lifted 3D keypoints (mm, world frame).
    pub keypoints_3d: Vec<Point3<f64>>,
    pub mouth: MouthPose,
    /// Utensil tip position (mm, world frame).
    pub utensil_tip: Point3<f64>,
}

/// Synchronized wrench time-series plus boundary keypoint snapshots.
///
/// Forces in N, torques in N·mm.
#[derive(Debug, Clone)]
pub struct InteractionWindow {
    pub wrench: Vec<[f64; WRENCH_CHANNELS]>,
    pub rate_hz: f64,
    pub visual_start: Option<KeypointSnapshot>,
    pub visual_end: Option<KeypointSnapshot>,
}

impl InteractionWindow {
    pub fn validate(&self) -> Result<()> {
        let expect = (self.rate_hz * WINDOW_DURATION_S).round() as usize;
        if self.wrench.len() != expect {
            return Err(Error::Config(format!(
                "window has {} samples, rate {} Hz requires {}",
                self.wrench.len(),
                self.rate_hz,
                expect
            )));
        }
        if self.wrench.iter().any(|s| s.iter().any(|x| !x.is_finite())) {
            return Err(Error::Config("non-finite wrench sample".into()));
        }
        Ok(())
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.wrench.iter().map(|s| s[c]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Haptic,
    Visual,
}

/// Feature extraction settings; the layout is a pure function of these plus
/// the landmark count.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureConfig {
    pub rate_hz: f64,
    /// Frequency bands in Hz, half-open [lo, hi).
    pub bands: Vec<(f64, f64)>,
    pub landmark_count: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            rate_hz: 1000.0,
            bands: vec![(0.0, 20.0), (20.0, 50.0), (50.0, 150.0), (150.0, 500.0)],
            landmark_count: 68,
        }
    }
}

/// Feature name/modality manifest, emitted as JSON alongside trained models.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureLayout {
    pub names: Vec<String>,
    pub modality: Vec<Modality>,
}

impl FeatureLayout {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn from_config(cfg: &FeatureConfig) -> FeatureLayout {
        let mut names = Vec::new();
        let mut modality = Vec::new();
        let channels = ["fx", "fy", "fz", "tx", "ty", "tz"];
        for ch in channels {
            for stat in ["mean", "range", "var", "kurt", "hjorth_act", "hjorth_mob", "hjorth_cmp"] {
                names.push(format!("{ch}_{stat}"));
                modality.push(Modality::Haptic);
            }
            for (lo, hi) in &cfg.bands {
                names.push(format!("{ch}_band{lo}_{hi}"));
                modality.push(Modality::Haptic);
            }
        }
        for i in 0..cfg.landmark_count {
            names.push(format!("kp{i:02}_disp"));
            modality.push(Modality::Visual);
        }
        names.push("head_disp_mean".into());
        modality.push(Modality::Visual);
        for axis in ["x", "y", "z"] {
            names.push(format!("utensil_d{axis}_mouth"));
            modality.push(Modality::Visual);
        }
        names.push("aperture_change".into());
        modality.push(Modality::Visual);
        FeatureLayout { names, modality }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// False when the visual block was zero-filled for lack of snapshots.
    pub visual_present: bool,
}

/// Hjorth activity, mobility and complexity of a series.
///
/// Differences use periodic extension so the descriptor is unbiased by window
/// truncation (a whole-period sinusoid has complexity exactly 1). Returns
/// (0, 0, 0) for (near-)constant input instead of dividing by zero.
pub fn hjorth(series: &[f64]) -> Result<(f64, f64, f64)> {
    if series.len() < 3 {
        return Err(Error::WindowTooShort { need: 3, got: series.len() });
    }
    let var = |xs: &[f64]| -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    };
    let diff = |xs: &[f64]| -> Vec<f64> {
        let n = xs.len();
        (0..n).map(|i| xs[(i + 1) % n] - xs[i]).collect()
    };
    let v0 = var(series);
    if v0 < 1e-12 {
        return Ok((0.0, 0.0, 0.0));
    }
    let d1 = diff(series);
    let v1 = var(&d1);
    let mobility = (v1 / v0).sqrt();
    if v1 < 1e-12 {
        return Ok((v0, mobility, 0.0));
    }
    let d2 = diff(&d1);
    let v2 = var(&d2);
    let mobility_d = (v2 / v1).sqrt();
    Ok((v0, mobility, mobility_d / mobility))
}

/// Excess kurtosis with the degenerate-variance guard; no small-sample bias
/// correction.
pub fn excess_kurtosis(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let m = series.iter().sum::<f64>() / n;
    let m2 = series.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    if m2 < 1e-12 {
        return 0.0;
    }
    let m4 = series.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Magnitude-squared DFT energy per band, DC excluded. With bands covering
/// (0, rate/2] completely the energies sum to the total AC power (population
/// variance); the upper edge is treated as inclusive when it equals the
/// Nyquist frequency so full-coverage band sets satisfy Parseval exactly.
pub fn band_energies(series: &[f64], rate_hz: f64, bands: &[(f64, f64)]) -> Result<Vec<f64>> {
    let nyquist = rate_hz / 2.0;
    for &(lo, hi) in bands {
        if !(0.0 <= lo && lo < hi && hi <= nyquist) {
            return Err(Error::Config(format!(
                "invalid band [{lo}, {hi}) for rate {rate_hz} Hz"
            )));
        }
    }
    let n = series.len();
    let mut buf: Vec<Complex<f64>> =
        series.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mut out = vec![0.0; bands.len()];
    // bins 1..=n/2 carry the positive frequencies; fold in the mirrored
    // negative-frequency bin except at Nyquist (even n)
    for k in 1..=n / 2 {
        let f = k as f64 * rate_hz / n as f64;
        let mut e = buf[k].norm_sqr();
        if !(n % 2 == 0 && k == n / 2) {
            e += buf[n - k].norm_sqr();
        }
        e /= (n * n) as f64;
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let inside = (lo <= f && f < hi) || (f == hi && hi == nyquist);
            if inside {
                out[b] += e;
                break;
            }
        }
    }
    Ok(out)
}

/// Extracts the full feature vector from a window. A missing visual snapshot
/// zero-fills the visual block and clears `visual_present` (haptic-only
/// ablation path).
pub fn extract(window: &InteractionWindow, cfg: &FeatureConfig) -> Result<FeatureVector> {
    window.validate()?;
    let mut values = Vec::with_capacity(FeatureLayout::from_config(cfg).len());
    for c in 0..WRENCH_CHANNELS {
        let series = window.channel(c);
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        let min = series.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (act, mob, cmp) = hjorth(&series)?;
        values.push(mean);
        values.push(max - min);
        values.push(act); // variance == hjorth activity by definition
        values.push(excess_kurtosis(&series));
        values.push(act);
        values.push(mob);
        values.push(cmp);
        values.extend(band_energies(&series, cfg.rate_hz, &cfg.bands)?);
    }

    let visual_present = window.visual_start.is_some() && window.visual_end.is_some();
    if visual_present {
        let start = window.visual_start.as_ref().unwrap();
        let end = window.visual_end.as_ref().unwrap();
        if start.keypoints_3d.len() != cfg.landmark_count
            || end.keypoints_3d.len() != cfg.landmark_count
        {
            return Err(Error::DimensionMismatch(format!(
                "snapshot has {} keypoints, layout expects {}",
                start.keypoints_3d.len(),
                cfg.landmark_count
            )));
        }
        let disps: Vec<f64> = start
            .keypoints_3d
            .iter()
            .zip(end.keypoints_3d.iter())
            .map(|(a, b)| (b - a).norm())
            .collect();
        let head_mean = disps.iter().sum::<f64>() / disps.len() as f64;
        values.extend(disps.iter());
        values.push(head_mean);
        // utensil displacement expressed in the mouth frame of the start
        let inv = start.mouth.frame.inverse();
        let d = inv * end.utensil_tip - inv * start.utensil_tip;
        values.push(d.x);
        values.push(d.y);
        values.push(d.z);
        values.push(end.mouth.aperture - start.mouth.aperture);
    } else {
        values.extend(std::iter::repeat(0.0).take(cfg.landmark_count + 5));
    }

    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(FeatureVector { values, visual_present })
}

/// Per-feature z-scoring with a floored standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

pub fn fit_standardizer(features: &[FeatureVector]) -> Result<Standardizer> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InsufficientData("no features to fit a standardizer".into()));
    }
    let f = features[0].values.len();
    let mut mean = vec![0.0; f];
    for fv in features {
        if fv.values.len() != f {
            return Err(Error::LayoutMismatch("inconsistent feature lengths".into()));
        }
        for (m, v) in mean.iter_mut().zip(fv.values.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; f];
    for fv in features {
        for ((s, v), m) in var.iter_mut().zip(fv.values.iter()).zip(mean.iter()) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(Standardizer { mean, std })
}

impl Standardizer {
    pub fn apply(&self, fv: &FeatureVector) -> Result<FeatureVector> {
        if fv.values.len() != self.mean.len() {
            return Err(Error::LayoutMismatch(format!(
                "feature length {} vs standardizer {}",
                fv.values.len(),
                self.mean.len()
            )));
        }
        let values = fv
            .values
            .iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        Ok(FeatureVector { values, visual_present: fv.visual_present })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Iso3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_window() -> InteractionWindow {
        InteractionWindow {
            wrench: vec![[0.0; 6]; 100],
            rate_hz: 1000.0,
            visual_start: None,
            visual_end: None,
        }
    }

    fn snapshot(offset: f64, aperture: f64) -> KeypointSnapshot {
        KeypointSnapshot {
            keypoints_2d: vec![],
            keypoints_3d: (0..68)
                .map(|i| Point3::new(i as f64 + offset, 0.0, 0.0))
                .collect(),
            mouth: MouthPose { frame: Iso3::identity(), aperture, open: aperture > 15.0, timestamp: 0.0 },
            utensil_tip: Point3::new(offset, 0.0, 0.0),
        }
    }

    #[test]
    fn hjorth_constant_series_guard() {
        let xs = vec![3.25; 100];
        assert_eq!(hjorth(&xs).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hjorth_too_short() {
        assert!(matches!(hjorth(&[1.0, 2.0]), Err(Error::WindowTooShort { .. })));
    }

    #[test]
    fn hjorth_sinusoid_complexity_near_one() {
        let rate = 1000.0;
        let xs: Vec<f64> = (0..100)
            .map(|n| (std::f64::consts::TAU * 10.0 * n as f64 / rate).sin())
            .collect();
        let (_, _, cmp) = hjorth(&xs).unwrap();
        assert!((cmp - 1.0).abs() < 0.02, "complexity {cmp}");
    }

    #[test]
    fn hjorth_noise_more_complex_than_sinusoid() {
        let rate = 1000.0;
        let sin: Vec<f64> = (0..100)
            .map(|n| (std::f64::consts::TAU * 10.0 * n as f64 / rate).sin())
            .collect();
        let (_, _, cmp_sin) = hjorth(&sin).unwrap();
        let sin_power = sin.iter().map(|x| x * x).sum::<f64>() / sin.len() as f64;
        let mut wins = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..100)
                .map(|_| {
                    rand_distr::Distribution::sample(
                        &rand_distr::Normal::new(0.0, sin_power.sqrt()).unwrap(),
                        &mut rng,
                    )
                })
                .collect();
            let (_, _, cmp_noise) = hjorth(&noise).unwrap();
            if cmp_noise > cmp_sin {
                wins += 1;
            }
        }
        assert_eq!(wins, 100);
    }

    #[test]
    fn band_energy_sinusoid_lands_in_its_band() {
        let rate = 1000.0;
        let xs: Vec<f64> = (0..100)
            .map(|n| (std::f64::consts::TAU * 30.0 * n as f64 / rate).sin())
            .collect();
        let bands = vec![(0.0, 20.0), (20.0, 50.0), (50.0, 200.0)];
        let e = band_energies(&xs, rate, &bands).unwrap();
        let total: f64 = e.iter().sum();
        assert!(e[1] / total >= 0.99, "band energies {e:?}");
    }

    #[test]
    fn band_energy_zero_signal() {
        let e = band_energies(&vec![0.0; 100], 1000.0, &[(0.0, 20.0), (20.0, 500.0)]).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn band_energy_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bands = vec![(0.0, 20.0), (20.0, 50.0), (50.0, 150.0), (150.0, 500.0)];
        let e = band_energies(&xs, 1000.0, &bands).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let ac_power = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert_relative_eq!(e.iter().sum::<f64>(), ac_power, max_relative = 1e-9);
    }

    #[test]
    fn band_energy_invalid_band() {
        assert!(band_energies(&vec![0.0; 100], 1000.0, &[(0.0, 600.0)]).is_err());
    }

    #[test]
    fn extract_zero_window() {
        let fv = extract(&zero_window(), &FeatureConfig::default()).unwrap();
        assert!(fv.values.iter().all(|&v| v == 0.0));
        assert!(!fv.visual_present);
    }

    #[test]
    fn extract_constant_fz() {
        let mut w = zero_window();
        for s in &mut w.wrench {
            s[2] = 5.0;
        }
        let cfg = FeatureConfig::default();
        let layout = FeatureLayout::from_config(&cfg);
        let fv = extract(&w, &cfg).unwrap();
        let idx = |name: &str| layout.names.iter().position(|n| n == name).unwrap();
        assert_eq!(fv.values[idx("fz_mean")], 5.0);
        assert_eq!(fv.values[idx("fz_range")], 0.0);
        assert_eq!(fv.values[idx("fz_kurt")], 0.0);
    }

    #[test]
    fn extract_visual_displacements() {
        let mut w = zero_window();
        w.visual_start = Some(snapshot(0.0, 20.0));
        w.visual_end = Some(snapshot(2.0, 12.0));
        let cfg = FeatureConfig::default();
        let layout = FeatureLayout::from_config(&cfg);
        let fv = extract(&w, &cfg).unwrap();
        let idx = |name: &str| layout.names.iter().position(|n| n == name).unwrap();
        assert_relative_eq!(fv.values[idx("kp00_disp")], 2.0);
        assert_relative_eq!(fv.values[idx("head_disp_mean")], 2.0);
        assert_relative_eq!(fv.values[idx("utensil_dx_mouth")], 2.0);
        assert_relative_eq!(fv.values[idx("aperture_change")], -8.0);
        assert!(fv.visual_present);
    }

    #[test]
    fn modality_isolation() {
        let cfg = FeatureConfig::default();
        let layout = FeatureLayout::from_config(&cfg);
        let mut w = zero_window();
        w.visual_start = Some(snapshot(0.0, 20.0));
        w.visual_end = Some(snapshot(3.0, 10.0));
        let base = extract(&w, &cfg).unwrap();
        // mutate the wrench: visual entries must not move
        let mut w2 = w.clone();
        for (i, s) in w2.wrench.iter_mut().enumerate() {
            s[0] = (i as f64 * 0.37).sin() * 4.0;
        }
        let mutated = extract(&w2, &cfg).unwrap();
        for i in 0..layout.len() {
            match layout.modality[i] {
                Modality::Visual => assert_eq!(base.values[i], mutated.values[i]),
                Modality::Haptic => {}
            }
        }
        // mutate the snapshots: haptic entries must not move
        let mut w3 = w.clone();
        w3.visual_end = Some(snapshot(9.0, 2.0));
        let mutated = extract(&w3, &cfg).unwrap();
        for i in 0..layout.len() {
            if layout.modality[i] == Modality::Haptic {
                assert_eq!(base.values[i], mutated.values[i]);
            }
        }
    }

    #[test]
    fn layout_length_consistent() {
        let cfg = FeatureConfig::default();
        let layout = FeatureLayout::from_config(&cfg);
        assert_eq!(layout.len(), 6 * (7 + 4) + 68 + 5);
        let fv = extract(&zero_window(), &cfg).unwrap();
        assert_eq!(fv.values.len(), layout.len());
    }

    #[test]
    fn standardizer_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<FeatureVector> = (0..50)
            .map(|_| FeatureVector {
                values: (0..10).map(|_| rng.random_range(-3.0..7.0)).collect(),
                visual_present: true,
            })
            .collect();
        let st = fit_standardizer(&data).unwrap();
        let z: Vec<FeatureVector> = data.iter().map(|fv| st.apply(fv).unwrap()).collect();
        for j in 0..10 {
            let m: f64 = z.iter().map(|fv| fv.values[j]).sum::<f64>() / z.len() as f64;
            let v: f64 = z.iter().map(|fv| fv.values[j] * fv.values[j]).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn standardizer_constant_feature_maps_to_zero() {
        let data: Vec<FeatureVector> = (0..5)
            .map(|i| FeatureVector { values: vec![4.2, i as f64], visual_present: true })
            .collect();
        let st = fit_standardizer(&data).unwrap();
        let z = st.apply(&data[0]).unwrap();
        assert_eq!(z.values[0], 0.0);
        assert!(z.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn standardizer_empty_input_errors() {
        assert!(fit_standardizer(&[]).is_err());
    }

    proptest! {
        #[test]
        fn extract_total_on_random_windows(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = zero_window();
            let kind = seed % 3;
            for (i, s) in w.wrench.iter_mut().enumerate() {
                for c in 0..6 {
                    s[c] = match kind {
                        0 => 0.0,                                   // constant
                        1 => if i == 50 { 80.0 } else { 0.0 },      // impulsive extreme
                        _ => rng.random_range(-20.0..20.0),
                    };
                }
            }
            let fv = extract(&w, &FeatureConfig::default()).unwrap();
            prop_assert!(fv.values.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn offset_invariance(offset in -50.0f64..50.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
            let shifted: Vec<f64> = xs.iter().map(|x| x + offset).collect();
            let (a0, m0, c0) = hjorth(&xs).unwrap();
            let (a1, m1, c1) = hjorth(&shifted).unwrap();
            prop_assert!((a0 - a1).abs() < 1e-6 * a0.abs().max(1.0));
            prop_assert!((m0 - m1).abs() < 1e-6);
            prop_assert!((c0 - c1).abs() < 1e-6);
            let k0 = excess_kurtosis(&xs);
            let k1 = excess_kurtosis(&shifted);
            prop_assert!((k0 - k1).abs() < 1e-6);
            let bands = [(0.0, 20.0), (20.0, 500.0)];
            let e0 = band_energies(&xs, 1000.0, &bands).unwrap();
            let e1 = band_energies(&shifted, 1000.0, &bands).unwrap();
            for (a, b) in e0.iter().zip(e1.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
