//! Linear blendshape head model with an articulated jaw.
//!
//! The template is a compact procedural head (N = 200 vertices, 68 landmarks,
//! 10 shape + 5 expression basis fields) whose lower face rotates about a
//! single hinge axis. It generates ground-truth 3D facial keypoints for the
//! perception and simulation layers.

use crate::error::{Error, Result};
use crate::geom::{centroid, Iso3};
use nalgebra::{Matrix3, Point3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

pub const TEMPLATE_FORMAT: &str = "headmodel-v1";

/// Default open/closed aperture threshold in mm. The procedural template has a
/// closed aperture of ~2 mm and a fully open aperture of ~33 mm.
pub const DEFAULT_OPEN_THRESHOLD_MM: f64 = 15.0;

/// Landmark-index layout of the 20 lip landmarks within the 68-point set.
#[derive(Debug, Clone, PartialEq)]
pub struct MouthLayout {
    /// All lip landmark positions (indices into the landmark list), in order.
    pub all: Vec<usize>,
    /// (upper, lower) landmark pairs used for the aperture measurement.
    pub pairs: Vec<(usize, usize)>,
    /// Landmark position of the right (+x in head frame) mouth corner.
    pub right_corner: usize,
    /// Landmark position of the left mouth corner.
    pub left_corner: usize,
}

#[derive(Debug, Clone)]
pub struct HeadTemplate {
    /// Rest vertices in the head frame (mm).
    pub vertices: Vec<Point3<f64>>,
    /// S displacement fields, each N vectors (mm per unit coefficient).
    pub shape_basis: Vec<Vec<Vector3<f64>>>,
    /// E displacement fields, each N vectors (mm per unit coefficient).
    pub expression_basis: Vec<Vec<Vector3<f64>>>,
    /// Vertex indices rigidly attached to the jaw.
    pub jaw_region: Vec<usize>,
    pub jaw_hinge_point: Point3<f64>,
    pub jaw_hinge_axis: Unit<Vector3<f64>>,
    /// Maximum jaw angle (radians).
    pub jaw_max: f64,
    /// Ordered vertex indices of the L landmarks.
    pub landmark_indices: Vec<usize>,
    pub mouth: MouthLayout,
}

impl HeadTemplate {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn expression_dim(&self) -> usize {
        self.expression_basis.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_indices.len()
    }

    /// Checks the structural invariants of the template.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for field in self.shape_basis.iter().chain(self.expression_basis.iter()) {
            if field.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "basis field has {} entries, template has {} vertices",
                    field.len(),
                    n
                )));
            }
            if field.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
                return Err(Error::Config("non-finite basis entry".into()));
            }
        }
        if self.vertices.iter().any(|v| !v.coords.iter().all(|x| x.is_finite())) {
            return Err(Error::Config("non-finite template vertex".into()));
        }
        if self.jaw_region.iter().any(|&i| i >= n) {
            return Err(Error::Config("jaw_region index out of range".into()));
        }
        if self.landmark_indices.iter().any(|&i| i >= n) {
            return Err(Error::Config("landmark index out of range".into()));
        }
        let l = self.landmark_indices.len();
        if self.mouth.all.iter().any(|&i| i >= l) {
            return Err(Error::Config("mouth landmark position out of range".into()));
        }
        for &(u, lo) in &self.mouth.pairs {
            if !self.mouth.all.contains(&u) || !self.mouth.all.contains(&lo) {
                return Err(Error::Config("aperture pair outside mouth landmark set".into()));
            }
            // lower-lip landmarks must articulate with the jaw, upper must not
            let uv = self.landmark_indices[u];
            let lv = self.landmark_indices[lo];
            if self.jaw_region.contains(&uv) {
                return Err(Error::Config(format!(
                    "upper-lip landmark {u} is in the jaw region"
                )));
            }
            if !self.jaw_region.contains(&lv) {
                return Err(Error::Config(format!(
                    "lower-lip landmark {lo} is not in the jaw region"
                )));
            }
        }
        if !(self.jaw_max > 0.0 && self.jaw_max.is_finite()) {
            return Err(Error::Config("jaw_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    /// Jaw opening angle, radians in [0, jaw_max].
    pub jaw_angle: f64,
    /// Head pose: world-from-head rigid transform (mm).
    pub pose: Iso3,
}

impl HeadParams {
    /// Neutral parameters for the given template.
    pub fn neutral(template: &HeadTemplate) -> Self {
        HeadParams {
            shape: vec![0.0; template.shape_dim()],
            expression: vec![0.0; template.expression_dim()],
            jaw_angle: 0.0,
            pose: Iso3::identity(),
        }
    }

    pub fn validate(&self, template: &HeadTemplate) -> Result<()> {
        if self.shape.len() != template.shape_dim() {
            return Err(Error::DimensionMismatch(format!(
                "shape has {} coefficients, template expects {}",
                self.shape.len(),
                template.shape_dim()
            )));
        }
        if self.expression.len() != template.expression_dim() {
            return Err(Error::DimensionMismatch(format!(
                "expression has {} coefficients, template expects {}",
                self.expression.len(),
                template.expression_dim()
            )));
        }
        if !(0.0..=template.jaw_max).contains(&self.jaw_angle) {
            return Err(Error::Config(format!(
                "jaw_angle {} outside [0, {}]",
                self.jaw_angle, template.jaw_max
            )));
        }
        let m = self.pose.rotation.to_rotation_matrix();
        if !crate::geom::is_proper_rotation(m.matrix(), 1e-9) {
            return Err(Error::Config("pose rotation is not a proper rotation".into()));
        }
        Ok(())
    }
}

/// Rigid mouth frame plus aperture, the perception pipeline's output.
#[derive(Debug, Clone)]
pub struct MouthPose {
    /// World-from-mouth frame. Origin at the lip centroid, x toward the right
    /// mouth corner, z along the outward lip-plane normal.
    pub frame: Iso3,
    /// Mean upper-to-lower lip pair distance (mm).
    pub aperture: f64,
    pub open: bool,
    pub timestamp: f64,
}

impl MouthPose {
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.frame.translation.vector)
    }

    pub fn outward_normal(&self) -> Vector3<f64> {
        self.frame.rotation * Vector3::z()
    }
}

/// Evaluates the blendshape model at the given parameters and returns the L
/// landmark points in world frame (mm).
pub fn synthesize(template: &HeadTemplate, params: &HeadParams) -> Result<Vec<Point3<f64>>> {
    let verts = synthesize_vertices(template, params)?;
    Ok(template.landmark_indices.iter().map(|&i| verts[i]).collect())
}

/// Full-vertex variant of [`synthesize`].
pub fn synthesize_vertices(template: &HeadTemplate, params: &HeadParams) -> Result<Vec<Point3<f64>>> {
    params.validate(template)?;
    let n = template.vertex_count();
    let mut verts: Vec<Point3<f64>> = template.vertices.clone();
    for (field, &c) in template.shape_basis.iter().zip(params.shape.iter()) {
        for i in 0..n {
            verts[i] += field[i] * c;
        }
    }
    for (field, &c) in template.expression_basis.iter().zip(params.expression.iter()) {
        for i in 0..n {
            verts[i] += field[i] * c;
        }
    }
    if params.jaw_angle != 0.0 {
        let rot = Rotation3::from_axis_angle(&template.jaw_hinge_axis, params.jaw_angle);
        for &i in &template.jaw_region {
            let rel = verts[i] - template.jaw_hinge_point;
            verts[i] = template.jaw_hinge_point + rot * rel;
        }
    }
    for v in &mut verts {
        *v = params.pose * *v;
    }
    Ok(verts)
}

/// Derives the mouth frame, aperture and open flag from an ordered landmark
/// set. All keypoints are assumed valid; see [`mouth_state_masked`] for the
/// partial-validity variant used by depth-lifted observations.
pub fn mouth_state(
    keypoints: &[Point3<f64>],
    template: &HeadTemplate,
    open_threshold_mm: f64,
    timestamp: f64,
) -> Result<MouthPose> {
    let valid = vec![true; keypoints.len()];
    mouth_state_masked(keypoints, &valid, template, open_threshold_mm, timestamp)
}

/// [`mouth_state`] over keypoints with a validity mask (invalid entries are
/// ignored). Fails with a degenerate-geometry error when fewer than 3 valid
/// mouth keypoints remain or the valid lip points are collinear.
pub fn mouth_state_masked(
    keypoints: &[Point3<f64>],
    valid: &[bool],
    template: &HeadTemplate,
    open_threshold_mm: f64,
    timestamp: f64,
) -> Result<MouthPose> {
    let l = template.landmark_count();
    if keypoints.len() != l || valid.len() != l {
        return Err(Error::DimensionMismatch(format!(
            "expected {} keypoints, got {} (mask {})",
            l,
            keypoints.len(),
            valid.len()
        )));
    }
    let mouth_pts: Vec<Point3<f64>> = template
        .mouth
        .all
        .iter()
        .filter(|&&i| valid[i])
        .map(|&i| keypoints[i])
        .collect();
    if mouth_pts.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "only {} valid mouth keypoints",
            mouth_pts.len()
        )));
    }
    let origin = centroid(&mouth_pts);

    // Best-fit plane normal: smallest-eigenvalue direction of the lip scatter.
    let mut cov = Matrix3::zeros();
    for p in &mouth_pts {
        let d = p - origin;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut min_i = 0;
    let mut mid = f64::INFINITY;
    for i in 0..3 {
        if eig.eigenvalues[i] < mid {
            mid = eig.eigenvalues[i];
            min_i = i;
        }
    }
    // Collinear lip points: the two smallest eigenvalues both ~0 relative to
    // the largest.
    let mut evs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if evs[2] <= 0.0 || evs[1] / evs[2] < 1e-10 {
        return Err(Error::DegenerateGeometry("mouth keypoints are collinear".into()));
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(min_i).into();
    normal.normalize_mut();

    // Orient the normal outward: away from the centroid of all valid keypoints.
    let all_pts: Vec<Point3<f64>> = keypoints
        .iter()
        .zip(valid.iter())
        .filter(|(_, &v)| v)
        .map(|(p, _)| *p)
        .collect();
    let face_c = centroid(&all_pts);
    if normal.dot(&(origin - face_c)) < 0.0 {
        normal = -normal;
    }

    // x axis: toward the right mouth corner, projected into the lip plane.
    let corner_dir = if valid[template.mouth.right_corner] {
        keypoints[template.mouth.right_corner] - origin
    } else if valid[template.mouth.left_corner] {
        origin - keypoints[template.mouth.left_corner]
    } else {
        // fall back to the largest-eigenvalue direction
        let mut max_i = 0;
        let mut best = -f64::INFINITY;
        for i in 0..3 {
            if eig.eigenvalues[i] > best {
                best = eig.eigenvalues[i];
                max_i = i;
            }
        }
        eig.eigenvectors.column(max_i).into()
    };
    let mut x_axis = corner_dir - normal * corner_dir.dot(&normal);
    let xn = x_axis.norm();
    if xn < 1e-9 {
        return Err(Error::DegenerateGeometry("mouth corner coincides with centroid".into()));
    }
    x_axis /= xn;
    let y_axis = normal.cross(&x_axis);
    let rot_m = Matrix3::from_columns(&[x_axis, y_axis, normal]);
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot_m));

    // Aperture: mean distance over upper/lower pairs with both ends valid.
    let mut sum = 0.0;
    let mut count = 0usize;
    for &(u, lo) in &template.mouth.pairs {
        if valid[u] && valid[lo] {
            sum += (keypoints[u] - keypoints[lo]).norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateGeometry("no valid aperture pair".into()));
    }
    let aperture = sum / count as f64;

    Ok(MouthPose {
        frame: Iso3::from_parts(origin.coords.into(), rotation),
        aperture,
        open: aperture > open_threshold_mm,
        timestamp,
    })
}

const DEFAULT_TEMPLATE_SEED: u64 = 0xB17E_5EED;

/// The default procedural template: an ellipsoidal head with a standard
/// 68-landmark layout and deterministically generated smooth basis fields.
pub fn default_template() -> HeadTemplate {
    procedural_template(DEFAULT_TEMPLATE_SEED)
}

/// Builds the procedural template. The same seed always yields the same
/// template, bit for bit.
pub fn procedural_template(seed: u64) -> HeadTemplate {
    let mut verts: Vec<Point3<f64>> = Vec::with_capacity(200);

    // 0-16 jawline: right ear -> chin -> left ear.
    for i in 0..17 {
        let th = std::f64::consts::PI * i as f64 / 16.0;
        verts.push(Point3::new(
            75.0 * th.cos(),
            -40.0 - 55.0 * th.sin(),
            10.0 + 20.0 * th.sin(),
        ));
    }
    // 17-26 brows.
    for i in 0..5 {
        verts.push(Point3::new(55.0 - 10.0 * i as f64, 35.0, 52.0 + 3.0 * (i as f64 * 0.8).sin()));
    }
    for i in 0..5 {
        verts.push(Point3::new(-15.0 - 10.0 * i as f64, 35.0, 52.0 + 3.0 * ((4 - i) as f64 * 0.8).sin()));
    }
    // 27-30 nose bridge, 31-35 nostril line.
    for i in 0..4 {
        verts.push(Point3::new(0.0, 25.0 - 10.0 * i as f64, 60.0 + 5.0 * i as f64));
    }
    for i in 0..5 {
        verts.push(Point3::new(-14.0 + 7.0 * i as f64, -12.0, 66.0));
    }
    // 36-41 right eye, 42-47 left eye.
    let eye = |cx: f64| -> Vec<Point3<f64>> {
        let rx = 12.0;
        let ry = 5.0;
        (0..6)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 6.0;
                Point3::new(cx + rx * a.cos(), 22.0 + ry * a.sin(), 50.0)
            })
            .collect()
    };
    verts.extend(eye(32.0));
    verts.extend(eye(-32.0));
    // 48-59 outer lip loop, 60-67 inner lip loop. Upper lip y = -33.5 (outer)
    // / -34 (inner); lower lip y = -35.5 / -36: closed aperture ~2 mm.
    verts.push(Point3::new(30.0, -35.0, 58.0)); // 48 right corner
    for i in 0..5 {
        verts.push(Point3::new(20.0 - 10.0 * i as f64, -33.5, 63.0 + 2.0 * (1.0 - (i as f64 - 2.0).abs() / 2.0)));
    }
    verts.push(Point3::new(-30.0, -35.0, 58.0)); // 54 left corner
    for i in 0..5 {
        verts.push(Point3::new(-20.0 + 10.0 * i as f64, -35.5, 63.0 + 2.0 * (1.0 - (i as f64 - 2.0).abs() / 2.0)));
    }
    verts.push(Point3::new(25.0, -34.75, 60.0)); // 60 inner right corner
    for i in 0..3 {
        verts.push(Point3::new(12.0 - 12.0 * i as f64, -34.0, 65.0));
    }
    verts.push(Point3::new(-25.0, -34.75, 60.0)); // 64 inner left corner
    for i in 0..3 {
        verts.push(Point3::new(-12.0 + 12.0 * i as f64, -36.0, 65.0));
    }
    debug_assert_eq!(verts.len(), 68);

    // 68-199 filler vertices on an ellipsoid, deterministic spiral sampling.
    let n_fill = 132;
    for k in 0..n_fill {
        let t = (k as f64 + 0.5) / n_fill as f64;
        let phi = (1.0 - 2.0 * t).acos();
        let theta = std::f64::consts::PI * (1.0 + 5f64.sqrt()) * k as f64;
        verts.push(Point3::new(
            75.0 * phi.sin() * theta.cos(),
            -10.0 + 95.0 * phi.cos(),
            -5.0 + 75.0 * phi.sin() * theta.sin(),
        ));
    }

    let landmark_indices: Vec<usize> = (0..68).collect();

    // Jaw region: chin jawline, lower lip, and lower-front filler vertices.
    let mut jaw_region: Vec<usize> = vec![5, 6, 7, 8, 9, 10, 11];
    jaw_region.extend(55..60);
    jaw_region.extend(65..68);
    for (i, v) in verts.iter().enumerate().skip(68) {
        if v.y < -50.0 && v.z > -10.0 {
            jaw_region.push(i);
        }
    }

    let mouth = MouthLayout {
        all: (48..68).collect(),
        pairs: vec![
            (49, 59),
            (50, 58),
            (51, 57),
            (52, 56),
            (53, 55),
            (61, 67),
            (62, 66),
            (63, 65),
        ],
        right_corner: 48,
        left_corner: 54,
    };

    // Smooth low-frequency random displacement fields. Expression fields are
    // amplified around the mouth.
    let mouth_center = Point3::new(0.0, -34.75, 62.0);
    let gen_field = |rng: &mut ChaCha8Rng, amp: f64, mouth_gain: f64, verts: &[Point3<f64>]| {
        let mut waves = Vec::new();
        for _ in 0..3 {
            let omega = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) / 60.0;
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            waves.push((omega, phase, dir));
        }
        verts
            .iter()
            .map(|v| {
                let mut d = Vector3::zeros();
                for (omega, phase, dir) in &waves {
                    d += dir * (v.coords.dot(omega) + phase).sin();
                }
                let near_mouth = ((-((v - mouth_center).norm_squared()) / (2.0 * 40.0 * 40.0)).exp()
                    * (mouth_gain - 1.0))
                    + 1.0;
                d * amp * near_mouth / 3.0
            })
            .collect::<Vec<_>>()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape_basis: Vec<Vec<Vector3<f64>>> =
        (0..10).map(|_| gen_field(&mut rng, 2.0, 1.0, &verts)).collect();
    let expression_basis: Vec<Vec<Vector3<f64>>> =
        (0..5).map(|_| gen_field(&mut rng, 1.5, 2.0, &verts)).collect();

    let t = HeadTemplate {
        vertices: verts,
        shape_basis,
        expression_basis,
        jaw_region,
        jaw_hinge_point: Point3::new(0.0, -15.0, 5.0),
        jaw_hinge_axis: Unit::new_normalize(Vector3::x()),
        jaw_max: 0.5,
        landmark_indices,
        mouth,
    };
    t.validate().expect("procedural template must satisfy its invariants");
    t
}

// --- template file format -------------------------------------------------
//
// Versioned whitespace text: header line `headmodel-v1`, then
//   N S E L jaw_max
//   3N vertex floats
//   S*N*3 shape-basis floats
//   E*N*3 expression-basis floats
//   jaw-region count + indices
//   hinge point (3) + hinge axis (3)
//   L landmark indices
//   mouth: count + positions, pair count + pairs, right corner, left corner

impl HeadTemplate {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{TEMPLATE_FORMAT}")?;
        writeln!(
            w,
            "{} {} {} {} {}",
            self.vertex_count(),
            self.shape_dim(),
            self.expression_dim(),
            self.landmark_count(),
            self.jaw_max
        )?;
        for v in &self.vertices {
            writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
        }
        for field in self.shape_basis.iter().chain(self.expression_basis.iter()) {
            for d in field {
                writeln!(w, "{} {} {}", d.x, d.y, d.z)?;
            }
        }
        write!(w, "{}", self.jaw_region.len())?;
        for i in &self.jaw_region {
            write!(w, " {i}")?;
        }
        writeln!(w)?;
        let h = &self.jaw_hinge_point;
        let a = &self.jaw_hinge_axis;
        writeln!(w, "{} {} {} {} {} {}", h.x, h.y, h.z, a.x, a.y, a.z)?;
        for i in &self.landmark_indices {
            write!(w, "{i} ")?;
        }
        writeln!(w)?;
        write!(w, "{}", self.mouth.all.len())?;
        for i in &self.mouth.all {
            write!(w, " {i}")?;
        }
        writeln!(w)?;
        write!(w, "{}", self.mouth.pairs.len())?;
        for (u, l) in &self.mouth.pairs {
            write!(w, " {u} {l}")?;
        }
        writeln!(w)?;
        writeln!(w, "{} {}", self.mouth.right_corner, self.mouth.left_corner)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R, path: &str) -> Result<HeadTemplate> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut toks = text.split_whitespace();
        let perr = |msg: &str| Error::Parse { path: path.to_string(), msg: msg.to_string() };
        let header = toks.next().ok_or_else(|| perr("empty file"))?;
        if header != TEMPLATE_FORMAT {
            return Err(perr(&format!("bad header `{header}`, expected `{TEMPLATE_FORMAT}`")));
        }
        let next_usize = |toks: &mut std::str::SplitWhitespace| -> Result<usize> {
            toks.next()
                .ok_or_else(|| perr("unexpected end of file"))?
                .parse()
                .map_err(|e| perr(&format!("bad integer: {e}")))
        };
        let n = next_usize(&mut toks)?;
        let s = next_usize(&mut toks)?;
        let e = next_usize(&mut toks)?;
        let l = next_usize(&mut toks)?;
        let next_f64 = |toks: &mut std::str::SplitWhitespace| -> Result<f64> {
            toks.next()
                .ok_or_else(|| perr("unexpected end of file"))?
                .parse()
                .map_err(|e| perr(&format!("bad float: {e}")))
        };
        let jaw_max = next_f64(&mut toks)?;
        let mut vertices = Vec::with_capacity(n);
        for _ in 0..n {
            vertices.push(Point3::new(
                next_f64(&mut toks)?,
                next_f64(&mut toks)?,
                next_f64(&mut toks)?,
            ));
        }
        let read_basis = |count: usize, toks: &mut std::str::SplitWhitespace| -> Result<Vec<Vec<Vector3<f64>>>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let mut field = Vec::with_capacity(n);
                for _ in 0..n {
                    field.push(Vector3::new(
                        next_f64(toks)?,
                        next_f64(toks)?,
                        next_f64(toks)?,
                    ));
                }
                out.push(field);
            }
            Ok(out)
        };
        let shape_basis = read_basis(s, &mut toks)?;
        let expression_basis = read_basis(e, &mut toks)?;
        let jr_count = next_usize(&mut toks)?;
        let mut jaw_region = Vec::with_capacity(jr_count);
        for _ in 0..jr_count {
            jaw_region.push(next_usize(&mut toks)?);
        }
        let jaw_hinge_point = Point3::new(
            next_f64(&mut toks)?,
            next_f64(&mut toks)?,
            next_f64(&mut toks)?,
        );
        let jaw_hinge_axis = Unit::new_normalize(Vector3::new(
            next_f64(&mut toks)?,
            next_f64(&mut toks)?,
            next_f64(&mut toks)?,
        ));
        let mut landmark_indices = Vec::with_capacity(l);
        for _ in 0..l {
            landmark_indices.push(next_usize(&mut toks)?);
        }
        let m_count = next_usize(&mut toks)?;
        let mut all = Vec::with_capacity(m_count);
        for _ in 0..m_count {
            all.push(next_usize(&mut toks)?);
        }
        let p_count = next_usize(&mut toks)?;
        let mut pairs = Vec::with_capacity(p_count);
        for _ in 0..p_count {
            pairs.push((next_usize(&mut toks)?, next_usize(&mut toks)?));
        }
        let right_corner = next_usize(&mut toks)?;
        let left_corner = next_usize(&mut toks)?;
        let t = HeadTemplate {
            vertices,
            shape_basis,
            expression_basis,
            jaw_region,
            jaw_hinge_point,
            jaw_hinge_axis,
            jaw_max,
            landmark_indices,
            mouth: MouthLayout { all, pairs, right_corner, left_corner },
        };
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<HeadTemplate> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        HeadTemplate::read_from(&mut f, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Translation3;

    fn aperture_at(template: &HeadTemplate, jaw: f64) -> f64 {
        let mut p = HeadParams::neutral(template);
        p.jaw_angle = jaw;
        let kps = synthesize(template, &p).unwrap();
        mouth_state(&kps, template, DEFAULT_OPEN_THRESHOLD_MM, 0.0)
            .unwrap()
            .aperture
    }

    #[test]
    fn identity_params_return_template_landmarks() {
        let t = default_template();
        let kps = synthesize(&t, &HeadParams::neutral(&t)).unwrap();
        for (k, &i) in kps.iter().zip(t.landmark_indices.iter()) {
            assert_eq!(*k, t.vertices[i]);
        }
    }

    #[test]
    fn pure_translation_shifts_every_landmark() {
        let t = default_template();
        let mut p = HeadParams::neutral(&t);
        let base = synthesize(&t, &p).unwrap();
        let shift = Vector3::new(12.5, -3.0, 40.0);
        p.pose = Iso3::from_parts(Translation3::from(shift), UnitQuaternion::identity());
        let moved = synthesize(&t, &p).unwrap();
        for (a, b) in base.iter().zip(moved.iter()) {
            assert_relative_eq!(a + shift, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn aperture_monotone_in_jaw_angle() {
        let t = default_template();
        let mut last = -1.0;
        for k in 0..10 {
            let jaw = t.jaw_max * k as f64 / 9.0;
            let a = aperture_at(&t, jaw);
            assert!(a > last, "aperture {a} not increasing at jaw {jaw}");
            last = a;
        }
    }

    #[test]
    fn closed_and_open_flags_around_default_threshold() {
        let t = default_template();
        let closed = aperture_at(&t, 0.0);
        let open = aperture_at(&t, t.jaw_max);
        assert!(closed < 5.0, "closed aperture {closed}");
        assert!(open > 25.0, "open aperture {open}");
        let p = HeadParams::neutral(&t);
        let kps = synthesize(&t, &p).unwrap();
        assert!(!mouth_state(&kps, &t, DEFAULT_OPEN_THRESHOLD_MM, 0.0).unwrap().open);
        let mut po = p.clone();
        po.jaw_angle = t.jaw_max;
        let kps = synthesize(&t, &po).unwrap();
        assert!(mouth_state(&kps, &t, DEFAULT_OPEN_THRESHOLD_MM, 0.0).unwrap().open);
    }

    #[test]
    fn mouth_state_rigid_invariance() {
        let t = default_template();
        let mut p = HeadParams::neutral(&t);
        p.jaw_angle = 0.3;
        p.shape = (0..t.shape_dim()).map(|i| 0.3 * (i as f64 - 4.0)).collect();
        let kps = synthesize(&t, &p).unwrap();
        let m0 = mouth_state(&kps, &t, DEFAULT_OPEN_THRESHOLD_MM, 0.0).unwrap();

        let xf = Iso3::from_parts(
            Translation3::new(30.0, -14.0, 200.0),
            UnitQuaternion::from_euler_angles(0.3, -0.8, 1.1),
        );
        let moved: Vec<_> = kps.iter().map(|k| xf * k).collect();
        let m1 = mouth_state(&moved, &t, DEFAULT_OPEN_THRESHOLD_MM, 0.0).unwrap();

        assert_relative_eq!(m1.aperture, m0.aperture, epsilon = 1e-6);
        let expected = xf * m0.frame;
        assert!((m1.frame.translation.vector - expected.translation.vector).norm() < 1e-6);
        assert!(crate::geom::rotation_angle_between(&m1.frame.rotation, &expected.rotation) < 1e-6);
    }

    #[test]
    fn synthesize_linear_in_coefficients() {
        let t = default_template();
        let mk = |scale: f64, off: f64| {
            let mut p = HeadParams::neutral(&t);
            p.shape = (0..t.shape_dim()).map(|i| scale * (i as f64 * 0.17 - off)).collect();
            p.expression = (0..t.expression_dim()).map(|i| scale * (0.3 - i as f64 * 0.1)).collect();
            p
        };
        let p1 = mk(1.0, 0.4);
        let p2 = mk(-0.7, 0.1);
        let (a, b) = (0.6, 1.3);
        let mut pc = HeadParams::neutral(&t);
        for i in 0..t.shape_dim() {
            pc.shape[i] = a * p1.shape[i] + b * p2.shape[i];
        }
        for i in 0..t.expression_dim() {
            pc.expression[i] = a * p1.expression[i] + b * p2.expression[i];
        }
        let y1 = synthesize(&t, &p1).unwrap();
        let y2 = synthesize(&t, &p2).unwrap();
        let yc = synthesize(&t, &pc).unwrap();
        let y0 = synthesize(&t, &HeadParams::neutral(&t)).unwrap();
        for i in 0..yc.len() {
            let expect = y1[i].coords * a + y2[i].coords * b - y0[i].coords * (a + b - 1.0);
            assert_relative_eq!(yc[i].coords, expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let t = default_template();
        let mut p = HeadParams::neutral(&t);
        p.shape.push(1.0);
        assert!(matches!(synthesize(&t, &p), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn jaw_angle_out_of_range_rejected() {
        let t = default_template();
        let mut p = HeadParams::neutral(&t);
        p.jaw_angle = t.jaw_max + 0.01;
        assert!(synthesize(&t, &p).is_err());
    }

    #[test]
    fn degenerate_mouth_error() {
        let t = default_template();
        let kps = synthesize(&t, &HeadParams::neutral(&t)).unwrap();
        let mut valid = vec![true; kps.len()];
        for &i in &t.mouth.all {
            valid[i] = false;
        }
        valid[t.mouth.all[0]] = true;
        valid[t.mouth.all[1]] = true;
        let r = mouth_state_masked(&kps, &valid, &t, DEFAULT_OPEN_THRESHOLD_MM, 0.0);
        assert!(matches!(r, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn template_file_roundtrip() {
        let t = default_template();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let t2 = HeadTemplate::read_from(&mut std::io::Cursor::new(&buf), "mem").unwrap();
        assert_eq!(t.vertices, t2.vertices);
        assert_eq!(t.jaw_region, t2.jaw_region);
        assert_eq!(t.mouth, t2.mouth);
        assert_eq!(t.jaw_max, t2.jaw_max);
        for (a, b) in t.shape_basis.iter().zip(t2.shape_basis.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn procedural_template_deterministic() {
        let a = procedural_template(7);
        let b = procedural_template(7);
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.shape_basis, b.shape_basis);
    }
}
