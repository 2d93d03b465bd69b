//! Synthetic scenes with exact ground truth, plus the pose metrics used to
//! score reconstructions.
//!
//! Cameras sit on a ring around a body proxy and look at it. Surface maps
//! are rendered by first-hit ray casting, and each image's prior is the
//! ground-truth mesh moved into that camera's frame, optionally perturbed.

use std::path::PathBuf;

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    look_at, project, ray_through_pixel, rotation_angle, CameraIntrinsics, GeometryError, Pixel,
    Se3Pose, Vec3,
};
use crate::mesh::{first_hit, load_mesh, ray_mesh_all_hits, MeshError, SurfaceCoordinate, SurfaceHit, TriangleMesh};
use crate::vc::{DenseSurfaceMap, ImageRecord, SubjectPrior, VcError, VcSource, VirtualCorrespondence};

/// Person identifier given to the single subject of generated scenes.
pub const SUBJECT: &str = "person0";

/// Hits within this distance of each other count as the same surface point.
const SAME_POINT: f64 = 1e-7;
/// Keypoints are not matched on surface seen closer than this to edge-on.
pub const MAX_MATCH_INCIDENCE: f64 = 80.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Vc(#[from] VcError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    /// A baseline is too short to define a direction; the rotation error is kept.
    #[error("translation direction undefined (rotation error {rotation}°)")]
    UndefinedTranslation { rotation: f64 },
    #[error("empty error list")]
    EmptyInput,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    Builtin,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub mesh: MeshSource,
    /// Azimuth of each camera around the subject, degrees. One camera per entry.
    pub angles: Vec<f64>,
    /// Camera elevations are drawn uniformly from this range, degrees.
    pub elevation: (f64, f64),
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Distance from the cameras to the look-at target.
    pub distance: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            mesh: MeshSource::Builtin,
            angles: vec![0.0, 180.0],
            elevation: (0.0, 10.0),
            width: 200,
            height: 150,
            focal: 180.0,
            distance: 3.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn with_angles(angles: &[f64]) -> Self {
        Self {
            angles: angles.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.angles.len() < 2 {
            return bad(format!("{} cameras, need at least 2", self.angles.len()));
        }
        if let Some(a) = self.angles.iter().find(|a| !(0.0..360.0).contains(*a)) {
            return bad(format!("angle {a} outside [0, 360)"));
        }
        let (lo, hi) = self.elevation;
        if !(lo <= hi && lo > -90.0 && hi < 90.0) {
            return bad(format!("elevation range ({lo}, {hi})"));
        }
        if self.width == 0 || self.height == 0 {
            return bad("empty image".into());
        }
        if !(self.focal > 0.0 && self.distance > 0.0) {
            return bad("focal length and distance must be positive".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::simple(
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
        .expect("validated focal length")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseConfig {
    /// Pixel noise of the surface maps: each pixel reports the surface seen
    /// through a jittered ray.
    pub pixel_sigma: f64,
    /// Prior mesh perturbations: rotation (degrees) about the mesh centroid,
    /// translation as a fraction of the centroid depth, and scale fraction.
    pub prior_rotation_sigma: f64,
    pub prior_translation_sigma: f64,
    pub prior_scale_sigma: f64,
    /// Fraction of map entries replaced by random surface coordinates.
    pub outlier_fraction: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let all = [
            self.pixel_sigma,
            self.prior_rotation_sigma,
            self.prior_translation_sigma,
            self.prior_scale_sigma,
            self.outlier_fraction,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SynthError::InvalidConfig("noise levels must be finite and ≥ 0".into()));
        }
        if self.outlier_fraction >= 1.0 {
            return Err(SynthError::InvalidConfig("outlier fraction must be < 1".into()));
        }
        Ok(())
    }
}

/// A ground-truth virtual correspondence between two generated cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleVc {
    pub cam_a: usize,
    pub cam_b: usize,
    pub vc: VirtualCorrespondence,
    /// World point where both rays meet.
    pub point: Vec3,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub noise: NoiseConfig,
    pub mesh: TriangleMesh,
    pub gt_poses: Vec<Se3Pose>,
    pub records: Vec<ImageRecord>,
    pub oracle: Vec<OracleVc>,
}

/// Pixel stride of the ground-truth VC oracle.
pub const ORACLE_STRIDE: usize = 4;

/// Renders a scene and its oracle. Output depends only on the configs.
pub fn generate_scene(scene: &SceneConfig, noise: &NoiseConfig) -> Result<SyntheticScene, SynthError> {
    scene.validate()?;
    noise.validate()?;
    let mesh = match &scene.mesh {
        MeshSource::Builtin => body_proxy(),
        MeshSource::File(p) => load_mesh(p)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let target = mesh_center(&mesh);
    let gt_poses = scene
        .angles
        .iter()
        .map(|&az| {
            let (lo, hi) = scene.elevation;
            let el = if hi > lo { rng.random_range(lo..hi) } else { lo };
            ring_pose(&target, scene.distance, az, el)
        })
        .collect::<Vec<_>>();
    let k = scene.intrinsics();
    let mut records = Vec::with_capacity(gt_poses.len());
    for (cam, pose) in gt_poses.iter().enumerate() {
        let map = render_map(&mesh, pose, &k, scene, noise, cam)?;
        let camera_mesh = mesh.map_vertices(|v| pose.transform(v))?;
        let prior_mesh = perturb_prior(&camera_mesh, noise, &mut rng)?;
        records.push(ImageRecord::new(
            format!("img{cam}"),
            k,
            scene.width,
            scene.height,
            vec![SubjectPrior::new(SUBJECT, map, prior_mesh)],
        )?);
    }
    let mut out = SyntheticScene {
        config: scene.clone(),
        noise: *noise,
        mesh,
        gt_poses,
        records,
        oracle: Vec::new(),
    };
    let n = out.gt_poses.len();
    out.oracle = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .flat_map(|(i, j)| gt_vc_oracle(&out, i, j, ORACLE_STRIDE))
        .collect();
    Ok(out)
}

fn mesh_center(mesh: &TriangleMesh) -> Vec3 {
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for v in mesh.vertices() {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    (lo + hi) / 2.0
}

/// Camera at azimuth `az` (about +y, 0° on +z) and elevation `el`, looking at `target`.
pub fn ring_pose(target: &Vec3, distance: f64, az: f64, el: f64) -> Se3Pose {
    let (az, el) = (az.to_radians(), el.to_radians());
    let dir = Vec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos());
    look_at(&(target + dir * distance), target, &Vec3::y()).expect("camera off the target")
}

fn render_map(
    mesh: &TriangleMesh,
    pose: &Se3Pose,
    k: &CameraIntrinsics,
    scene: &SceneConfig,
    noise: &NoiseConfig,
    cam: usize,
) -> Result<DenseSurfaceMap, SynthError> {
    let jitter = Normal::new(0.0, noise.pixel_sigma).expect("validated sigma");
    let n_faces = mesh.faces().len();
    let rows: Vec<Vec<Option<SurfaceCoordinate>>> = (0..scene.height)
        .into_par_iter()
        .map(|v| {
            let mut rng = row_rng(scene.seed, cam, v);
            (0..scene.width)
                .map(|u| {
                    let mut p = Pixel::new(u as f64, v as f64);
                    if noise.pixel_sigma > 0.0 {
                        p.u += jitter.sample(&mut rng);
                        p.v += jitter.sample(&mut rng);
                    }
                    let hit = first_hit(mesh, &ray_through_pixel(pose, k, p))?;
                    if noise.outlier_fraction > 0.0 && rng.random_bool(noise.outlier_fraction) {
                        return Some(random_coordinate(&mut rng, n_faces));
                    }
                    Some(hit.coord)
                })
                .collect()
        })
        .collect();
    let mut map = DenseSurfaceMap::new(scene.width, scene.height);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, c) in row.into_iter().enumerate() {
            map.set(u, v, c);
        }
    }
    Ok(map)
}

fn row_rng(seed: u64, cam: usize, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((cam as u64) << 32) | row as u64);
    rng
}

fn random_coordinate(rng: &mut impl Rng, n_faces: usize) -> SurfaceCoordinate {
    let (mut s, mut t) = (rng.random::<f64>(), rng.random::<f64>());
    if s > t {
        std::mem::swap(&mut s, &mut t);
    }
    SurfaceCoordinate::new(rng.random_range(0..n_faces), [s, t - s, 1.0 - t])
        .expect("weights on the simplex")
}

/// Rotates about the centroid, rescales about it, then shifts it.
fn perturb_prior(
    mesh: &TriangleMesh,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<TriangleMesh, SynthError> {
    let std = |s: f64, rng: &mut dyn rand::RngCore| {
        if s > 0.0 {
            Normal::new(0.0, s).expect("validated sigma").sample(rng)
        } else {
            0.0
        }
    };
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = std(noise.prior_rotation_sigma, rng).to_radians();
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::from(axis)), angle);
    let scale = 1.0 + std(noise.prior_scale_sigma, rng);
    let c = mesh.centroid();
    // Monocular shape regression is mostly wrong about depth, so the shift
    // runs along the viewing ray through the centroid.
    let shift = c * std(noise.prior_translation_sigma, rng);
    if noise.prior_rotation_sigma == 0.0 && noise.prior_scale_sigma == 0.0 && shift == Vec3::zeros() {
        return Ok(mesh.clone());
    }
    Ok(mesh.map_vertices(|v| c + shift + rot * (v - c) * scale)?)
}

/// Ground-truth VCs between cameras `i` and `j`: every crossing of a sampled
/// foreground ray with the true surface that the other camera sees directly.
/// Both casting directions are included.
pub fn gt_vc_oracle(scene: &SyntheticScene, i: usize, j: usize, stride: usize) -> Vec<OracleVc> {
    let mut out = oracle_direction(scene, i, j, stride, usize::MAX, None);
    for o in oracle_direction(scene, j, i, stride, usize::MAX, None) {
        out.push(OracleVc {
            cam_a: i,
            cam_b: j,
            vc: VirtualCorrespondence {
                source: VcSource::B,
                ..o.vc.swapped()
            },
            point: o.point,
        });
    }
    out
}

/// Classic matches between `i` and `j`: sampled pixels of `i` whose visible
/// surface point is also visible in `j`, within [`MAX_MATCH_INCIDENCE`] of
/// the surface normal in both views.
pub fn covisible_matches(scene: &SyntheticScene, i: usize, j: usize, stride: usize) -> Vec<(Pixel, Pixel)> {
    oracle_direction(scene, i, j, stride, 1, Some(MAX_MATCH_INCIDENCE))
        .into_iter()
        .map(|o| (o.vc.pixel_a, o.vc.pixel_b))
        .collect()
}

/// Co-visible matches as a keypoint matcher would report them: both pixels
/// jittered by the scene's pixel noise. Deterministic in the scene seed.
pub fn classic_matches(scene: &SyntheticScene, i: usize, j: usize, stride: usize) -> Vec<(Pixel, Pixel)> {
    let matches = covisible_matches(scene, i, j, stride);
    if scene.noise.pixel_sigma == 0.0 {
        return matches;
    }
    let jitter = Normal::new(0.0, scene.noise.pixel_sigma).expect("validated sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(scene.config.seed);
    rng.set_stream((1 << 63) | ((i as u64) << 32) | j as u64);
    let mut shake = |p: Pixel| Pixel::new(p.u + jitter.sample(&mut rng), p.v + jitter.sample(&mut rng));
    matches.into_iter().map(|(a, b)| (shake(a), shake(b))).collect()
}

/// Angle in degrees between the line of sight from `eye` and the face normal at `hit`.
fn incidence(mesh: &TriangleMesh, hit: &SurfaceHit, eye: &Vec3) -> f64 {
    let [a, b, c] = mesh.face_vertices(hit.coord.face);
    let n = (b - a).cross(&(c - a));
    let d = eye - hit.point;
    n.cross(&d).norm().atan2(n.dot(&d).abs()).to_degrees()
}

fn oracle_direction(
    scene: &SyntheticScene,
    caster: usize,
    observer: usize,
    stride: usize,
    max_hits: usize,
    max_incidence: Option<f64>,
) -> Vec<OracleVc> {
    let (pc, po) = (&scene.gt_poses[caster], &scene.gt_poses[observer]);
    let kc = scene.records[caster].intrinsics;
    let ko = scene.records[observer].intrinsics;
    let (w, h) = (scene.config.width as f64, scene.config.height as f64);
    let stride = stride.max(1);
    let mut out = Vec::new();
    for v in (0..scene.config.height).step_by(stride) {
        for u in (0..scene.config.width).step_by(stride) {
            let pa = Pixel::new(u as f64, v as f64);
            let hits = ray_mesh_all_hits(&scene.mesh, &ray_through_pixel(pc, &kc, pa));
            for (rank, hit) in hits.iter().take(max_hits).enumerate() {
                let Ok(pb) = project(po, &ko, &hit.point) else { continue };
                if !(pb.u >= 0.0 && pb.v >= 0.0 && pb.u <= w - 1.0 && pb.v <= h - 1.0) {
                    continue;
                }
                if let Some(limit) = max_incidence {
                    let grazing = |o: Vec3| incidence(&scene.mesh, hit, &o) > limit;
                    if grazing(pc.center()) || grazing(po.center()) {
                        continue;
                    }
                }
                let seen = first_hit(&scene.mesh, &ray_through_pixel(po, &ko, pb));
                if seen.is_some_and(|s| (s.point - hit.point).norm() < SAME_POINT) {
                    out.push(OracleVc {
                        cam_a: caster,
                        cam_b: observer,
                        vc: VirtualCorrespondence {
                            pixel_a: pa,
                            pixel_b: pb,
                            coord: Some(hit.coord),
                            hit_rank: rank,
                            source: VcSource::A,
                        },
                        point: hit.point,
                    });
                }
            }
        }
    }
    out
}

/// Closed, asymmetric union of capsules: torso, head, limbs in an
/// asymmetric stance, and a front lobe on +z. About 2000 faces, 1.8 units tall.
pub fn body_proxy() -> TriangleMesh {
    let parts: [(Vec3, Vec3, f64); 7] = [
        (Vec3::new(0.0, -0.2, 0.0), Vec3::new(0.0, 0.3, 0.0), 0.18),
        (Vec3::new(0.0, 0.6, 0.02), Vec3::new(0.0, 0.64, 0.03), 0.12),
        (Vec3::new(-0.25, 0.35, 0.0), Vec3::new(-0.45, -0.1, 0.12), 0.06),
        (Vec3::new(0.25, 0.35, 0.0), Vec3::new(0.55, 0.5, 0.05), 0.06),
        (Vec3::new(-0.1, -0.3, 0.0), Vec3::new(-0.12, -0.95, 0.0), 0.08),
        (Vec3::new(0.1, -0.3, 0.0), Vec3::new(0.15, -0.9, 0.1), 0.08),
        (Vec3::new(0.0, 0.1, 0.15), Vec3::new(0.02, 0.0, 0.22), 0.07),
    ];
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (p0, p1, r) in parts {
        capsule(&p0, &p1, r, 18, 4, &mut vertices, &mut faces);
    }
    TriangleMesh::new(vertices, faces).expect("valid proxy mesh")
}

/// Appends a capsule between `p0` and `p1` with `segments` around the axis
/// and `rings` latitude rings per hemisphere.
fn capsule(
    p0: &Vec3,
    p1: &Vec3,
    r: f64,
    segments: usize,
    rings: usize,
    vertices: &mut Vec<Vec3>,
    faces: &mut Vec<[usize; 3]>,
) {
    let axis = (p1 - p0).normalize();
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    let base = vertices.len();
    vertices.push(p0 - axis * r);
    let step = std::f64::consts::FRAC_PI_2 / rings as f64;
    // Latitudes from the bottom pole up to the top pole, poles excluded.
    let lats = (1..=rings)
        .map(|k| (p0, -std::f64::consts::FRAC_PI_2 + k as f64 * step))
        .chain((0..rings).map(|k| (p1, k as f64 * step)));
    for (center, phi) in lats {
        for s in 0..segments {
            let th = s as f64 * std::f64::consts::TAU / segments as f64;
            let radial = e1 * th.cos() + e2 * th.sin();
            vertices.push(center + radial * (r * phi.cos()) + axis * (r * phi.sin()));
        }
    }
    vertices.push(p1 + axis * r);
    let ring = |k: usize, s: usize| base + 1 + k * segments + s % segments;
    let n_rings = 2 * rings;
    let top = base + 1 + n_rings * segments;
    for s in 0..segments {
        faces.push([base, ring(0, s + 1), ring(0, s)]);
        for k in 0..n_rings - 1 {
            faces.push([ring(k, s), ring(k, s + 1), ring(k + 1, s + 1)]);
            faces.push([ring(k, s), ring(k + 1, s + 1), ring(k + 1, s)]);
        }
        faces.push([ring(n_rings - 1, s), ring(n_rings - 1, s + 1), top]);
    }
}

/// `max(rotation angle, translation-direction angle)` between two relative
/// poses, degrees.
pub fn pose_error(est: &Se3Pose, gt: &Se3Pose) -> Result<f64, MetricError> {
    let rotation = rotation_error(est, gt);
    if est.translation().norm() < 1e-9 || gt.translation().norm() < 1e-9 {
        return Err(MetricError::UndefinedTranslation { rotation });
    }
    Ok(rotation.max(translation_angle(est, gt)))
}

fn rotation_error(est: &Se3Pose, gt: &Se3Pose) -> f64 {
    rotation_angle(&(est.rotation() * gt.rotation().transpose())).to_degrees()
}

/// Normalized area under the step-wise cumulative recall curve of
/// `errors` on `[0, threshold]`, i.e. the mean of `max(0, 1 − e/threshold)`.
pub fn auc(errors: &[f64], threshold: f64) -> Result<f64, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if !(threshold > 0.0) {
        return Err(MetricError::InvalidInput(format!("threshold {threshold}")));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(MetricError::InvalidInput("errors must be ≥ 0".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let area: f64 = sorted.iter().map(|e| (threshold - e).max(0.0)).sum();
    Ok(area / (threshold * sorted.len() as f64))
}

/// Error of one camera pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub rotation: f64,
    /// `None` when either baseline is too short to define a direction.
    pub translation: Option<f64>,
    /// Combined error; 180° for pairs with an unregistered camera.
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseErrorReport {
    pub pairs: Vec<PairError>,
    /// `(threshold°, AUC)`, increasing thresholds.
    pub auc: Vec<(f64, f64)>,
}

pub const AUC_THRESHOLDS: [f64; 3] = [15.0, 30.0, 45.0];

impl PoseErrorReport {
    pub fn combined(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.combined).collect()
    }

    pub fn max_combined(&self) -> f64 {
        self.pairs.iter().map(|p| p.combined).fold(0.0, f64::max)
    }

    pub fn auc_at(&self, threshold: f64) -> Option<f64> {
        self.auc.iter().find(|(t, _)| *t == threshold).map(|(_, a)| *a)
    }

    /// `(error°, recall)` corners of the cumulative error curve.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        cumulative_curve(&self.combined())
    }
}

pub fn cumulative_curve(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    std::iter::once((0.0, 0.0))
        .chain(sorted.iter().enumerate().map(|(k, &e)| (e, (k + 1) as f64 / n)))
        .collect()
}

/// Pairwise errors of estimated absolute poses against ground truth.
/// Unregistered cameras (`None`) make their pairs count as 180°.
pub fn evaluate_poses(
    est: &[Option<Se3Pose>],
    gt: &[Se3Pose],
    thresholds: &[f64],
) -> Result<PoseErrorReport, MetricError> {
    if est.len() != gt.len() {
        return Err(MetricError::InvalidInput(format!(
            "{} estimated poses for {} cameras",
            est.len(),
            gt.len()
        )));
    }
    let mut pairs = Vec::new();
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let rel_gt = Se3Pose::relative(&gt[i], &gt[j]);
            let pair = match (&est[i], &est[j]) {
                (Some(a), Some(b)) => {
                    let rel = Se3Pose::relative(a, b);
                    match pose_error(&rel, &rel_gt) {
                        Ok(combined) => PairError {
                            i,
                            j,
                            rotation: rotation_error(&rel, &rel_gt),
                            translation: Some(translation_angle(&rel, &rel_gt)),
                            combined,
                        },
                        Err(MetricError::UndefinedTranslation { rotation }) => PairError {
                            i,
                            j,
                            rotation,
                            translation: None,
                            combined: rotation,
                        },
                        Err(e) => return Err(e),
                    }
                }
                _ => PairError {
                    i,
                    j,
                    rotation: 180.0,
                    translation: None,
                    combined: 180.0,
                },
            };
            pairs.push(pair);
        }
    }
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let combined: Vec<f64> = pairs.iter().map(|p| p.combined).collect();
    let auc = thresholds
        .iter()
        .map(|&t| auc(&combined, t).map(|a| (t, a)))
        .collect::<Result<_, _>>()?;
    Ok(PoseErrorReport { pairs, auc })
}

fn translation_angle(est: &Se3Pose, gt: &Se3Pose) -> f64 {
    let (te, tg) = (est.translation(), gt.translation());
    te.cross(tg).norm().atan2(te.dot(tg)).to_degrees()
}
